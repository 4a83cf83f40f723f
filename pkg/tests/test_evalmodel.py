import numpy as np
import pytest

from racsim.evalmodel import (
    INDICATORS,
    ClosenessScores,
    IdealSolutions,
    IndicatorMatrix,
    UnknownLevel,
    closeness,
    dump_matrix_csv,
    evaluate,
    ideal_solutions,
    load_matrix_csv,
    normalize_matrix,
    reference_matrix,
    reference_matrix_path,
    score_rubric,
)

# frozen outputs of an independent TOPSIS script over the reference matrix
EXPECTED_F = {
    "Beh-Raft": 0.43339360962329476,
    "HHRAFT": 0.5160263002457851,
    "CRAFT": 0.4097103040764131,
    "Tendermint BFT": 0.60349872842219,
    "RAC": 0.5666063903767053,
}
C_PLUS = (1.0, 1.0, 1.0, 0.7, 1.0, 1.0, 0.7)
C_MINUS = (0.0, 0.5, 0.0, 0.3, 0.0, 0.3, 0.3)


# ------------------------------------------------------------------ rubric


def test_rubric_rac_row():
    row = score_rubric("part", "voting", "yes", "51%", "yes", "middle", "O(n)")
    assert row == (0, 0.5, 1, 0.7, 1, 0.6, 0.7)


def test_rubric_tendermint_row():
    row = score_rubric("all", "polling", "yes", "33%", "no", "high", "O(n^2)")
    assert row == (1, 1, 1, 0.5, 0, 1, 0.3)


@pytest.mark.parametrize(
    "tolerance,score",
    [
        (0, 0.0),
        (1, 0.3),
        (16, 0.3),
        (17, 0.5),
        (33, 0.5),
        (34, 0.7),
        ("51%", 0.7),
        (52, 1.0),
        (100, 1.0),
    ],
)
def test_bft_bands(tolerance, score):
    row = score_rubric("part", "voting", "no", tolerance, "no", "low", "O(1)")
    assert row[3] == score


@pytest.mark.parametrize(
    "answer,score",
    [
        (">O(n^2)", 0.0),
        ("O(n²)", 0.3),
        ("O(n log n)", 0.5),
        ("o(n)", 0.7),
        ("O(1)", 1.0),
    ],
)
def test_resource_levels(answer, score):
    row = score_rubric("part", "voting", "no", 0, "no", "low", answer)
    assert row[6] == score


def test_unknown_levels():
    with pytest.raises(UnknownLevel):
        score_rubric("some", "voting", "no", 0, "no", "low", "O(1)")
    with pytest.raises(UnknownLevel):
        score_rubric("part", "lottery", "no", 0, "no", "low", "O(1)")
    with pytest.raises(UnknownLevel):
        score_rubric("part", "voting", "no", -3, "no", "low", "O(1)")
    with pytest.raises(UnknownLevel):
        score_rubric("part", "voting", "no", "often", "no", "low", "O(1)")
    with pytest.raises(UnknownLevel):
        score_rubric("part", "voting", "no", 0, "no", "free", "O(1)")
    with pytest.raises(UnknownLevel):
        score_rubric("part", "voting", "no", 0, "no", "low", "O(2^n)")


# ------------------------------------------------------------- ideals and f


def test_reference_matrix_values():
    m = reference_matrix()
    assert m.indicators == INDICATORS
    assert m.algorithms == ("Beh-Raft", "HHRAFT", "CRAFT", "Tendermint BFT", "RAC")
    expected = np.array(
        [
            [0, 0.5, 0, 0.7, 1, 0.6, 0.7],
            [0, 0.5, 1, 0.3, 1, 0.3, 0.7],
            [1, 0.5, 0, 0.7, 0, 0.3, 0.7],
            [1, 1, 1, 0.5, 0, 1, 0.3],
            [0, 0.5, 1, 0.7, 1, 0.6, 0.7],
        ]
    )
    assert np.array_equal(m.values, expected)


def test_ideal_solutions_exact():
    ideals = ideal_solutions(reference_matrix())
    assert ideals.positive == C_PLUS
    assert ideals.negative == C_MINUS


def test_single_algorithm_ideals():
    m = IndicatorMatrix(("x",), INDICATORS, np.array([[0, 0.5, 1, 0.7, 1, 0.6, 0.7]]))
    ideals = ideal_solutions(m)
    assert ideals.positive == ideals.negative == (0, 0.5, 1, 0.7, 1, 0.6, 0.7)


def test_closeness_pinned_values():
    scores = evaluate(reference_matrix())
    for name, f in zip(scores.algorithms, scores.f):
        assert f == pytest.approx(EXPECTED_F[name], abs=1e-9)
    i = scores.algorithms.index("RAC")
    assert scores.s_plus[i] == pytest.approx(np.sqrt(1.41), abs=1e-12)
    assert scores.s_minus[i] == pytest.approx(np.sqrt(2.41), abs=1e-12)


def test_literal_ranking_puts_tendermint_first():
    scores = evaluate(reference_matrix())
    assert scores.ranking[0] == "Tendermint BFT"
    assert scores.ranking[1] == "RAC"
    assert scores.ranking[-1] == "CRAFT"


def test_extreme_rows():
    values = np.array([C_PLUS, C_MINUS, [0.5] * 7])
    m = IndicatorMatrix(("hi", "lo", "mid"), INDICATORS, values)
    scores = evaluate(m)
    assert scores.f[0] == 1.0
    assert scores.f[1] == 0.0
    assert 0.0 < scores.f[2] < 1.0


def test_degenerate_ideals_flagged():
    values = np.tile([0.5] * 7, (3, 1))
    m = IndicatorMatrix(("a", "b", "c"), INDICATORS, values)
    scores = evaluate(m)
    assert scores.degenerate
    assert scores.f == (0.5, 0.5, 0.5)


def test_row_permutation_invariance():
    m = reference_matrix()
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(m.algorithms))
    shuffled = IndicatorMatrix(
        tuple(m.algorithms[i] for i in perm), m.indicators, m.values[perm]
    )
    base = dict(zip(evaluate(m).algorithms, evaluate(m).f))
    moved = dict(zip(evaluate(shuffled).algorithms, evaluate(shuffled).f))
    assert base == moved


def test_ranking_tie_broken_by_name():
    row = [0.5, 0.5, 1, 0.7, 1, 0.6, 0.7]
    other = [1.0, 0.5, 0, 0.3, 0, 0.3, 0.3]
    m = IndicatorMatrix(("zeta", "alpha", "low"), INDICATORS, np.array([row, row, other]))
    scores = evaluate(m)
    assert scores.ranking[:2] == ("alpha", "zeta")


def test_matches_independent_recomputation_on_random_matrices():
    rng = np.random.default_rng(1234)
    levels = np.array([0.0, 0.3, 0.5, 0.6, 0.7, 1.0])
    for _ in range(100):
        n = int(rng.integers(2, 7))
        values = rng.choice(levels, size=(n, 7))
        m = IndicatorMatrix(tuple(f"alg{i}" for i in range(n)), INDICATORS, values)
        scores = evaluate(m)
        cp, cn = values.max(0), values.min(0)
        if np.array_equal(cp, cn):
            assert scores.degenerate
            continue
        sp = np.sqrt(((values - cp) ** 2).sum(1))
        sn = np.sqrt(((values - cn) ** 2).sum(1))
        assert np.allclose(scores.f, sn / (sn + sp), atol=1e-9)


# --------------------------------------------------------------------- I/O


def test_csv_round_trip(tmp_path):
    m = reference_matrix()
    path = tmp_path / "matrix.csv"
    path.write_text(dump_matrix_csv(m))
    loaded = load_matrix_csv(path)
    assert loaded.algorithms == m.algorithms
    assert loaded.indicators == m.indicators
    assert np.array_equal(loaded.values, m.values)


def test_reference_fixture_ships_with_package():
    path = reference_matrix_path()
    assert path.is_file()
    loaded = load_matrix_csv(path)
    assert loaded.algorithms == reference_matrix().algorithms
    assert np.array_equal(loaded.values, reference_matrix().values)


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("name,a,b\nx,0,1\n")
    with pytest.raises(ValueError):
        load_matrix_csv(path)


def test_matrix_value_bounds_checked():
    with pytest.raises(ValueError):
        IndicatorMatrix(("a",), INDICATORS, np.array([[0, 0, 0, 0, 0, 0, 1.5]]))


def test_ideals_ordering_checked():
    with pytest.raises(ValueError):
        IdealSolutions(positive=(0.0,), negative=(1.0,))


def test_normalize_matrix_unit_columns():
    m = reference_matrix()
    norm = normalize_matrix(m)
    col_norms = np.sqrt((norm.values**2).sum(axis=0))
    assert np.allclose(col_norms, 1.0)
    zero_col = IndicatorMatrix(
        ("a", "b"), ("x", "y"), np.array([[0.0, 1.0], [0.0, 0.5]])
    )
    n2 = normalize_matrix(zero_col)
    assert np.array_equal(n2.values[:, 0], [0.0, 0.0])
