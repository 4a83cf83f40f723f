"""TOPSIS-style scoring of consensus algorithms.

Seven qualitative indicators are mapped onto [0, 1] by fixed rubric
tables, giving an algorithms x indicators matrix. Column maxima and
minima form the positive and negative ideal rows; each algorithm is
ranked by its relative closeness f = s_minus / (s_minus + s_plus),
where s_plus / s_minus are Euclidean distances to the ideals.

Values are used raw by default; vector normalization is available
separately for sensitivity runs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INDICATORS = (
    "consensus_nodes",
    "selection_method",
    "weighted_nodes",
    "bft_tolerance",
    "controllability",
    "attack_cost",
    "resource_cost",
)


class UnknownLevel(Exception):
    """A rubric answer outside its table's enumeration."""


_CONSENSUS_NODES = {"part": 0.0, "all": 1.0}
_SELECTION = {"competing": 0.0, "voting": 0.5, "polling": 1.0}
_YES_NO = {"no": 0.0, "yes": 1.0}
_ATTACK_COST = {"none": 0.0, "low": 0.3, "middle": 0.6, "high": 1.0}
_RESOURCE = {
    ">o(n^2)": 0.0,
    "o(n^2)": 0.3,
    "o(nlogn)": 0.5,
    "o(n)": 0.7,
    "o(1)": 1.0,
}


def _lookup(table: dict, answer: str, what: str) -> float:
    key = str(answer).strip().lower()
    if key not in table:
        raise UnknownLevel(f"{what}: {answer!r} not in {sorted(table)}")
    return table[key]


def _bft_band(tolerance) -> float:
    """Tolerated byzantine share in percent, banded: 0; 1-16; 17-33; 34-51; >51."""
    if isinstance(tolerance, str):
        tolerance = tolerance.strip().rstrip("%")
        try:
            tolerance = float(tolerance)
        except ValueError:
            raise UnknownLevel(f"bft_tolerance: {tolerance!r}") from None
    if tolerance < 0 or tolerance > 100:
        raise UnknownLevel(f"bft_tolerance: {tolerance!r} outside 0..100")
    if tolerance == 0:
        return 0.0
    if tolerance <= 16:
        return 0.3
    if tolerance <= 33:
        return 0.5
    if tolerance <= 51:
        return 0.7
    return 1.0


def _resource_level(answer: str) -> float:
    key = str(answer).strip().lower().replace(" ", "").replace("²", "^2")
    if key not in _RESOURCE:
        raise UnknownLevel(f"resource_cost: {answer!r} not in {sorted(_RESOURCE)}")
    return _RESOURCE[key]


def score_rubric(
    consensus_nodes: str,
    selection_method: str,
    weighted_nodes: str,
    bft_tolerance,
    controllability: str,
    attack_cost: str,
    resource_cost: str,
) -> tuple:
    """One algorithm's row, in INDICATORS order."""
    return (
        _lookup(_CONSENSUS_NODES, consensus_nodes, "consensus_nodes"),
        _lookup(_SELECTION, selection_method, "selection_method"),
        _lookup(_YES_NO, weighted_nodes, "weighted_nodes"),
        _bft_band(bft_tolerance),
        _lookup(_YES_NO, controllability, "controllability"),
        _lookup(_ATTACK_COST, attack_cost, "attack_cost"),
        _resource_level(resource_cost),
    )


@dataclass(frozen=True, eq=False)
class IndicatorMatrix:
    algorithms: tuple
    indicators: tuple
    values: np.ndarray  # n algorithms x m indicators, all in [0, 1]

    def __post_init__(self) -> None:
        n, m = self.values.shape
        if n != len(self.algorithms) or m != len(self.indicators):
            raise ValueError("matrix shape must match its labels")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("indicator values must lie in [0, 1]")


@dataclass(frozen=True)
class IdealSolutions:
    positive: tuple
    negative: tuple

    def __post_init__(self) -> None:
        if any(lo > hi for lo, hi in zip(self.negative, self.positive)):
            raise ValueError("negative ideal must not exceed positive ideal")


@dataclass(frozen=True)
class ClosenessScores:
    algorithms: tuple
    s_plus: tuple
    s_minus: tuple
    f: tuple
    ranking: tuple  # algorithm names, best first; ties broken by name
    degenerate: bool = False  # ideals coincide; every f pinned at 0.5


def ideal_solutions(matrix: IndicatorMatrix) -> IdealSolutions:
    return IdealSolutions(
        positive=tuple(float(x) for x in matrix.values.max(axis=0)),
        negative=tuple(float(x) for x in matrix.values.min(axis=0)),
    )


def closeness(matrix: IndicatorMatrix, ideals: IdealSolutions) -> ClosenessScores:
    pos = np.asarray(ideals.positive, dtype=float)
    neg = np.asarray(ideals.negative, dtype=float)
    if pos.shape != (len(matrix.indicators),):
        raise ValueError("ideals dimension mismatch")
    s_plus = np.sqrt(((matrix.values - pos) ** 2).sum(axis=1))
    s_minus = np.sqrt(((matrix.values - neg) ** 2).sum(axis=1))

    degenerate = bool(np.array_equal(pos, neg))
    if degenerate:
        f = np.full(len(matrix.algorithms), 0.5)
    else:
        f = s_minus / (s_minus + s_plus)

    order = sorted(range(len(matrix.algorithms)), key=lambda i: (-f[i], matrix.algorithms[i]))
    return ClosenessScores(
        algorithms=matrix.algorithms,
        s_plus=tuple(float(x) for x in s_plus),
        s_minus=tuple(float(x) for x in s_minus),
        f=tuple(float(x) for x in f),
        ranking=tuple(matrix.algorithms[i] for i in order),
        degenerate=degenerate,
    )


def evaluate(matrix: IndicatorMatrix) -> ClosenessScores:
    return closeness(matrix, ideal_solutions(matrix))


def normalize_matrix(matrix: IndicatorMatrix) -> IndicatorMatrix:
    """Columnwise vector normalization (sensitivity mode; not the default)."""
    norms = np.sqrt((matrix.values**2).sum(axis=0))
    values = np.divide(
        matrix.values, norms, out=np.zeros_like(matrix.values), where=norms > 0
    )
    return IndicatorMatrix(matrix.algorithms, matrix.indicators, values)


# ------------------------------------------------------------ reference data

_REFERENCE_RUBRIC = {
    # published qualitative assessments of five permissioned-chain algorithms
    "Beh-Raft": ("part", "voting", "no", "51%", "yes", "middle", "O(n)"),
    "HHRAFT": ("part", "voting", "yes", "16%", "yes", "low", "O(n)"),
    "CRAFT": ("all", "voting", "no", "51%", "no", "low", "O(n)"),
    "Tendermint BFT": ("all", "polling", "yes", "33%", "no", "high", "O(n^2)"),
    "RAC": ("part", "voting", "yes", "51%", "yes", "middle", "O(n)"),
}


def reference_matrix() -> IndicatorMatrix:
    """The five-algorithm comparison matrix, rebuilt from rubric answers."""
    algorithms = tuple(_REFERENCE_RUBRIC)
    values = np.array(
        [score_rubric(*_REFERENCE_RUBRIC[name]) for name in algorithms], dtype=float
    )
    return IndicatorMatrix(algorithms, INDICATORS, values)


def dump_matrix_csv(matrix: IndicatorMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("algorithm",) + tuple(matrix.indicators))
    for name, row in zip(matrix.algorithms, matrix.values):
        writer.writerow([name] + [format(v, "g") for v in row])
    return buf.getvalue()


def load_matrix_csv(path) -> IndicatorMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["algorithm"]:
        raise ValueError(f"{path}: first header cell must be 'algorithm'")
    indicators = tuple(rows[0][1:])
    algorithms = tuple(r[0] for r in rows[1:] if r)
    values = np.array([[float(x) for x in r[1:]] for r in rows[1:] if r], dtype=float)
    return IndicatorMatrix(algorithms, indicators, values)


def reference_matrix_path() -> Path:
    return Path(__file__).parent / "data" / "consensus_indicators.csv"
