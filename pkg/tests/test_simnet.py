import pytest
from hypothesis import given, settings, strategies as st

from racsim.behavior import Verdict
from racsim.core import NodeId
from racsim.simnet import (
    AssessmentCache,
    EventQueue,
    FaultPlan,
    InvalidScenario,
    KILL_CHAIN_STAGES,
    ParseError,
    RiskConfig,
    TraceBook,
    assets_of,
    load_scenario,
    load_traces,
    nodes_of,
    org_nodes_of,
    run_scenario,
    scenario_from_mapping,
    synthesize_traces,
)


def mapping(**over):
    data = {
        "algorithm": "rac",
        "seed": 1,
        "orgs": {"alpha": 3, "beta": 3},
        "evaluators_per_org": 1,
        "latency": {"mean_ms": 3, "jitter_ms": 1},
        "duration_ms": 1500,
        "workload": {"rate_per_ms": 0.1, "total_requests": 12},
        "risk": {
            "trace_length": 60, "trees": 30, "subsample": 16,
            "kappa": 6.0, "alphabet": 6, "noise": 0.0,
        },
    }
    data.update(over)
    return data


# ------------------------------------------------------------- validation


def test_defaults_fill_in():
    s = scenario_from_mapping({})
    assert s.algorithm == "rac" and s.orgs == (("alpha", 3), ("beta", 3))
    assert s.workload.total_requests == 0
    assert s.risk.alphabet == 30 and s.risk.noise == pytest.approx(0.03)


def test_unit_conversions():
    s = scenario_from_mapping(mapping(faults={"crash": {"alpha-2": 100}}))
    assert s.latency_mean_us == 3_000 and s.latency_jitter_us == 1_000
    assert s.duration_us == 1_500_000
    assert s.faults.crash == (("alpha-2", 100_000),)


@pytest.mark.parametrize(
    "data, field",
    [
        ({"surprise": 1}, "surprise"),
        ({"algorithm": "paxos"}, "algorithm"),
        ({"orgs": {}}, "orgs"),
        ({"orgs": {"al-pha": 3, "beta": 3}}, "orgs"),
        ({"orgs": {"alpha": 0, "beta": 3}}, "orgs.alpha"),
        ({"evaluators_per_org": 0}, "evaluators_per_org"),
        ({"latency": {"mean_ms": 0}}, "latency.mean_ms"),
        ({"latency": {"jitter_ms": -1}}, "latency.jitter_ms"),
        ({"drop_probability": 1.0}, "drop_probability"),
        ({"duration_ms": 0}, "duration_ms"),
        ({"workload": {"rate_per_ms": 0}}, "workload.rate_per_ms"),
        ({"workload": {"total_requests": -1}}, "workload.total_requests"),
        ({"workload": {"payload_bytes": 0}}, "workload.payload_bytes"),
        ({"risk": {"kappa": 0}}, "risk.kappa"),
        ({"risk": {"trace_length": KILL_CHAIN_STAGES - 1}}, "risk.trace_length"),
        ({"risk": {"alphabet": 1}}, "risk.alphabet"),
        ({"risk": {"noise": 1.0}}, "risk.noise"),
        ({"faults": {"tamper_accountant": ["ghost-9"]}}, "faults.tamper_accountant"),
        ({"faults": {"crash": {"ghost-9": 10}}}, "faults.crash"),
        ({"faults": {"crash": {"alpha-0": -5}}}, "faults.crash"),
        ({"partitions": [{"start_ms": 5, "end_ms": 1, "groups": []}]}, "partitions[0]"),
        ({"partitions": [{"start_ms": 0, "end_ms": 1, "groups": [["ghost-9"]]}]},
         "partitions[0].groups"),
        ({"assets": {"ghost-9": 4}}, "assets"),
    ],
)
def test_rejects_bad_fields(data, field):
    with pytest.raises(InvalidScenario) as err:
        scenario_from_mapping(mapping(**data))
    assert err.value.field == field


def test_rac_needs_two_orgs_and_enough_seats():
    with pytest.raises(InvalidScenario):
        scenario_from_mapping(mapping(orgs={"alpha": 5}))
    with pytest.raises(InvalidScenario) as err:
        scenario_from_mapping(mapping(orgs={"alpha": 1, "beta": 3}, evaluators_per_org=2))
    assert err.value.field == "orgs.alpha"
    # raft has no evaluator group, so one org is fine
    s = scenario_from_mapping(mapping(algorithm="raft", orgs={"solo": 5}))
    assert s.orgs == (("solo", 5),)


def test_scenario_must_be_mapping():
    with pytest.raises(InvalidScenario):
        scenario_from_mapping(["nope"])


def test_load_scenario_yaml_errors(tmp_path):
    missing = tmp_path / "absent.yaml"
    with pytest.raises(InvalidScenario):
        load_scenario(missing)
    bad = tmp_path / "bad.yaml"
    bad.write_text("algorithm: [unclosed\n")
    with pytest.raises(InvalidScenario):
        load_scenario(bad)
    good = tmp_path / "good.yaml"
    good.write_text("algorithm: raft\norgs:\n  solo: 3\nseed: 7\n")
    assert load_scenario(good).seed == 7


# ----------------------------------------------------------- layout helpers


def test_nodes_are_sorted_and_grouped():
    s = scenario_from_mapping(mapping(orgs={"beta": 2, "alpha": 2}))
    names = [n.value for n in nodes_of(s)]
    assert names == ["alpha-0", "alpha-1", "beta-0", "beta-1"]
    grouped = org_nodes_of(s)
    assert sorted(grouped) == ["alpha", "beta"]
    assert [n.value for n in grouped["beta"]] == ["beta-0", "beta-1"]


def test_assets_default_descend_with_overrides():
    s = scenario_from_mapping(mapping(orgs={"alpha": 3, "beta": 3},
                                      assets={"alpha-2": 500}))
    assets = assets_of(s)
    assert assets[NodeId("alpha-0", "alpha")] == 100.0
    assert assets[NodeId("alpha-1", "alpha")] == 99.0
    assert assets[NodeId("alpha-2", "alpha")] == 500.0


def test_event_queue_orders_by_time_then_insertion():
    q = EventQueue()
    q.push(5, "b", "B")
    q.push(1, "a", "A")
    q.push(5, "c", "C")
    assert [q.pop() for _ in range(3)] == [(1, "a", "A"), (5, "b", "B"), (5, "c", "C")]
    assert len(q) == 0


# --------------------------------------------------------- trace synthesis


def four_nodes():
    return tuple(NodeId(f"n-{i}", "n") for i in range(4))


def test_traces_are_deterministic():
    plan = FaultPlan(tamper=("n-3",))
    a = synthesize_traces(four_nodes(), 1, plan, 9, length=50, alphabet=6)
    b = synthesize_traces(four_nodes(), 1, plan, 9, length=50, alphabet=6)
    assert a == b
    c = synthesize_traces(four_nodes(), 1, plan, 10, length=50, alphabet=6)
    assert a != c


def test_attackers_clean_in_first_term_only():
    plan = FaultPlan(tamper=("n-3",))
    nodes = four_nodes()
    term0 = synthesize_traces(nodes, 0, plan, 9, length=50, alphabet=6)
    assert all(max(t.calls) < 6 for t in term0.values())
    term1 = synthesize_traces(nodes, 1, plan, 9, length=50, alphabet=6)
    for node, trace in term1.items():
        assert len(trace.calls) == 50
        if node.value == "n-3":
            assert max(trace.calls) >= 6  # kill-chain symbols spliced in
        else:
            assert max(trace.calls) < 6


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=1000), st.integers(min_value=0, max_value=5))
def test_honest_traces_stay_in_alphabet(seed, term):
    traces = synthesize_traces(four_nodes(), term, FaultPlan(), seed,
                               length=30, alphabet=5)
    for trace in traces.values():
        assert len(trace.calls) == 30
        assert all(0 <= c < 5 for c in trace.calls)


def test_trace_book_returns_shared_objects():
    s = scenario_from_mapping(mapping())
    book = TraceBook(s, nodes_of(s))
    assert book.term_traces(1) is book.term_traces(1)
    node = nodes_of(s)[0]
    assert book.get(node, 1) is book.term_traces(1)[node]
    # pre-election terms clamp to the bootstrap trace set
    assert book.term_traces(-1) is book.term_traces(0)


def test_assessment_cache_deduplicates():
    traces = tuple(
        synthesize_traces(four_nodes(), 0, FaultPlan(), 3, length=40, alphabet=6).values()
    )
    cache = AssessmentCache()
    config = RiskConfig(window=3, tree_count=10, subsample_size=8, kappa=6.0, seed=1)
    assert cache(traces, config) is cache(traces, config)


def test_load_traces_reads_directory(tmp_path):
    (tmp_path / "node_a-0.txt").write_text("0 1 2")
    (tmp_path / "node_a-1.txt").write_text("")
    (tmp_path / "node_b-0.txt").write_text("3\n4")
    traces = load_traces(tmp_path, term=2)
    assert [t.node.value for t in traces] == ["a-0", "a-1", "b-0"]
    assert traces[0].calls == (0, 1, 2) and traces[0].term == 2
    assert traces[1].calls == ()
    assert traces[2].node.org == "b"


def test_load_traces_rejects_bad_tokens(tmp_path):
    (tmp_path / "node_x.txt").write_text("1 oops 2")
    with pytest.raises(ParseError) as err:
        load_traces(tmp_path)
    assert err.value.offset == 1
    (tmp_path / "node_x.txt").write_text("-3")
    with pytest.raises(ParseError):
        load_traces(tmp_path)


# ------------------------------------------------------------- whole runs


@pytest.fixture(scope="module")
def honest_run():
    return run_scenario(scenario_from_mapping(mapping()))


@pytest.fixture(scope="module")
def tamper_run():
    return run_scenario(scenario_from_mapping(mapping(
        seed=5,
        duration_ms=2000,
        faults={"tamper_accountant": ["beta-2"], "rig_first_election": True},
    )))


def test_honest_run_commits_everything(honest_run):
    assert honest_run.violations == ()
    assert honest_run.metrics.committed == 12
    assert honest_run.committed_tampered == 0
    assert honest_run.elected and honest_run.elected[0][0] == 1
    assert all(listed == () for listed in honest_run.rnl_final.values())


def test_runs_are_reproducible(honest_run):
    again = run_scenario(scenario_from_mapping(mapping()))
    assert again.events == honest_run.events
    assert again.commit_indexes == honest_run.commit_indexes
    assert again.rnl_final == honest_run.rnl_final


def test_tampering_accountant_is_unmasked(tamper_run):
    assert tamper_run.elected[0] == (1, "beta-2")
    assert all(node != "beta-2" for term, node in tamper_run.elected[1:])
    honest = [v for v in tamper_run.rnl_final if v != "beta-2"]
    assert honest and all("beta-2" in tamper_run.rnl_final[v] for v in honest)
    assert tamper_run.committed_tampered == 0
    assert tamper_run.violations == ()
    assert tamper_run.metrics.committed == 12


def test_tamper_verdicts_and_stakes(tamper_run):
    byz = [v for v in tamper_run.verdicts if v["verdict"] == Verdict.BYZANTINE.value]
    assert byz and all(v["node"] == "beta-2" for v in byz)
    ledger = tamper_run.ledger
    assert ledger.balances["beta"] < 100 < ledger.balances["alpha"]
    assert ledger.total() == 200


def test_crash_leaves_survivors_consistent():
    result = run_scenario(scenario_from_mapping(mapping(
        faults={"crash": {"beta-2": 200}},
    )))
    assert result.violations == ()
    assert result.metrics.committed == 12
    survivors = [v for v in result.commit_indexes if v != "beta-2"]
    assert min(result.commit_indexes[v] for v in survivors) >= result.commit_indexes["beta-2"]


def test_targeted_dos_forces_reelections():
    result = run_scenario(scenario_from_mapping(mapping(
        workload={"rate_per_ms": 0.1, "total_requests": 0},
        faults={"targeted_dos": True},
        duration_ms=1800,
    )))
    terms = {term for term, _ in result.elected}
    assert len(terms) >= 2
    assert any(e["kind"] == "dos_silence" for e in result.events)


def test_inject_hook_trips_election_safety():
    result = run_scenario(scenario_from_mapping(mapping(inject=["double_accountant"])))
    assert any(v.startswith("election_safety") for v in result.violations)


def test_raft_run_commits_everything():
    result = run_scenario(scenario_from_mapping(mapping(
        algorithm="raft", orgs={"solo": 5},
    )))
    assert result.violations == ()
    assert result.metrics.committed == 12
    assert result.committed_tampered == 0
    assert all(listed == () for listed in result.rnl_final.values())
