"""Deterministic discrete-event simulation harness.

A scenario (YAML) fixes the cluster layout, the latency model, the
fault plan, the client workload, and the trace-synthesis parameters.
`run_scenario` executes it to completion and returns the event log,
derived metrics, behavior verdicts, stake movements, final chains, and
the results of post-run invariant checks. Two runs of the same
scenario with the same seed produce identical results.

Time is integer microseconds. All randomness derives from the scenario
seed through named numpy SeedSequence streams, so adding a draw to one
stream never perturbs the others.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from . import metrics as metrics_mod
from .behavior import (
    ActionSymbol,
    BehaviorRecord,
    InsufficientStake,
    StakeLedger,
    Verdict,
    apply_penalty,
    classify,
)
from .core import NodeId, RiskNodeList, Role, TransactionRequest
from .protocol import (
    PH_CLIENT,
    ClientRequestMsg,
    Delivery,
    NodeFaults,
    ProtocolTiming,
    RacNode,
    Recovered,
    Schedule,
    Send,
    TimerFired,
    init_evaluator_group,
    strict_majority,
)
from .raft import RaftNode
from .risk import RiskConfig, SyscallTrace, assess

LATENCY_FLOOR_US = 100
CLIENT_RETRY_US = 300_000
ASSESS_US_PER_TRACE = 1_000  # modeled scoring time per collected trace
DOS_DELAY_US = 60_000  # long enough for one packaged block to get judged
DOS_DURATION_US = 250_000
KILL_CHAIN_STAGES = 6  # reserved symbols appended after the honest alphabet

T_EMIT = "client_emit"
T_RETRY = "client_retry"


class InvalidScenario(Exception):
    def __init__(self, field_name: str, problem: str) -> None:
        super().__init__(f"{field_name}: {problem}")
        self.field = field_name
        self.problem = problem


class ParseError(Exception):
    def __init__(self, file: str, offset: int, problem: str) -> None:
        super().__init__(f"{file}: token {offset}: {problem}")
        self.file = file
        self.offset = offset


# ------------------------------------------------------------- scenario


@dataclass(frozen=True)
class Workload:
    rate_per_ms: float = 1.0
    total_requests: int = 0
    payload_bytes: int = 32


@dataclass(frozen=True)
class RiskParams:
    window: int = 5
    trees: int = 100
    subsample: int = 256
    kappa: float = 2.0
    trace_length: int = 2000
    alphabet: int = 6
    noise: float = 0.0


@dataclass(frozen=True)
class Partition:
    start_us: int
    end_us: int
    groups: tuple  # tuple of frozensets of NodeId


@dataclass(frozen=True)
class FaultPlan:
    crash: tuple = ()  # ((node value, at_us), ...)
    tamper: tuple = ()  # node values
    collude: tuple = ()
    sybil: tuple = ()
    targeted_dos: bool = False
    rig_first_election: bool = False

    @property
    def attack_values(self) -> frozenset:
        return frozenset(self.tamper) | frozenset(self.collude) | frozenset(self.sybil)


@dataclass(frozen=True)
class Scenario:
    algorithm: str = "rac"
    seed: int = 0
    orgs: tuple = (("alpha", 3), ("beta", 3))
    evaluators_per_org: int = 1
    latency_mean_us: int = 5_000
    latency_jitter_us: int = 2_000
    drop_probability: float = 0.0
    duration_us: int = 3_000_000
    workload: Workload = Workload()
    risk: RiskParams = RiskParams()
    faults: FaultPlan = FaultPlan()
    partitions: tuple = ()
    assets: tuple = ()  # ((node value, asset), ...) overrides
    inject: tuple = ()  # checker self-test hooks


def nodes_of(scenario: Scenario) -> tuple:
    out = []
    for org, count in scenario.orgs:
        out.extend(NodeId(f"{org}-{i}", org) for i in range(count))
    return tuple(sorted(out))


def org_nodes_of(scenario: Scenario) -> dict:
    grouped: dict = {}
    for node in nodes_of(scenario):
        grouped.setdefault(node.org, []).append(node)
    return grouped


def assets_of(scenario: Scenario) -> dict:
    """Defaults descend with the in-org index so <org>-0 anchors the
    evaluator group; explicit overrides win."""
    overrides = dict(scenario.assets)
    assets = {}
    for org, count in scenario.orgs:
        for i in range(count):
            node = NodeId(f"{org}-{i}", org)
            assets[node] = float(overrides.get(node.value, 100.0 - i))
    return assets


def _expect(data: dict, key: str, kinds, default, where: str):
    value = data.get(key, default)
    if kinds is not None and not isinstance(value, kinds):
        raise InvalidScenario(f"{where}{key}", f"expected {kinds}, got {value!r}")
    return value


def scenario_from_mapping(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise InvalidScenario("<root>", "scenario must be a mapping")
    known = {
        "algorithm", "seed", "orgs", "evaluators_per_org", "latency",
        "drop_probability", "duration_ms", "workload", "risk", "faults",
        "partitions", "assets", "inject",
    }
    for key in data:
        if key not in known:
            raise InvalidScenario(key, "unknown field")

    algorithm = _expect(data, "algorithm", str, "rac", "")
    if algorithm not in ("rac", "raft"):
        raise InvalidScenario("algorithm", f"must be 'rac' or 'raft', got {algorithm!r}")
    seed = _expect(data, "seed", int, 0, "")

    orgs_raw = _expect(data, "orgs", dict, {"alpha": 3, "beta": 3}, "")
    if not orgs_raw:
        raise InvalidScenario("orgs", "at least one organization is required")
    orgs = []
    for org, count in sorted(orgs_raw.items()):
        if not isinstance(org, str) or not org or "-" in org or "!" in org:
            raise InvalidScenario("orgs", f"bad org name {org!r} ('-' and '!' are reserved)")
        if not isinstance(count, int) or count < 1:
            raise InvalidScenario(f"orgs.{org}", f"node count must be a positive int, got {count!r}")
        orgs.append((org, count))
    per_org = _expect(data, "evaluators_per_org", int, 1, "")
    if per_org < 1:
        raise InvalidScenario("evaluators_per_org", "must be at least 1")

    lat = _expect(data, "latency", dict, {}, "")
    mean_ms = _expect(lat, "mean_ms", (int, float), 5.0, "latency.")
    jitter_ms = _expect(lat, "jitter_ms", (int, float), 2.0, "latency.")
    if mean_ms <= 0:
        raise InvalidScenario("latency.mean_ms", "must be positive")
    if jitter_ms < 0:
        raise InvalidScenario("latency.jitter_ms", "must be non-negative")

    drop = _expect(data, "drop_probability", (int, float), 0.0, "")
    if not 0 <= drop < 1:
        raise InvalidScenario("drop_probability", f"must lie in [0, 1), got {drop!r}")
    duration_ms = _expect(data, "duration_ms", (int, float), 3000, "")
    if duration_ms <= 0:
        raise InvalidScenario("duration_ms", "must be positive")

    wl = _expect(data, "workload", dict, {}, "")
    rate = _expect(wl, "rate_per_ms", (int, float), 1.0, "workload.")
    total = _expect(wl, "total_requests", int, 0, "workload.")
    payload = _expect(wl, "payload_bytes", int, 32, "workload.")
    if rate <= 0:
        raise InvalidScenario("workload.rate_per_ms", "must be positive")
    if total < 0:
        raise InvalidScenario("workload.total_requests", "must be non-negative")
    if payload < 1:
        raise InvalidScenario("workload.payload_bytes", "must be at least 1")

    rk = _expect(data, "risk", dict, {}, "")
    risk = RiskParams(
        window=_expect(rk, "window", int, 5, "risk."),
        trees=_expect(rk, "trees", int, 100, "risk."),
        subsample=_expect(rk, "subsample", int, 256, "risk."),
        kappa=float(_expect(rk, "kappa", (int, float), 2.0, "risk.")),
        trace_length=_expect(rk, "trace_length", int, 2000, "risk."),
        alphabet=_expect(rk, "alphabet", int, 30, "risk."),
        noise=float(_expect(rk, "noise", (int, float), 0.03, "risk.")),
    )
    if risk.window < 1:
        raise InvalidScenario("risk.window", "must be at least 1")
    if risk.trees < 1:
        raise InvalidScenario("risk.trees", "must be at least 1")
    if risk.subsample < 2:
        raise InvalidScenario("risk.subsample", "must be at least 2")
    if risk.kappa <= 0:
        raise InvalidScenario("risk.kappa", "must be positive")
    if risk.trace_length < KILL_CHAIN_STAGES:
        raise InvalidScenario("risk.trace_length", f"must be at least {KILL_CHAIN_STAGES}")
    if risk.alphabet < 2:
        raise InvalidScenario("risk.alphabet", "must be at least 2")
    if not 0 <= risk.noise < 1:
        raise InvalidScenario("risk.noise", f"must lie in [0, 1), got {risk.noise!r}")

    valid_names = {
        f"{org}-{i}" for org, count in orgs for i in range(count)
    }

    def _node_list(section: dict, key: str) -> tuple:
        raw = _expect(section, key, list, [], "faults.")
        for name in raw:
            if name not in valid_names:
                raise InvalidScenario(f"faults.{key}", f"unknown node {name!r}")
        return tuple(sorted(raw))

    fl = _expect(data, "faults", dict, {}, "")
    crash_raw = _expect(fl, "crash", dict, {}, "faults.")
    crash = []
    for name, at_ms in sorted(crash_raw.items()):
        if name not in valid_names:
            raise InvalidScenario("faults.crash", f"unknown node {name!r}")
        if not isinstance(at_ms, (int, float)) or at_ms < 0:
            raise InvalidScenario("faults.crash", f"bad crash time {at_ms!r} for {name!r}")
        crash.append((name, int(at_ms * 1000)))
    faults = FaultPlan(
        crash=tuple(crash),
        tamper=_node_list(fl, "tamper_accountant"),
        collude=_node_list(fl, "collude_evaluator"),
        sybil=_node_list(fl, "sybil"),
        targeted_dos=bool(_expect(fl, "targeted_dos", (bool,), False, "faults.")),
        rig_first_election=bool(_expect(fl, "rig_first_election", (bool,), False, "faults.")),
    )

    parts_raw = _expect(data, "partitions", list, [], "")
    partitions = []
    for i, p in enumerate(parts_raw):
        if not isinstance(p, dict):
            raise InvalidScenario(f"partitions[{i}]", "must be a mapping")
        start = _expect(p, "start_ms", (int, float), None, f"partitions[{i}].")
        end = _expect(p, "end_ms", (int, float), None, f"partitions[{i}].")
        groups_raw = _expect(p, "groups", list, None, f"partitions[{i}].")
        if start is None or end is None or groups_raw is None or end < start:
            raise InvalidScenario(f"partitions[{i}]", "needs start_ms <= end_ms and groups")
        groups = []
        for g in groups_raw:
            for name in g:
                if name not in valid_names:
                    raise InvalidScenario(f"partitions[{i}].groups", f"unknown node {name!r}")
            groups.append(frozenset(NodeId(n, n.split("-")[0]) for n in g))
        partitions.append(Partition(int(start * 1000), int(end * 1000), tuple(groups)))

    assets_raw = _expect(data, "assets", dict, {}, "")
    for name in assets_raw:
        if name not in valid_names:
            raise InvalidScenario("assets", f"unknown node {name!r}")
    assets = tuple(sorted((n, float(v)) for n, v in assets_raw.items()))

    inject = tuple(_expect(data, "inject", list, [], ""))

    scenario = Scenario(
        algorithm=algorithm,
        seed=seed,
        orgs=tuple(orgs),
        evaluators_per_org=per_org,
        latency_mean_us=int(mean_ms * 1000),
        latency_jitter_us=int(jitter_ms * 1000),
        drop_probability=float(drop),
        duration_us=int(duration_ms * 1000),
        workload=Workload(float(rate), total, payload),
        risk=risk,
        faults=faults,
        partitions=tuple(partitions),
        assets=assets,
        inject=inject,
    )
    if algorithm == "rac":
        for org, count in scenario.orgs:
            if count < per_org:
                raise InvalidScenario(
                    f"orgs.{org}", f"has {count} nodes but evaluators_per_org is {per_org}"
                )
        if len(scenario.orgs) < 2:
            raise InvalidScenario("orgs", "the evaluator group needs at least two orgs")
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidScenario(str(path), f"unreadable: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise InvalidScenario(str(path), f"not valid YAML: {exc}") from exc
    return scenario_from_mapping(data)


# ------------------------------------------------------------ event queue


class EventQueue:
    """Min-heap over (time_us, insertion seq): ties resolve in insertion
    order, which makes the whole run order deterministic."""

    def __init__(self) -> None:
        self._heap: list = []
        self._seq = itertools.count()

    def push(self, time_us: int, dst, event) -> None:
        heapq.heappush(self._heap, (int(time_us), next(self._seq), dst, event))

    def pop(self) -> tuple:
        time_us, _, dst, event = heapq.heappop(self._heap)
        return time_us, dst, event

    def __len__(self) -> int:
        return len(self._heap)


# --------------------------------------------------------- trace synthesis


def _honest_profile(seed: int, alphabet: int, noise: float) -> np.ndarray:
    """Sparse order-1 transition matrix shared by honest nodes: two
    preferred successors per symbol, the rest smoothed by the noise mass.
    The narrow out-degree keeps the honest n-gram vocabulary small and
    fully shared, which is what lets spliced stage grams stand out."""
    rng = np.random.default_rng([seed, 7000])
    base = np.zeros((alphabet, alphabet))
    probs = np.array([0.7, 0.3])
    for state in range(alphabet):
        succ = rng.choice(alphabet, size=min(2, alphabet), replace=False)
        base[state, succ] = probs[: succ.size] / probs[: succ.size].sum()
    matrix = (1.0 - noise) * base + noise / alphabet
    return matrix.cumsum(axis=1)


def synthesize_traces(
    nodes,
    term: int,
    plan: FaultPlan,
    seed: int,
    *,
    length: int = 2000,
    alphabet: int = 6,
    noise: float = 0.0,
) -> dict:
    """One term's syscall traces for every node. Fault-plan nodes get
    kill-chain splices (the reserved symbols alphabet..alphabet+5, run
    through twice per splice, in stage order) from term 1 on; term-0
    traces are clean everywhere, so an attacker looks normal until after
    the first election.

    The honest profile is deliberately narrow: a small alphabet, three
    preferred successors per symbol, and a tiny exploration mass. Honest
    nodes then share nearly their whole n-gram vocabulary and the
    spliced stage sequences stand out as the attacker's private grams."""
    nodes = tuple(sorted(nodes))
    cum = _honest_profile(seed, alphabet, noise)
    rng = np.random.default_rng([seed, 7001, term])
    n = len(nodes)
    states = rng.integers(alphabet, size=n)
    columns = np.empty((length, n), dtype=np.int64)
    columns[0] = states
    for step in range(1, length):
        draws = rng.random(n)
        states = (cum[states] < draws[:, None]).sum(axis=1)
        np.clip(states, 0, alphabet - 1, out=states)
        columns[step] = states
    rows = columns.T.copy()

    if term >= 1 and plan.attack_values:
        burst = KILL_CHAIN_STAGES * 2
        stages = np.arange(alphabet, alphabet + KILL_CHAIN_STAGES)
        splices = max(3, length // 40)
        attack_rng = np.random.default_rng([seed, 7002, term])
        rank = 0  # attackers revisit the stages in node-specific order
        for idx, node in enumerate(nodes):
            if node.value not in plan.attack_values:
                continue
            chain = np.concatenate(
                [stages, np.roll(stages, -(rank % KILL_CHAIN_STAGES))]
            )
            rank += 1
            positions = attack_rng.integers(0, length - burst + 1, size=splices)
            for pos in positions:
                rows[idx, pos : pos + burst] = chain

    return {
        node: SyscallTrace(node, term, tuple(int(v) for v in rows[idx]))
        for idx, node in enumerate(nodes)
    }


class TraceBook:
    """Lazy per-term cache so every evaluator sees the same trace objects."""

    def __init__(self, scenario: Scenario, nodes) -> None:
        self.scenario = scenario
        self.nodes = tuple(sorted(nodes))
        self._terms: dict = {}

    def term_traces(self, term: int) -> dict:
        term = max(0, term)
        if term not in self._terms:
            r = self.scenario.risk
            self._terms[term] = synthesize_traces(
                self.nodes,
                term,
                self.scenario.faults,
                self.scenario.seed,
                length=r.trace_length,
                alphabet=r.alphabet,
                noise=r.noise,
            )
        return self._terms[term]

    def get(self, node: NodeId, term: int) -> SyscallTrace:
        return self.term_traces(term)[node]


class AssessmentCache:
    """Evaluators holding the same trace set share one computed report.
    Safe because the trace book is the only trace source in a run, so a
    (term, node-set) pair names the inputs exactly."""

    def __init__(self) -> None:
        self._memo: dict = {}

    def __call__(self, traces: tuple, config: RiskConfig):
        key = (config, traces[0].term if traces else -1,
               frozenset(str(t.node) for t in traces))
        if key not in self._memo:
            self._memo[key] = assess(traces, config)
        return self._memo[key]


def load_traces(directory, term: int = 0) -> tuple:
    """Read node_<id>.txt files of whitespace-separated non-negative
    integers. An empty file is an empty trace."""
    directory = Path(directory)
    traces = []
    for path in sorted(directory.glob("node_*.txt")):
        value = path.stem[len("node_") :]
        org = value.split("-")[0] if "-" in value else value
        calls = []
        for offset, token in enumerate(path.read_text().split()):
            try:
                symbol = int(token)
            except ValueError:
                raise ParseError(str(path), offset, f"not an integer: {token!r}") from None
            if symbol < 0:
                raise ParseError(str(path), offset, f"negative symbol: {symbol}")
            calls.append(symbol)
        traces.append(SyscallTrace(NodeId(value, org), term, tuple(calls)))
    return tuple(traces)


# -------------------------------------------------------------- client


class ClientActor:
    """Sends each request to the believed accountant and the evaluator
    group at the same instant, learns both from commit notices, and
    re-sends whatever has not committed on a fixed retry cadence."""

    def __init__(self, name, scenario, nodes, initial_group, registry, recorder, payload_rng):
        self.name = name
        self.workload = scenario.workload
        self.accountant_belief = min(nodes)
        self.group_belief = tuple(initial_group)
        self.registry = registry
        self.record = recorder
        self.rng = payload_rng
        self.outstanding: dict = {}

    def start(self, now: int) -> list:
        out: list = []
        rate = self.workload.rate_per_ms
        for i in range(self.workload.total_requests):
            out.append(Schedule(now + int(i * 1000 / rate), T_EMIT, i))
        if self.workload.total_requests:
            out.append(Schedule(now + CLIENT_RETRY_US, T_RETRY))
        return out

    def step(self, now: int, event) -> list:
        out: list = []
        if isinstance(event, TimerFired):
            if event.kind == T_EMIT:
                self._emit(now, event.payload, out)
            elif event.kind == T_RETRY:
                for rid in sorted(self.outstanding):
                    self._send(self.outstanding[rid], out)
                if self.outstanding:
                    out.append(Schedule(now + CLIENT_RETRY_US, T_RETRY))
        elif isinstance(event, Delivery):
            notice = event.msg
            rid = getattr(notice, "request_id", None)
            if rid is not None:
                self.outstanding.pop(rid, None)
                self.accountant_belief = notice.accountant_id
                if notice.evaluator_group:
                    self.group_belief = tuple(notice.evaluator_group)
        return out

    def _emit(self, now: int, index: int, out: list) -> None:
        rid = f"r{index:06d}"
        payload = bytes(self.rng.bytes(self.workload.payload_bytes))
        request = TransactionRequest(rid, self.name, payload, now)
        self.registry[rid] = request
        self.outstanding[rid] = request
        self.record(now, self.name, "request_submitted", request_id=rid)
        self._send(request, out)

    def _send(self, request: TransactionRequest, out: list) -> None:
        targets = dict.fromkeys((self.accountant_belief,) + self.group_belief)
        for dst in targets:
            out.append(Send(dst, ClientRequestMsg(request), PH_CLIENT))


# ------------------------------------------------------------ simulation


@dataclass(frozen=True)
class _MsgInFlight:
    src: object
    msg: object
    phase: str
    round: object
    term: object
    sent_us: int


@dataclass(frozen=True)
class _Silence:
    node: NodeId
    duration_us: int


@dataclass(frozen=True)
class _CrashEvt:
    node: NodeId


@dataclass
class RunResult:
    scenario: Scenario
    events: list
    metrics: object
    verdicts: tuple
    chains: dict  # node value -> Chain
    commit_indexes: dict
    rnl_final: dict  # node value -> tuple of listed node values
    ledger: StakeLedger
    violations: tuple
    registry: dict
    elected: tuple  # ((term, node value), ...)
    committed_tampered: int


class _Runner:
    def __init__(self, scenario: Scenario) -> None:
        self.s = scenario
        self.nodes_list = nodes_of(scenario)
        self.org_nodes = org_nodes_of(scenario)
        self.assets = assets_of(scenario)
        self.plan = scenario.faults
        self.events: list = []
        self.registry: dict = {}
        self.elected: list = []
        self.queue = EventQueue()
        self.down_until: dict = {}
        self.timing = ProtocolTiming.from_latency(
            scenario.latency_mean_us,
            scenario.latency_jitter_us,
            assess_delay_us=ASSESS_US_PER_TRACE * len(self.nodes_list),
        )

        root = np.random.SeedSequence(scenario.seed)
        children = root.spawn(3 + len(self.nodes_list))
        self.latency_rng = np.random.default_rng(children[0])
        payload_rng = np.random.default_rng(children[1])
        node_rngs = {
            node: np.random.default_rng(child)
            for node, child in zip(self.nodes_list, children[3:])
        }

        recorder = self._make_recorder()
        faults_by_node = {
            node: NodeFaults(
                tamper=node.value in self.plan.tamper,
                collude=node.value in self.plan.collude,
                sybil=node.value in self.plan.sybil,
            )
            for node in self.nodes_list
        }

        self.actors: dict = {}
        if scenario.algorithm == "rac":
            book = TraceBook(scenario, self.nodes_list)
            cache = AssessmentCache()
            r = scenario.risk

            def risk_config_for(term: int) -> RiskConfig:
                term_seed = int(
                    np.random.SeedSequence([scenario.seed, 9100, term]).generate_state(1)[0]
                )
                return RiskConfig(
                    window=r.window,
                    tree_count=r.trees,
                    subsample_size=r.subsample,
                    kappa=r.kappa,
                    seed=term_seed,
                )

            self.initial_group = init_evaluator_group(
                self.org_nodes, scenario.evaluators_per_org, self.assets, RiskNodeList()
            )
            for node in self.nodes_list:
                self.actors[node] = RacNode(
                    node,
                    self.nodes_list,
                    self.org_nodes,
                    self.assets,
                    scenario.evaluators_per_org,
                    self.timing,
                    node_rngs[node],
                    recorder,
                    book.get,
                    cache,
                    risk_config_for,
                    faults=faults_by_node[node],
                )
        else:
            self.initial_group = ()
            for node in self.nodes_list:
                self.actors[node] = RaftNode(
                    node,
                    self.nodes_list,
                    self.timing,
                    node_rngs[node],
                    recorder,
                    faults=faults_by_node[node],
                )

        self.client = None
        if scenario.workload.total_requests > 0:
            self.client = ClientActor(
                "client-0",
                scenario,
                self.nodes_list,
                self.initial_group,
                self.registry,
                recorder,
                payload_rng,
            )
            self.actors[self.client.name] = self.client

    # ------------------------------------------------------- infrastructure

    def _make_recorder(self):
        def record(now, node, kind, **fields):
            entry = {"time_us": int(now), "node": str(node), "kind": kind}
            entry.update(fields)
            self.events.append(entry)
            if kind == "accountant_established":
                self.elected.append((fields["term"], str(node)))
                if self.plan.targeted_dos:
                    self.queue.push(
                        now + DOS_DELAY_US, "__sim__", _Silence(node, DOS_DURATION_US)
                    )

        return record

    def _is_down(self, addr, now: int) -> bool:
        return isinstance(addr, NodeId) and now < self.down_until.get(addr, 0)

    def _partition_cut(self, src, dst, now: int) -> bool:
        if not (isinstance(src, NodeId) and isinstance(dst, NodeId)):
            return False
        for p in self.s.partitions:
            if p.start_us <= now < p.end_us:
                gs = next((i for i, g in enumerate(p.groups) if src in g), None)
                gd = next((i for i, g in enumerate(p.groups) if dst in g), None)
                if (gs is not None or gd is not None) and gs != gd:
                    return True
        return False

    def _log_message(self, sent_us, src, dst, msg, phase, round_, status, reason=None, recv_us=None):
        entry = {
            "time_us": int(sent_us),
            "node": str(src),
            "kind": "message",
            "src": str(src),
            "dst": str(dst),
            "type": type(msg).__name__,
            "phase": phase,
            "round": round_,
            "term": getattr(msg, "term", None),
            "status": status,
        }
        if reason is not None:
            entry["reason"] = reason
        if recv_us is not None:
            entry["recv_time_us"] = int(recv_us)
        self.events.append(entry)

    def _send(self, now: int, src, eff: Send) -> None:
        if self._is_down(src, now):
            self._log_message(now, src, eff.dst, eff.msg, eff.phase, eff.round,
                              "dropped", "sender_down")
            return
        if self._partition_cut(src, eff.dst, now):
            self._log_message(now, src, eff.dst, eff.msg, eff.phase, eff.round,
                              "dropped", "partition")
            return
        if self.s.drop_probability > 0 and self.latency_rng.random() < self.s.drop_probability:
            self._log_message(now, src, eff.dst, eff.msg, eff.phase, eff.round,
                              "dropped", "loss")
            return
        delay = self.latency_rng.normal(self.s.latency_mean_us, self.s.latency_jitter_us)
        deliver_at = now + max(LATENCY_FLOOR_US, int(delay))
        self.queue.push(
            deliver_at,
            eff.dst,
            _MsgInFlight(src, eff.msg, eff.phase, eff.round,
                         getattr(eff.msg, "term", None), now),
        )

    def _apply(self, now: int, actor_id, effects) -> None:
        for eff in effects:
            if isinstance(eff, Send):
                self._send(now, actor_id, eff)
            elif isinstance(eff, Schedule):
                self.queue.push(eff.due_us, actor_id, TimerFired(eff.kind, eff.payload))

    # --------------------------------------------------------------- run

    def run(self) -> RunResult:
        now = 0
        for node in self.nodes_list:
            self._apply(now, node, self.actors[node].start(now))
        if self.client is not None:
            self._apply(now, self.client.name, self.client.start(now))
        for value, at_us in self.plan.crash:
            node = next(n for n in self.nodes_list if n.value == value)
            self.queue.push(at_us, "__sim__", _CrashEvt(node))
        if self.plan.rig_first_election and self.plan.tamper:
            # byzantine fast-timer: the tampering node jumps before the
            # honest timeout window opens, so it always takes the first
            # accountancy and the attack actually happens
            rigged_value = sorted(self.plan.tamper)[0]
            rigged = next(n for n in self.nodes_list if n.value == rigged_value)
            deadline = max(1_000, self.timing.election_min_us - 30_000)
            self.actors[rigged].election_deadline = deadline
            self.queue.push(deadline, rigged, TimerFired("election"))

        while len(self.queue):
            now, dst, event = self.queue.pop()
            if now > self.s.duration_us:
                break
            if dst == "__sim__":
                if isinstance(event, _Silence):
                    until = now + event.duration_us
                    self.down_until[event.node] = max(
                        self.down_until.get(event.node, 0), until
                    )
                    self.events.append({"time_us": now, "node": str(event.node),
                                        "kind": "dos_silence", "until_us": until})
                    self.queue.push(until, event.node, Recovered())
                elif isinstance(event, _CrashEvt):
                    self.down_until[event.node] = math.inf
                    self.events.append({"time_us": now, "node": str(event.node),
                                        "kind": "crash"})
                continue
            if isinstance(event, _MsgInFlight):
                if self._is_down(dst, now):
                    self._log_message(event.sent_us, event.src, dst, event.msg,
                                      event.phase, event.round, "dropped",
                                      "receiver_down")
                    continue
                self._log_message(event.sent_us, event.src, dst, event.msg,
                                  event.phase, event.round, "delivered", recv_us=now)
                actor = self.actors.get(dst)
                if actor is None:
                    continue
                self._apply(now, dst, actor.step(now, Delivery(event.src, event.msg)))
                continue
            if self._is_down(dst, now) and not isinstance(event, Recovered):
                continue
            actor = self.actors.get(dst)
            if actor is None:
                continue
            self._apply(now, dst, actor.step(now, event))

        return self._finish()

    # ------------------------------------------------------------- post-run

    def _honest_nodes(self) -> list:
        bad = self.plan.attack_values
        return [n for n in self.nodes_list if n.value not in bad]

    def _finish(self) -> RunResult:
        if "double_accountant" in self.s.inject:
            # checker self-test hook: forge a competing election result
            for e in list(self.events):
                if e["kind"] == "accountant_established":
                    other = next(
                        str(n) for n in self.nodes_list if str(n) != e["node"]
                    )
                    forged = dict(e)
                    forged["node"] = other
                    self.events.append(forged)
                    break

        report = metrics_mod.summarize(
            self.events, self.s.workload.total_requests or None
        )
        verdicts = assemble_verdicts(self.events) if self.s.algorithm == "rac" else ()
        ledger = settle_stakes(self.s, verdicts)
        violations = check_invariants(self.s, self.actors, self.events, self.registry)
        tampered = count_committed_tampered(
            self.s, self.actors, self.registry, self._honest_nodes()
        )
        chains = {
            n.value: self.actors[n].chain for n in self.nodes_list
        }
        commit_indexes = {n.value: self.actors[n].commit_index for n in self.nodes_list}
        rnl_final = {}
        for n in self.nodes_list:
            actor = self.actors[n]
            rnl = getattr(actor, "rnl", None)
            rnl_final[n.value] = (
                tuple(sorted(str(m) for m in rnl.nodes())) if rnl is not None else ()
            )
        return RunResult(
            scenario=self.s,
            events=self.events,
            metrics=report,
            verdicts=verdicts,
            chains=chains,
            commit_indexes=commit_indexes,
            rnl_final=rnl_final,
            ledger=ledger,
            violations=tuple(violations),
            registry=self.registry,
            elected=tuple(self.elected),
            committed_tampered=tampered,
        )


def run_scenario(scenario: Scenario) -> RunResult:
    return _Runner(scenario).run()


# ------------------------------------------------------- verdicts & stakes


def assemble_verdicts(events) -> tuple:
    """Reconstruct per-role behavior traces from the event log and run
    them through the role automata."""
    S = ActionSymbol
    decisions: dict = {}  # (term, block_num) -> (accountant, empty)
    accountant_of: dict = {}  # term -> node value (first established)
    evaluators_in: dict = {}  # term -> set of node values that judged
    flagged_by_term: dict = {}  # term -> set of node values
    appended: dict = {}  # (node value, term) -> True for non-accountant appends
    node_ids: dict = {}

    for e in events:
        kind = e["kind"]
        if kind == "block_decided":
            decisions[(e["term"], e["block_num"])] = (e["node"], e["empty"])
        elif kind == "accountant_established":
            accountant_of.setdefault(e["term"], e["node"])
        elif kind == "judgment":
            evaluators_in.setdefault(e["term"], set()).add(e["node"])
        elif kind == "risk_report":
            flagged_by_term.setdefault(e["term"], set()).update(e["flagged"])
        elif kind == "appended" and "term" in e:
            appended[(e["node"], e["term"])] = True

    def _nid(value: str) -> NodeId:
        if value not in node_ids:
            org = value.split("-")[0] if "-" in value else value
            node_ids[value] = NodeId(value, org)
        return node_ids[value]

    rows = []

    def _add(node_value, role, term, block_num, trace):
        record = BehaviorRecord(_nid(node_value), trace, role)
        result = classify(record)
        rows.append(
            {
                "node": node_value,
                "role": role.value,
                "term": term,
                "block_num": block_num if block_num is not None else "",
                "verdict": result.verdict.value,
                "criterion": result.criterion if result.criterion is not None else "",
                "violation": result.protocol_violation,
            }
        )

    for (term, block_num), (acct, empty) in sorted(decisions.items()):
        _add(
            acct,
            Role.ACCOUNTANT,
            term,
            block_num,
            (
                S.RECEIVE,
                S.GENERATE_NEW_BLOCK,
                S.BROADCAST,
                S.EMPTY_BLOCK if empty else S.VALID_BLOCK,
            ),
        )

    for e in events:
        if e["kind"] != "judgment":
            continue
        decided = decisions.get((e["term"], e["block_num"]))
        if decided is None:
            continue
        _, empty = decided
        agreed = e["verdict"] == (not empty)
        _add(
            e["node"],
            Role.EVALUATOR,
            e["term"],
            e["block_num"],
            (S.RECEIVE, S.VERIFY, S.SUCCESS if agreed else S.FAIL),
        )

    for (node_value, term) in sorted(appended):
        if accountant_of.get(term) == node_value:
            continue
        if node_value in evaluators_in.get(term, ()):
            continue
        if term + 1 not in flagged_by_term:
            continue  # no next-term assessment to complete the record
        abnormal = node_value in flagged_by_term[term + 1]
        _add(
            node_value,
            Role.FOLLOWER,
            term,
            None,
            (
                S.RECEIVE,
                S.ADDITION_NEW_BLOCK,
                S.SEND_SYSTEMCALL,
                S.ABNORMAL if abnormal else S.NORMAL,
            ),
        )

    return tuple(rows)


def settle_stakes(scenario: Scenario, verdicts) -> StakeLedger:
    """Every byzantine verdict costs the offender's org the configured
    fraction, split across orgs with no byzantine member."""
    orgs = [org for org, _ in scenario.orgs]
    ledger = StakeLedger({org: Fraction(100) for org in orgs})
    byz_rows = [r for r in verdicts if r["verdict"] == Verdict.BYZANTINE.value]
    byz_orgs = {r["node"].split("-")[0] for r in byz_rows}
    honest_orgs = [org for org in orgs if org not in byz_orgs]
    if not honest_orgs:
        return ledger
    for row in sorted(
        byz_rows, key=lambda r: (r["term"], r["block_num"] or -1, r["node"])
    ):
        value = row["node"]
        offender = NodeId(value, value.split("-")[0])
        try:
            ledger = apply_penalty(ledger, offender, honest_orgs, term=row["term"])
        except InsufficientStake:
            break
    return ledger


def count_committed_tampered(scenario, actors, registry, honest_nodes) -> int:
    """Committed entries whose payload differs from the client original,
    read off the furthest-committed honest chain."""
    best = None
    for n in honest_nodes:
        actor = actors[n]
        if best is None or actor.commit_index > actors[best].commit_index:
            best = n
    if best is None:
        return 0
    actor = actors[best]
    tampered = 0
    for num in range(1, actor.commit_index + 1):
        for entry in actor.chain.blocks[num].entries:
            original = registry.get(entry.request_id)
            if original is not None and original.payload != entry.payload:
                tampered += 1
    return tampered


# ------------------------------------------------------------- invariants


def check_invariants(scenario, actors, events, registry) -> list:
    violations: list = []
    by_term: dict = {}
    for e in events:
        if e["kind"] == "accountant_established":
            by_term.setdefault(e["term"], set()).add(e["node"])
    for term, who in sorted(by_term.items()):
        if len(who) > 1:
            violations.append(
                f"election_safety: term {term} established {sorted(who)}"
            )

    bad = scenario.faults.attack_values
    honest = sorted(n for n in actors if isinstance(n, NodeId) and n.value not in bad)
    for i, a in enumerate(honest):
        for b in honest[i + 1 :]:
            na, nb = actors[a], actors[b]
            upto = min(na.commit_index, nb.commit_index)
            if na.chain.blocks[: upto + 1] != nb.chain.blocks[: upto + 1]:
                violations.append(
                    f"log_safety: {a} and {b} disagree within committed prefix {upto}"
                )

    if scenario.algorithm == "rac":
        group_size = len(
            init_evaluator_group(
                org_nodes_of(scenario),
                scenario.evaluators_per_org,
                assets_of(scenario),
                RiskNodeList(),
            )
        )
        byz_evaluators = sum(
            1
            for value in bad
            if any(n.value == value for n in _initial_group_nodes(scenario))
        )
        for n in honest:
            actor = actors[n]
            for num in range(1, actor.commit_index + 1):
                block = actor.chain.blocks[num]
                if block.empty_flag:
                    continue
                cert = dict(actor.cert_by_num.get(num, ()))
                if cert:
                    fails = sum(1 for v in cert.values() if not v)
                    if fails >= strict_majority(max(len(cert), 1)):
                        violations.append(
                            f"certificate_consistency: {n} committed block {num} "
                            f"with a fail-majority certificate"
                        )
                        break
        if byz_evaluators < strict_majority(group_size):
            for n in honest:
                actor = actors[n]
                for num in range(1, actor.commit_index + 1):
                    for entry in actor.chain.blocks[num].entries:
                        original = registry.get(entry.request_id)
                        if original is not None and original.payload != entry.payload:
                            violations.append(
                                f"tamper_safety: {n} committed tampered entry "
                                f"{entry.request_id} in block {num}"
                            )
                            break
                    else:
                        continue
                    break
    return violations


def _initial_group_nodes(scenario: Scenario) -> tuple:
    return init_evaluator_group(
        org_nodes_of(scenario),
        scenario.evaluators_per_org,
        assets_of(scenario),
        RiskNodeList(),
    )
