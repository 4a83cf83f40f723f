"""Risk-aware consensus state machine.

Roles are follower, candidate, accountant, and evaluator. A term runs:

1. every node ships its previous-term syscall trace to the evaluator
   group;
2. evaluators score the traces and broadcast their risk-node list; a
   node adopts the version a strict majority of evaluators agree on;
3. a follower whose election deadline fires stands for accountant;
   voters hold their replies until they have the term's risk list (or a
   fallback deadline passes) and never vote for listed nodes;
4. the accountant batches client requests into blocks and asks the
   evaluator group for judgment;
5. evaluators compare entries against the copies clients sent them
   directly;
6. a fail-majority block is emptied before broadcast; observing an
   empty block makes every node (the accountant included) list the
   accountant and start a new term. Valid blocks replicate and commit
   at a strict majority of acks.

Nodes are single-writer state machines: `step` is the only entry point
and processes one event to completion, returning the outbound effects.
All randomness comes from an injected generator, all time from event
timestamps, so a run is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .core import (
    Block,
    Chain,
    NodeId,
    RiskNodeList,
    Role,
    Term,
    TransactionRequest,
    append_block,
    empty_copy,
    hash_block,
    make_block,
    merkle_root,
)
from .risk import DegenerateInput, RiskConfig, RiskReport, SyscallTrace


def strict_majority(n: int) -> int:
    return n // 2 + 1


class NotAccountant(Exception):
    pass


class SingleOrg(Exception):
    """Evaluator group rejected: every member would come from one org."""


class CertificateMismatch(Exception):
    """A block's empty_flag contradicts its own verdict certificate."""


# --------------------------------------------------------------- messages


@dataclass(frozen=True)
class RiskComputeMsg:
    term: Term
    node_id: NodeId
    system_call: SyscallTrace


@dataclass(frozen=True)
class RnlBroadcast:
    term: Term
    evaluator_id: NodeId
    rnl: RiskNodeList


@dataclass(frozen=True)
class RequestVoteMsg:
    term: Term
    candidate_id: NodeId


@dataclass(frozen=True)
class RequestVoteReply:
    term: Term
    voter_id: NodeId
    vote_granted: bool


@dataclass(frozen=True)
class JudgmentMsg:
    term: Term
    accountant_id: NodeId
    block: Block


@dataclass(frozen=True)
class JudgmentReply:
    term: Term
    evaluator_id: NodeId
    block_num: int
    block_digest: bytes
    success: bool


@dataclass(frozen=True)
class AppendEntriesMsg:
    term: Term
    accountant_id: NodeId
    block: Block
    verdict_certificate: tuple  # ((evaluator NodeId, success bool), ...)
    catch_up: bool = False


@dataclass(frozen=True)
class AppendEntriesReply:
    term: Term
    follower_id: NodeId
    success: bool
    head_block_num: int


@dataclass(frozen=True)
class HeartbeatMsg:
    term: Term
    accountant_id: NodeId
    commit_index: int


@dataclass(frozen=True)
class HeartbeatReply:
    term: Term
    follower_id: NodeId
    head_block_num: int


@dataclass(frozen=True)
class ClientRequestMsg:
    request: TransactionRequest


@dataclass(frozen=True)
class CommitNotice:
    term: Term
    accountant_id: NodeId
    request_id: str
    block_num: int
    evaluator_group: tuple


# ----------------------------------------------------------- events/effects


@dataclass(frozen=True)
class Delivery:
    src: object  # NodeId or client name
    msg: object


@dataclass(frozen=True)
class TimerFired:
    kind: str
    payload: object = None


@dataclass(frozen=True)
class Recovered:
    """Issued by the harness when a silenced node comes back."""


@dataclass(frozen=True)
class Send:
    dst: object
    msg: object
    phase: str
    round: Optional[int] = None  # block_num for block-pipeline phases


@dataclass(frozen=True)
class Schedule:
    due_us: int
    kind: str
    payload: object = None


# timer kinds
T_ELECTION = "election"
T_RNL_FALLBACK = "rnl_fallback"
T_HEARTBEAT = "heartbeat"
T_BATCH = "batch"
T_JUDGMENT = "judgment"
T_RECHECK = "judgment_recheck"
T_RISK_WINDOW = "risk_window"
T_ASSESS_DONE = "assess_done"

# message phase tags (metrics vocabulary)
PH_SELECTION = "selection"
PH_RNL = "rnl"
PH_BLOCK = "block_addition"
PH_JUDGMENT_REPLY = "judgment_reply"
PH_CONFIRMATION = "confirmation"
PH_HEARTBEAT = "heartbeat"
PH_CLIENT = "client"
PH_SYNC = "sync"


@dataclass(frozen=True)
class ProtocolTiming:
    election_min_us: int = 150_000
    election_max_us: int = 300_000
    heartbeat_us: int = 50_000
    batch_us: int = 10_000
    batch_max: int = 256
    judgment_grace_us: int = 14_000  # evaluator wait for late client copies
    judgment_timeout_us: int = 32_000  # accountant wait for verdicts
    rnl_wait_us: int = 21_000  # evaluator wait for straggler traces
    assess_delay_us: int = 0  # modeled compute time for scoring a term's traces
    catch_up_margin_us: int = 22_000  # lag older than this means a miss, not flight

    @classmethod
    def from_latency(
        cls, mean_us: int, jitter_us: int, assess_delay_us: int = 0
    ) -> "ProtocolTiming":
        # grace must cover the client-copy race; the verdict timeout must
        # cover a judgment round trip plus that grace
        grace = 2 * mean_us + 2 * jitter_us
        return cls(
            judgment_grace_us=grace,
            judgment_timeout_us=2 * (mean_us + jitter_us) + grace + 2 * jitter_us,
            rnl_wait_us=3 * (mean_us + jitter_us),
            assess_delay_us=assess_delay_us,
            catch_up_margin_us=2 * mean_us + 6 * jitter_us,
        )


@dataclass(frozen=True)
class NodeFaults:
    tamper: bool = False  # flip payload bytes when packaging blocks
    collude: bool = False  # invert judgment verdicts, suppress risk findings
    sybil: bool = False  # forge vote identities, emit attack syscalls

    @property
    def byzantine(self) -> bool:
        return self.tamper or self.collude or self.sybil


def init_evaluator_group(
    org_nodes: dict, per_org: int, assets: dict, rnl: RiskNodeList
) -> tuple:
    """Per org, the per_org highest-asset nodes outside the risk list.
    Ties go to the lower NodeId. An org whose nodes are all listed simply
    loses its seats; the group must still span at least two orgs."""
    chosen = []
    for org in sorted(org_nodes):
        eligible = [n for n in org_nodes[org] if n not in rnl]
        eligible.sort(key=lambda n: (-assets[n], n))
        chosen.extend(eligible[:per_org])
    if len({n.org for n in chosen}) < 2:
        raise SingleOrg("evaluator group must span at least two organizations")
    return tuple(sorted(chosen))


@dataclass
class Proposal:
    block: Block
    digest: bytes
    group: tuple  # evaluator group snapshot at packaging time
    verdicts: dict = field(default_factory=dict)  # evaluator -> bool
    decided: bool = False


class RacNode:
    """One consensus participant. Mutated only through step()."""

    def __init__(
        self,
        node_id: NodeId,
        membership,
        org_nodes: dict,
        assets: dict,
        evaluators_per_org: int,
        timing: ProtocolTiming,
        rng,
        recorder: Callable,
        trace_provider: Callable,  # (node, term) -> SyscallTrace
        assess_fn: Callable,  # (traces tuple, RiskConfig) -> RiskReport
        risk_config_for: Callable,  # term -> RiskConfig
        faults: NodeFaults = NodeFaults(),
    ) -> None:
        self.id = node_id
        self.membership = tuple(sorted(membership))
        self.peers = tuple(n for n in self.membership if n != node_id)
        self.org_nodes = org_nodes
        self.assets = dict(assets)
        self.per_org = evaluators_per_org
        self.timing = timing
        self.rng = rng
        self.record = recorder
        self.trace_provider = trace_provider
        self.assess_fn = assess_fn
        self.risk_config_for = risk_config_for
        self.faults = faults

        self.term: Term = 0
        self.voted_for: Optional[NodeId] = None
        self.is_candidate = False
        self.is_accountant = False
        self.chain = Chain()
        self.commit_index = 0
        self.rnl = RiskNodeList()
        self.group = init_evaluator_group(org_nodes, evaluators_per_org, assets, self.rnl)
        self.known_accountant: Optional[NodeId] = None
        self.election_deadline = 0

        # evaluator state
        self.pending_requests: dict = {}  # request_id -> TransactionRequest
        self.term_traces: dict = {}  # node -> SyscallTrace, current term
        self.risk_done = False
        self.judged_head = (self.chain.head_num, hash_block(self.chain.last))
        self.deferred_judgments: dict = {}  # digest -> (accountant, block)

        # vote state
        self.votes: set = set()
        self.rnl_adopted_term: Term = 0
        self.rnl_votes: dict = {}  # evaluator -> RiskNodeList, current term
        self.pending_vote_reqs: list = []  # (candidate, term) awaiting the risk list

        # accountant state
        self.batch: list = []
        self.forward_buffer: dict = {}  # request_id -> TransactionRequest
        self.proposals: dict = {}  # digest -> Proposal
        self.next_proposal_num = 0
        self.next_proposal_prehash = b""
        self.pending_decisions: dict = {}  # block_num -> (block, certificate)
        self.next_broadcast_num = 0
        self.created_max = 0
        self.heads: dict = {}
        self.cert_by_num: dict = {}
        self.block_sent_at: dict = {}  # block_num -> first broadcast time
        self.catch_up_ok_us: dict = {}  # peer -> next time a resend batch may go out
        self.ae_backlog: dict = {}  # block_num -> (src, msg) held out-of-order appends
        self.trace_submitted_term: Term = -1
        self.seen_requests: set = set()

    # ------------------------------------------------------------- helpers

    @property
    def is_evaluator(self) -> bool:
        return self.id in self.group

    @property
    def role(self) -> Role:
        if self.is_accountant:
            return Role.ACCOUNTANT
        if self.is_candidate:
            return Role.CANDIDATE
        if self.is_evaluator:
            return Role.EVALUATOR
        return Role.FOLLOWER

    def _draw_deadline(self, now: int) -> int:
        span = self.timing.election_max_us - self.timing.election_min_us
        return now + self.timing.election_min_us + int(self.rng.integers(span + 1))

    def _arm_election(self, now: int, out: list) -> None:
        self.election_deadline = self._draw_deadline(now)
        out.append(Schedule(self.election_deadline, T_ELECTION))

    def _recompute_group(self) -> None:
        try:
            self.group = init_evaluator_group(
                self.org_nodes, self.per_org, self.assets, self.rnl
            )
        except (SingleOrg, ValueError):
            pass  # no eligible replacement; keep the previous group

    def _add_to_rnl(self, node: NodeId, term: Term, reason: str, now: int, out: list) -> None:
        if node in self.rnl:
            return
        self.rnl = self.rnl.add(node, term)
        self.record(now, self.id, "rnl_add", listed=str(node), term=term, reason=reason)
        was_evaluator = self.is_evaluator
        self._recompute_group()
        if not was_evaluator and self.is_evaluator:
            # newly drafted into the group mid-term
            self.judged_head = (self.chain.head_num, hash_block(self.chain.last))

    # ---------------------------------------------------------------- step

    def step(self, now: int, event) -> list:
        out: list = []
        if isinstance(event, Delivery):
            self._on_message(now, event.src, event.msg, out)
        elif isinstance(event, TimerFired):
            self._on_timer(now, event, out)
        elif isinstance(event, Recovered):
            self._on_recovered(now, out)
        return out

    def start(self, now: int) -> list:
        """Initial timers; term-0 traces feed the first election's assessment."""
        out: list = []
        self._arm_election(now, out)
        return out

    def _on_recovered(self, now: int, out: list) -> None:
        self.is_candidate = False
        self.is_accountant = False
        self._arm_election(now, out)

    def _on_timer(self, now: int, event: TimerFired, out: list) -> None:
        if event.kind == T_ELECTION:
            if now >= self.election_deadline and not self.is_accountant:
                self.on_election_timeout(now, out)
        elif event.kind == T_RNL_FALLBACK:
            if event.payload == self.term and self.rnl_adopted_term < self.term:
                self._flush_pending_votes(now, out)
        elif event.kind == T_HEARTBEAT:
            if self.is_accountant:
                self._send_heartbeats(now, out)
                out.append(Schedule(now + self.timing.heartbeat_us, T_HEARTBEAT))
        elif event.kind == T_BATCH:
            if self.is_accountant:
                if self.batch:
                    self.package_block(now, out)
                out.append(Schedule(now + self.timing.batch_us, T_BATCH))
        elif event.kind == T_JUDGMENT:
            prop = self.proposals.get(event.payload)
            if prop is not None and not prop.decided and self.is_accountant:
                self.decide_validity(now, prop, out)
        elif event.kind == T_RECHECK:
            entry = self.deferred_judgments.pop(event.payload, None)
            if entry is not None and self.is_evaluator:
                accountant, block = entry
                self._judge(now, accountant, block, out, final=True)
        elif event.kind == T_RISK_WINDOW:
            if event.payload == self.term and not self.risk_done and self.is_evaluator:
                self.handle_risk_compute(now, out)
        elif event.kind == T_ASSESS_DONE:
            if event.payload == self.term and self.is_evaluator:
                self._finish_risk_compute(now, out)

    def _on_message(self, now: int, src, msg, out: list) -> None:
        term = getattr(msg, "term", None)
        if term is not None and term > self.term:
            accountant = None
            if isinstance(msg, (AppendEntriesMsg, HeartbeatMsg)):
                accountant = msg.accountant_id
            if isinstance(src, NodeId) and src in self.rnl and accountant is None:
                return  # listed nodes cannot push the cluster forward
            self.enter_term(now, term, out, accountant=accountant)

        if isinstance(msg, ClientRequestMsg):
            self._on_client_request(now, msg.request, out)
        elif isinstance(msg, RiskComputeMsg):
            self._on_trace(now, src, msg, out)
        elif isinstance(msg, RnlBroadcast):
            self._on_rnl_broadcast(now, src, msg, out)
        elif isinstance(msg, RequestVoteMsg):
            self.handle_request_vote(now, src, msg, out)
        elif isinstance(msg, RequestVoteReply):
            self._on_vote_reply(now, src, msg, out)
        elif isinstance(msg, JudgmentMsg):
            self.handle_judgment(now, src, msg, out)
        elif isinstance(msg, JudgmentReply):
            self._on_judgment_reply(now, src, msg, out)
        elif isinstance(msg, AppendEntriesMsg):
            self.handle_append_entries(now, src, msg, out)
        elif isinstance(msg, AppendEntriesReply):
            self._on_append_reply(now, src, msg, out)
        elif isinstance(msg, HeartbeatMsg):
            self._on_heartbeat(now, src, msg, out)
        elif isinstance(msg, HeartbeatReply):
            self._on_head_report(now, src, msg.head_block_num, out)
        # unknown messages are ignored

    # ------------------------------------------------------- term machinery

    def enter_term(self, now: int, term: Term, out: list, accountant=None) -> None:
        if term < self.term:
            return
        new = term > self.term
        self.term = term
        if new:
            self.voted_for = None
            self.is_candidate = False
            if self.is_accountant:
                # step down; unproposed requests go back to the buffer
                for req in self.batch:
                    self.forward_buffer.setdefault(req.request_id, req)
                self.batch = []
                self.is_accountant = False
            self.proposals.clear()
            self.pending_decisions.clear()
            self.votes = set()
            self.known_accountant = None
            self.term_traces = {}
            self.risk_done = False
            self.rnl_votes = {}
            self.pending_vote_reqs = []
            self.judged_head = (self.chain.head_num, hash_block(self.chain.last))
            self.deferred_judgments.clear()
            self._arm_election(now, out)
            self.submit_syscalls(now, out)
        if accountant is not None and accountant not in self.rnl:
            self.known_accountant = accountant
            self._flush_forward_buffer(now, out)

    def submit_syscalls(self, now: int, out: list) -> None:
        """Phase 1: ship the previous term's trace to the evaluator group."""
        if self.trace_submitted_term >= self.term:
            return
        self.trace_submitted_term = self.term
        trace = self.trace_provider(self.id, self.term - 1)
        msg = RiskComputeMsg(self.term, self.id, trace)
        for ev in self.group:
            if ev == self.id:
                continue
            out.append(Send(ev, msg, PH_SELECTION))
        if self.is_evaluator:
            self._store_trace(now, self.id, trace, out)

    def _on_trace(self, now: int, src, msg: RiskComputeMsg, out: list) -> None:
        if not self.is_evaluator or msg.term != self.term or self.risk_done:
            return
        self._store_trace(now, msg.node_id, msg.system_call, out)

    def _store_trace(self, now: int, node: NodeId, trace: SyscallTrace, out: list) -> None:
        first = not self.term_traces
        self.term_traces[node] = trace
        if first:
            out.append(Schedule(now + self.timing.rnl_wait_us, T_RISK_WINDOW, self.term))
        if len(self.term_traces) == len(self.membership):
            self.handle_risk_compute(now, out)

    def handle_risk_compute(self, now: int, out: list) -> None:
        """Phase 2: score collected traces, broadcast the resulting list."""
        if self.risk_done or not self.is_evaluator:
            return
        self.risk_done = True
        if self.timing.assess_delay_us > 0:
            # scoring a full term of traces is not free; elections stay
            # open until the fresh list lands
            out.append(Schedule(now + self.timing.assess_delay_us, T_ASSESS_DONE, self.term))
            return
        self._finish_risk_compute(now, out)

    def _finish_risk_compute(self, now: int, out: list) -> None:
        proposal = self.rnl
        if not self.faults.collude:  # colluders suppress new findings
            try:
                report = self.assess_fn(
                    tuple(sorted(self.term_traces.values(), key=lambda t: t.node)),
                    self.risk_config_for(self.term),
                )
                for node in sorted(report.flagged):
                    proposal = proposal.add(node, self.term)
                self.record(
                    now,
                    self.id,
                    "risk_report",
                    term=self.term,
                    flagged=sorted(str(n) for n in report.flagged),
                    assumption_violated=report.assumption_violated,
                )
            except DegenerateInput:
                self.record(now, self.id, "risk_degenerate", term=self.term)
        msg = RnlBroadcast(self.term, self.id, proposal)
        for peer in self.peers:
            out.append(Send(peer, msg, PH_RNL))
        self._on_rnl_broadcast(now, self.id, msg, out)

    def _on_rnl_broadcast(self, now: int, src, msg: RnlBroadcast, out: list) -> None:
        if msg.term != self.term or self.rnl_adopted_term >= self.term:
            return
        if src not in self.group:
            return
        self.rnl_votes[src] = msg.rnl
        needed = strict_majority(len(self.group))
        tally: dict = {}
        for rnl in self.rnl_votes.values():
            tally[rnl] = tally.get(rnl, 0) + 1
        for rnl, count in tally.items():
            if count >= needed:
                self.adopt_rnl(now, rnl, out)
                return

    def adopt_rnl(self, now: int, rnl: RiskNodeList, out: list) -> None:
        self.rnl_adopted_term = self.term
        merged = self.rnl.merge(rnl)
        if merged != self.rnl:
            was_evaluator = self.is_evaluator
            self.rnl = merged
            self._recompute_group()
            if not was_evaluator and self.is_evaluator:
                self.judged_head = (self.chain.head_num, hash_block(self.chain.last))
        self.record(
            now,
            self.id,
            "rnl_adopted",
            term=self.term,
            members=sorted(str(n) for n in self.rnl.nodes()),
        )
        if self.id in self.rnl and (self.is_candidate or self.is_accountant):
            self.is_candidate = False
            self.is_accountant = False
        self._flush_pending_votes(now, out)

    # ------------------------------------------------------------ elections

    def on_election_timeout(self, now: int, out: list) -> None:
        """Phase 3: stand for accountant (unless barred)."""
        if self.is_evaluator or self.id in self.rnl:
            self._arm_election(now, out)
            self.submit_syscalls(now, out)
            return
        self.enter_term(now, self.term + 1, out)
        self.is_candidate = True
        self.voted_for = self.id
        self.votes = {self.id}
        self.record(now, self.id, "candidacy", term=self.term)
        msg = RequestVoteMsg(self.term, self.id)
        for peer in self.peers:
            out.append(Send(peer, msg, PH_SELECTION))

    def handle_request_vote(self, now: int, src, msg: RequestVoteMsg, out: list) -> None:
        if self.faults.byzantine and msg.candidate_id != self.id:
            out.extend(self._byzantine_vote_response(now, src, msg))
            return
        if msg.term < self.term:
            out.append(Send(src, RequestVoteReply(self.term, self.id, False), PH_SELECTION))
            return
        if self.rnl_adopted_term < self.term and msg.candidate_id not in self.rnl:
            # wait for this term's risk list before judging the candidate
            self.pending_vote_reqs.append((src, msg))
            wait = self.timing.rnl_wait_us + self.timing.assess_delay_us
            out.append(Schedule(now + wait, T_RNL_FALLBACK, self.term))
            return
        self._reply_vote(now, src, msg, out)

    def _reply_vote(self, now: int, src, msg: RequestVoteMsg, out: list) -> None:
        grant = (
            msg.term == self.term
            and msg.candidate_id not in self.rnl
            and self.voted_for in (None, msg.candidate_id)
            and not self.is_accountant
        )
        if grant:
            self.voted_for = msg.candidate_id
            self._arm_election(now, out)
        out.append(Send(src, RequestVoteReply(self.term, self.id, grant), PH_SELECTION))

    def _flush_pending_votes(self, now: int, out: list) -> None:
        pending, self.pending_vote_reqs = self.pending_vote_reqs, []
        for src, msg in pending:
            if msg.term == self.term:
                self._reply_vote(now, src, msg, out)

    def _byzantine_vote_response(self, now: int, src, msg: RequestVoteMsg) -> list:
        """Deny the vote; sybil nodes pad the wire with forged identities."""
        out = [Send(src, RequestVoteReply(self.term, self.id, False), PH_SELECTION)]
        if self.faults.sybil:
            for i in range(2):
                ghost = NodeId(f"{self.id.value}!ghost{i}", self.id.org)
                out.append(
                    Send(src, RequestVoteReply(self.term, ghost, True), PH_SELECTION)
                )
        return out

    def _on_vote_reply(self, now: int, src, msg: RequestVoteReply, out: list) -> None:
        if not self.is_candidate or msg.term != self.term or not msg.vote_granted:
            return
        if src not in self.membership or msg.voter_id != src:
            return  # forged identity: transport sender is authoritative
        self.votes.add(src)
        if len(self.votes) >= strict_majority(len(self.membership)):
            self.become_accountant(now, out)

    def become_accountant(self, now: int, out: list) -> None:
        self.is_candidate = False
        self.is_accountant = True
        self.known_accountant = self.id
        self.heads = {self.id: self.chain.head_num}
        self.created_max = 0
        self.next_proposal_num = self.chain.head_num + 1
        self.next_proposal_prehash = hash_block(self.chain.last)
        self.next_broadcast_num = self.chain.head_num + 1
        self.record(now, self.id, "accountant_established", term=self.term)
        self._send_heartbeats(now, out)
        out.append(Schedule(now + self.timing.heartbeat_us, T_HEARTBEAT))
        out.append(Schedule(now + self.timing.batch_us, T_BATCH))
        self._flush_forward_buffer(now, out)

    def _send_heartbeats(self, now: int, out: list) -> None:
        msg = HeartbeatMsg(self.term, self.id, self.commit_index)
        for peer in self.peers:
            out.append(Send(peer, msg, PH_HEARTBEAT))

    def _on_heartbeat(self, now: int, src, msg: HeartbeatMsg, out: list) -> None:
        if msg.term < self.term or src in self.rnl:
            return
        if msg.accountant_id != self.id:
            self.is_candidate = False
            self.is_accountant = False
        self.known_accountant = msg.accountant_id
        self._arm_election(now, out)
        self.commit_index = max(self.commit_index, min(msg.commit_index, self.chain.head_num))
        self._flush_forward_buffer(now, out)
        out.append(
            Send(src, HeartbeatReply(self.term, self.id, self.chain.head_num), PH_HEARTBEAT)
        )

    # ------------------------------------------------------- client requests

    def _on_client_request(self, now: int, req: TransactionRequest, out: list) -> None:
        if self.is_evaluator:
            self.pending_requests.setdefault(req.request_id, req)
        if self.is_accountant:
            if req.request_id not in self.seen_requests:
                self.seen_requests.add(req.request_id)
                self.batch.append(req)
        else:
            self.forward_buffer.setdefault(req.request_id, req)
            self._flush_forward_buffer(now, out)

    def _flush_forward_buffer(self, now: int, out: list) -> None:
        if self.is_accountant:
            for req in self.forward_buffer.values():
                if req.request_id not in self.seen_requests:
                    self.seen_requests.add(req.request_id)
                    self.batch.append(req)
            self.forward_buffer.clear()
        elif self.known_accountant is not None and self.forward_buffer:
            for req in self.forward_buffer.values():
                out.append(Send(self.known_accountant, ClientRequestMsg(req), PH_CLIENT))
            self.forward_buffer.clear()

    # ------------------------------------------------------- block pipeline

    def package_block(self, now: int, out: list) -> Block:
        """Phase 4: batch pending requests into the next block and ask the
        evaluator group for judgment."""
        if not self.is_accountant:
            raise NotAccountant(str(self.id))
        if not self.batch:
            raise ValueError("refusing to propose an empty block")
        entries = tuple(self.batch[: self.timing.batch_max])
        self.batch = self.batch[self.timing.batch_max :]
        if self.faults.tamper:
            entries = tuple(self._tamper(e) for e in entries)
            self.record(now, self.id, "tamper", block_num=self.next_proposal_num)
        block = make_block(self.next_proposal_num, self.next_proposal_prehash, now, entries)
        digest = hash_block(block)
        self.next_proposal_num += 1
        self.next_proposal_prehash = digest
        prop = Proposal(block=block, digest=digest, group=self.group)
        self.proposals[digest] = prop
        self.record(now, self.id, "packaged", term=self.term, block_num=block.block_num,
                    entries=len(entries))
        msg = JudgmentMsg(self.term, self.id, block)
        for ev in prop.group:
            out.append(Send(ev, msg, PH_BLOCK, round=block.block_num))
        out.append(Schedule(now + self.timing.judgment_timeout_us, T_JUDGMENT, digest))
        return block

    @staticmethod
    def _tamper(req: TransactionRequest) -> TransactionRequest:
        payload = bytes([req.payload[0] ^ 0x01]) + req.payload[1:]
        return replace(req, payload=payload)

    def handle_judgment(self, now: int, src, msg: JudgmentMsg, out: list) -> None:
        """Phase 5: verify the proposed block against client originals."""
        if not self.is_evaluator or msg.term != self.term:
            return
        if self.known_accountant is None and src not in self.rnl:
            self.known_accountant = msg.accountant_id
        self._judge(now, src, msg.block, out, final=False)

    def _judge(self, now: int, accountant, block: Block, out: list, final: bool) -> None:
        num, digest = self.judged_head
        ahead = block.block_num > num + 1  # gap: this judge is behind, not the block wrong
        ok = (
            block.block_num == num + 1
            and block.prehash == digest
            and not block.empty_flag
            and block.merkle_root == merkle_root(block.entries)
        )
        unknown = False
        if ok:
            for entry in block.entries:
                copy = self.pending_requests.get(entry.request_id)
                if copy is None:
                    unknown = True
                elif copy.payload != entry.payload or copy.client_id != entry.client_id:
                    ok = False
                    break
        if (ok and unknown) or ahead:
            if not final:
                # the client copy (or the predecessor block) may still be
                # in flight; look again shortly
                key = hash_block(block)
                if key not in self.deferred_judgments:
                    self.deferred_judgments[key] = (accountant, block)
                    out.append(Schedule(now + self.timing.judgment_grace_us, T_RECHECK, key))
                return
            # nothing provably wrong, just missing context to check it
            # (typical for an evaluator drafted mid-flight): abstain and
            # let the accountant's timeout rule count the silence
            return
        verdict = ok and not unknown
        if verdict:
            self.judged_head = (block.block_num, hash_block(block))
        reply_verdict = (not verdict) if self.faults.collude else verdict
        self.record(now, self.id, "judgment", term=self.term, block_num=block.block_num,
                    verdict=reply_verdict)
        out.append(
            Send(
                accountant,
                JudgmentReply(self.term, self.id, block.block_num, hash_block(block), reply_verdict),
                PH_JUDGMENT_REPLY,
                round=block.block_num,
            )
        )

    def _on_judgment_reply(self, now: int, src, msg: JudgmentReply, out: list) -> None:
        prop = self.proposals.get(msg.block_digest)
        if prop is None or prop.decided or not self.is_accountant or msg.term != self.term:
            return
        if src in prop.group:
            prop.verdicts[src] = msg.success
        if len(prop.verdicts) == len(prop.group):
            self.decide_validity(now, prop, out)

    def decide_validity(self, now: int, prop: Proposal, out: list) -> None:
        """Phase 6: empty the block on a fail-majority (absent verdicts count
        as fail), then broadcast in block order."""
        prop.decided = True
        fails = sum(1 for v in prop.verdicts.values() if not v)
        fails += len(prop.group) - len(prop.verdicts)
        emptied = fails >= strict_majority(len(prop.group))
        block = empty_copy(prop.block) if emptied else prop.block
        certificate = tuple(sorted(prop.verdicts.items()))
        self.record(now, self.id, "block_decided", term=self.term,
                    block_num=block.block_num, empty=emptied, fails=fails,
                    group_size=len(prop.group))
        self.pending_decisions[block.block_num] = (block, certificate)
        self._flush_decisions(now, out)

    def _flush_decisions(self, now: int, out: list) -> None:
        while self.next_broadcast_num in self.pending_decisions:
            block, certificate = self.pending_decisions.pop(self.next_broadcast_num)
            self.next_broadcast_num += 1
            self.chain = append_block(self.chain, block)
            self.cert_by_num[block.block_num] = certificate
            self.created_max = block.block_num
            self.heads[self.id] = self.chain.head_num
            self.record(now, self.id, "appended", block_num=block.block_num,
                        empty=block.empty_flag, term=self.term)
            msg = AppendEntriesMsg(self.term, self.id, block, certificate)
            self.block_sent_at[block.block_num] = now
            for peer in self.peers:
                out.append(Send(peer, msg, PH_BLOCK, round=block.block_num))
            if block.empty_flag:
                # the cluster will now list me; apply the same rule locally
                self._add_to_rnl(self.id, self.term, "empty_block", now, out)
                self.record(now, self.id, "empty_observed", accountant=str(self.id),
                            term=self.term, block_num=block.block_num)
                self.enter_term(now, self.term + 1, out)
                return
            self._advance_commit(now, out)

    # ---------------------------------------------------------- replication

    def handle_append_entries(self, now: int, src, msg: AppendEntriesMsg, out: list) -> None:
        # A stale term does not void the block itself: the accountant's
        # own broadcast can race the term bump that follows an empty
        # block, and rejecting it would leave a permanent hole in the
        # chain. Stale copies are appended like catch-up traffic; only
        # leadership bookkeeping is withheld.
        stale = msg.term < self.term
        if src in self.rnl or src != msg.accountant_id:
            out.append(Send(src, AppendEntriesReply(self.term, self.id, False,
                                                    self.chain.head_num), PH_CONFIRMATION))
            return
        if not stale:
            if msg.accountant_id != self.id:
                self.is_candidate = False
                self.is_accountant = False
            self.known_accountant = msg.accountant_id
            self._arm_election(now, out)

        block = msg.block
        num = block.block_num
        if num <= self.chain.head_num:
            same = hash_block(self.chain.blocks[num]) == hash_block(block)
            if not same and num > self.commit_index:
                # uncommitted divergence: adopt the accountant's version
                prefix = self.chain.blocks[:num]
                if block.prehash == hash_block(prefix[-1]):
                    self.chain = Chain(prefix + (block,))
                    self.cert_by_num[num] = msg.verdict_certificate
                    same = True
            reply = AppendEntriesReply(self.term, self.id, same, self.chain.head_num)
            out.append(Send(src, reply, PH_CONFIRMATION, round=num))
            return
        if num > self.chain.head_num + 1:
            # overtook its predecessor in flight: hold it silently and
            # apply it once the gap fills; real loss still surfaces as a
            # lagging head report and gets repaired by catch-up traffic
            if num <= self.chain.head_num + 16 and len(self.ae_backlog) < 16:
                self.ae_backlog.setdefault(num, (src, msg))
            return
        if block.prehash != hash_block(self.chain.last):
            out.append(Send(src, AppendEntriesReply(self.term, self.id, False,
                                                    self.chain.head_num),
                            PH_CONFIRMATION, round=num))
            return

        # Certificates on first-hand broadcasts are checked even when the
        # term already moved on: the group cannot have rotated inside a
        # one-term race, so the cert is still measurable against it.
        # Catch-up replays may be arbitrarily old and are exempt.
        if not msg.catch_up:
            try:
                self._check_certificate(block, msg.verdict_certificate)
            except CertificateMismatch:
                self.record(now, self.id, "certificate_mismatch", term=self.term,
                            block_num=num, accountant=str(src))
                self._add_to_rnl(src, self.term, "certificate_mismatch", now, out)
                out.append(Send(src, AppendEntriesReply(self.term, self.id, False,
                                                        self.chain.head_num),
                                PH_CONFIRMATION, round=num))
                if not stale:
                    self.enter_term(now, self.term + 1, out)
                return

        self.chain = append_block(self.chain, block)
        self.cert_by_num[num] = msg.verdict_certificate
        self.record(now, self.id, "appended", block_num=num, empty=block.empty_flag,
                    term=self.term)
        if not msg.catch_up:
            self._punish_verdict_minority(now, msg.verdict_certificate,
                                          block.empty_flag, out)
        if self.is_evaluator:
            for entry in block.entries:
                self.pending_requests.pop(entry.request_id, None)
            if self.judged_head[0] < num:
                self.judged_head = (num, hash_block(block))
        out.append(Send(src, AppendEntriesReply(self.term, self.id, True,
                                                self.chain.head_num),
                        PH_CONFIRMATION, round=num))
        if block.empty_flag and not msg.catch_up:
            # a non-catch-up broadcast always comes from the block's own
            # creator, so the blame holds even if the term moved on;
            # catch-up replays carry no blame for the node relaying them
            self.record(now, self.id, "empty_observed", accountant=str(src),
                        term=self.term, block_num=num)
            self._add_to_rnl(src, self.term, "empty_block", now, out)
            if not stale:
                self.enter_term(now, self.term + 1, out)
        if self.ae_backlog:
            for k in [k for k in self.ae_backlog if k <= self.chain.head_num]:
                del self.ae_backlog[k]
            held = self.ae_backlog.pop(self.chain.head_num + 1, None)
            if held is not None:
                self.handle_append_entries(now, held[0], held[1], out)

    def _check_certificate(self, block: Block, certificate) -> None:
        """The accountant's own certificate must justify the empty flag.
        Group members missing from it count as fails, mirroring the
        accountant's timeout rule."""
        verdicts = dict(certificate)
        fails = sum(1 for ev in self.group if not verdicts.get(ev, False))
        should_be_empty = fails >= strict_majority(len(self.group))
        if should_be_empty != block.empty_flag:
            raise CertificateMismatch(f"block {block.block_num}")

    def _punish_verdict_minority(self, now: int, certificate, emptied: bool, out: list) -> None:
        for evaluator, verdict in certificate:
            if verdict == emptied and evaluator in self.group:
                # judged against the majority outcome
                self._add_to_rnl(evaluator, self.term, "verdict_minority", now, out)

    def _on_append_reply(self, now: int, src, msg: AppendEntriesReply, out: list) -> None:
        if not self.is_accountant or msg.term != self.term:
            return
        self._on_head_report(now, src, msg.head_block_num, out)

    def _on_head_report(self, now: int, src, head: int, out: list) -> None:
        if not self.is_accountant:
            return
        self.heads[src] = max(self.heads.get(src, 0), head)
        # Resend only blocks whose broadcast predates the report by more
        # than a round trip; younger ones are still in flight, and a lag
        # report racing the pipeline is normal, not a miss.
        if head < self.chain.head_num and now >= self.catch_up_ok_us.get(src, 0):
            sent_any = False
            for num in range(head + 1, min(head + 1 + 8, self.chain.head_num + 1)):
                if now - self.block_sent_at.get(num, 0) < self.timing.catch_up_margin_us:
                    break  # later blocks are younger still
                msg = AppendEntriesMsg(self.term, self.id, self.chain.blocks[num],
                                       self.cert_by_num.get(num, ()), catch_up=True)
                out.append(Send(src, msg, PH_SYNC, round=num))
                sent_any = True
            if sent_any:
                self.catch_up_ok_us[src] = now + self.timing.catch_up_margin_us
        self._advance_commit(now, out)

    def _advance_commit(self, now: int, out: list) -> None:
        """Commit the highest block replicated on a strict majority, gated
        to blocks created in this term (older tails commit transitively)."""
        if not self.is_accountant or not self.created_max:
            return
        heads = [self.heads.get(n, 0) for n in self.membership]
        heads.sort(reverse=True)
        majority_head = heads[strict_majority(len(self.membership)) - 1]
        target = min(majority_head, self.created_max)
        while self.commit_index < target:
            self.commit_index += 1
            block = self.chain.blocks[self.commit_index]
            self.record(now, self.id, "block_committed", term=self.term,
                        block_num=block.block_num, entries=len(block.entries))
            for entry in block.entries:
                self.record(now, self.id, "commit", request_id=entry.request_id,
                            block_num=block.block_num)
                notice = CommitNotice(self.term, self.id, entry.request_id,
                                      block.block_num, self.group)
                out.append(Send(entry.client_id, notice, PH_CLIENT))
