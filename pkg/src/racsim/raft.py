"""Plain leader-based replication baseline.

Same timers, batching, transport, and block format as the risk-aware
protocol, but no evaluator group, no judgment round, and no risk list:
the leader packages a batch and replicates it directly. A tampering
leader therefore commits tampered entries, which is the contrast the
baseline exists to show.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

from .core import Chain, NodeId, Term, TransactionRequest, append_block, hash_block, make_block
from .protocol import (
    PH_BLOCK,
    PH_CLIENT,
    PH_CONFIRMATION,
    PH_HEARTBEAT,
    PH_SELECTION,
    PH_SYNC,
    T_BATCH,
    T_ELECTION,
    T_HEARTBEAT,
    AppendEntriesMsg,
    AppendEntriesReply,
    ClientRequestMsg,
    CommitNotice,
    Delivery,
    HeartbeatMsg,
    HeartbeatReply,
    NodeFaults,
    ProtocolTiming,
    Recovered,
    RequestVoteMsg,
    RequestVoteReply,
    Schedule,
    Send,
    TimerFired,
    strict_majority,
)


class RaftNode:
    """Baseline participant: follower, candidate, or leader."""

    def __init__(
        self,
        node_id: NodeId,
        membership,
        timing: ProtocolTiming,
        rng,
        recorder,
        faults: NodeFaults = NodeFaults(),
    ) -> None:
        self.id = node_id
        self.membership = tuple(sorted(membership))
        self.peers = tuple(n for n in self.membership if n != node_id)
        self.timing = timing
        self.rng = rng
        self.record = recorder
        self.faults = faults

        self.term: Term = 0
        self.voted_for: Optional[NodeId] = None
        self.is_candidate = False
        self.is_leader = False
        self.chain = Chain()
        self.commit_index = 0
        self.known_leader: Optional[NodeId] = None
        self.election_deadline = 0
        self.votes: set = set()

        self.batch: list = []
        self.forward_buffer: dict = {}
        self.seen_requests: set = set()
        self.created_max = 0
        self.heads: dict = {}
        self.block_sent_at: dict = {}
        self.catch_up_ok_us: dict = {}
        self.ae_backlog: dict = {}  # block_num -> (src, msg) held out-of-order appends

    def _arm_election(self, now: int, out: list) -> None:
        span = self.timing.election_max_us - self.timing.election_min_us
        self.election_deadline = now + self.timing.election_min_us + int(
            self.rng.integers(span + 1)
        )
        out.append(Schedule(self.election_deadline, T_ELECTION))

    def start(self, now: int) -> list:
        out: list = []
        self._arm_election(now, out)
        return out

    def step(self, now: int, event) -> list:
        out: list = []
        if isinstance(event, Delivery):
            self._on_message(now, event.src, event.msg, out)
        elif isinstance(event, TimerFired):
            self._on_timer(now, event, out)
        elif isinstance(event, Recovered):
            self.is_candidate = False
            self.is_leader = False
            self._arm_election(now, out)
        return out

    def _on_timer(self, now: int, event: TimerFired, out: list) -> None:
        if event.kind == T_ELECTION:
            if now >= self.election_deadline and not self.is_leader:
                self._start_candidacy(now, out)
        elif event.kind == T_HEARTBEAT:
            if self.is_leader:
                msg = HeartbeatMsg(self.term, self.id, self.commit_index)
                for peer in self.peers:
                    out.append(Send(peer, msg, PH_HEARTBEAT))
                out.append(Schedule(now + self.timing.heartbeat_us, T_HEARTBEAT))
        elif event.kind == T_BATCH:
            if self.is_leader:
                if self.batch:
                    self._package(now, out)
                out.append(Schedule(now + self.timing.batch_us, T_BATCH))

    def _on_message(self, now: int, src, msg, out: list) -> None:
        term = getattr(msg, "term", None)
        if term is not None and term > self.term:
            leader = msg.accountant_id if isinstance(msg, (AppendEntriesMsg, HeartbeatMsg)) else None
            self._enter_term(now, term, out, leader=leader)

        if isinstance(msg, ClientRequestMsg):
            self._on_client_request(now, msg.request, out)
        elif isinstance(msg, RequestVoteMsg):
            self._on_request_vote(now, src, msg, out)
        elif isinstance(msg, RequestVoteReply):
            self._on_vote_reply(now, src, msg, out)
        elif isinstance(msg, AppendEntriesMsg):
            self._on_append_entries(now, src, msg, out)
        elif isinstance(msg, AppendEntriesReply):
            if self.is_leader and msg.term == self.term:
                self._on_head_report(now, src, msg.head_block_num, out)
        elif isinstance(msg, HeartbeatMsg):
            self._on_heartbeat(now, src, msg, out)
        elif isinstance(msg, HeartbeatReply):
            if self.is_leader:
                self._on_head_report(now, src, msg.head_block_num, out)

    def _enter_term(self, now: int, term: Term, out: list, leader=None) -> None:
        if term <= self.term:
            return
        self.term = term
        self.voted_for = None
        self.is_candidate = False
        if self.is_leader:
            for req in self.batch:
                self.forward_buffer.setdefault(req.request_id, req)
            self.batch = []
            self.is_leader = False
        self.votes = set()
        self.known_leader = None
        self._arm_election(now, out)
        if leader is not None:
            self.known_leader = leader
            self._flush_forward_buffer(now, out)

    def _start_candidacy(self, now: int, out: list) -> None:
        self._enter_term(now, self.term + 1, out)
        self.is_candidate = True
        self.voted_for = self.id
        self.votes = {self.id}
        self.record(now, self.id, "candidacy", term=self.term)
        msg = RequestVoteMsg(self.term, self.id)
        for peer in self.peers:
            out.append(Send(peer, msg, PH_SELECTION))

    def _on_request_vote(self, now: int, src, msg: RequestVoteMsg, out: list) -> None:
        if self.faults.byzantine and msg.candidate_id != self.id:
            out.append(Send(src, RequestVoteReply(self.term, self.id, False), PH_SELECTION))
            return
        grant = (
            msg.term == self.term
            and self.voted_for in (None, msg.candidate_id)
            and not self.is_leader
        )
        if grant:
            self.voted_for = msg.candidate_id
            self._arm_election(now, out)
        out.append(Send(src, RequestVoteReply(self.term, self.id, grant), PH_SELECTION))

    def _on_vote_reply(self, now: int, src, msg: RequestVoteReply, out: list) -> None:
        if not self.is_candidate or msg.term != self.term or not msg.vote_granted:
            return
        if src not in self.membership or msg.voter_id != src:
            return
        self.votes.add(src)
        if len(self.votes) >= strict_majority(len(self.membership)):
            self.is_candidate = False
            self.is_leader = True
            self.known_leader = self.id
            self.heads = {self.id: self.chain.head_num}
            self.created_max = 0
            self.record(now, self.id, "accountant_established", term=self.term)
            hb = HeartbeatMsg(self.term, self.id, self.commit_index)
            for peer in self.peers:
                out.append(Send(peer, hb, PH_HEARTBEAT))
            out.append(Schedule(now + self.timing.heartbeat_us, T_HEARTBEAT))
            out.append(Schedule(now + self.timing.batch_us, T_BATCH))
            self._flush_forward_buffer(now, out)

    def _on_heartbeat(self, now: int, src, msg: HeartbeatMsg, out: list) -> None:
        if msg.term < self.term:
            return
        if msg.accountant_id != self.id:
            self.is_candidate = False
            self.is_leader = False
        self.known_leader = msg.accountant_id
        self._arm_election(now, out)
        self.commit_index = max(self.commit_index, min(msg.commit_index, self.chain.head_num))
        self._flush_forward_buffer(now, out)
        out.append(
            Send(src, HeartbeatReply(self.term, self.id, self.chain.head_num), PH_HEARTBEAT)
        )

    def _on_client_request(self, now: int, req: TransactionRequest, out: list) -> None:
        if self.is_leader:
            if req.request_id not in self.seen_requests:
                self.seen_requests.add(req.request_id)
                self.batch.append(req)
        else:
            self.forward_buffer.setdefault(req.request_id, req)
            self._flush_forward_buffer(now, out)

    def _flush_forward_buffer(self, now: int, out: list) -> None:
        if self.is_leader:
            for req in self.forward_buffer.values():
                if req.request_id not in self.seen_requests:
                    self.seen_requests.add(req.request_id)
                    self.batch.append(req)
            self.forward_buffer.clear()
        elif self.known_leader is not None and self.forward_buffer:
            for req in self.forward_buffer.values():
                out.append(Send(self.known_leader, ClientRequestMsg(req), PH_CLIENT))
            self.forward_buffer.clear()

    def _package(self, now: int, out: list) -> None:
        entries = tuple(self.batch[: self.timing.batch_max])
        self.batch = self.batch[self.timing.batch_max :]
        if self.faults.tamper:
            entries = tuple(
                replace(e, payload=bytes([e.payload[0] ^ 0x01]) + e.payload[1:])
                for e in entries
            )
            self.record(now, self.id, "tamper", block_num=self.chain.head_num + 1)
        block = make_block(self.chain.head_num + 1, hash_block(self.chain.last), now, entries)
        self.chain = append_block(self.chain, block)
        self.created_max = block.block_num
        self.heads[self.id] = self.chain.head_num
        self.record(now, self.id, "appended", block_num=block.block_num, empty=False,
                    term=self.term)
        self.block_sent_at[block.block_num] = now
        msg = AppendEntriesMsg(self.term, self.id, block, ())
        for peer in self.peers:
            out.append(Send(peer, msg, PH_BLOCK, round=block.block_num))

    def _on_append_entries(self, now: int, src, msg: AppendEntriesMsg, out: list) -> None:
        if msg.term < self.term:
            out.append(Send(src, AppendEntriesReply(self.term, self.id, False,
                                                    self.chain.head_num), PH_CONFIRMATION))
            return
        if msg.accountant_id != self.id:
            self.is_candidate = False
            self.is_leader = False
        self.known_leader = msg.accountant_id
        self._arm_election(now, out)

        block = msg.block
        num = block.block_num
        if num <= self.chain.head_num:
            same = hash_block(self.chain.blocks[num]) == hash_block(block)
            if not same and num > self.commit_index:
                prefix = self.chain.blocks[:num]
                if block.prehash == hash_block(prefix[-1]):
                    self.chain = Chain(prefix + (block,))
                    same = True
            out.append(Send(src, AppendEntriesReply(self.term, self.id, same,
                                                    self.chain.head_num),
                            PH_CONFIRMATION, round=num))
            return
        if num > self.chain.head_num + 1:
            # overtook its predecessor in flight: hold it silently and
            # apply it once the gap fills
            if num <= self.chain.head_num + 16 and len(self.ae_backlog) < 16:
                self.ae_backlog.setdefault(num, (src, msg))
            return
        if block.prehash != hash_block(self.chain.last):
            out.append(Send(src, AppendEntriesReply(self.term, self.id, False,
                                                    self.chain.head_num),
                            PH_CONFIRMATION, round=num))
            return
        self.chain = append_block(self.chain, block)
        self.record(now, self.id, "appended", block_num=num, empty=False, term=self.term)
        out.append(Send(src, AppendEntriesReply(self.term, self.id, True,
                                                self.chain.head_num),
                        PH_CONFIRMATION, round=num))
        if self.ae_backlog:
            for k in [k for k in self.ae_backlog if k <= self.chain.head_num]:
                del self.ae_backlog[k]
            held = self.ae_backlog.pop(self.chain.head_num + 1, None)
            if held is not None:
                self._on_append_entries(now, held[0], held[1], out)

    def _on_head_report(self, now: int, src, head: int, out: list) -> None:
        if not self.is_leader:
            return
        self.heads[src] = max(self.heads.get(src, 0), head)
        # resend only blocks whose broadcast predates the report by more
        # than a round trip, and rate-limit per peer: younger lag is
        # usually just flight time, and reflex salvos snowball
        if head < self.chain.head_num and now >= self.catch_up_ok_us.get(src, 0):
            sent_any = False
            for num in range(head + 1, min(head + 1 + 8, self.chain.head_num + 1)):
                if now - self.block_sent_at.get(num, 0) < self.timing.catch_up_margin_us:
                    break  # later blocks are younger still
                msg = AppendEntriesMsg(self.term, self.id, self.chain.blocks[num], (),
                                       catch_up=True)
                out.append(Send(src, msg, PH_SYNC, round=num))
                sent_any = True
            if sent_any:
                self.catch_up_ok_us[src] = now + self.timing.catch_up_margin_us
        if not self.created_max:
            return
        heads = [self.heads.get(n, 0) for n in self.membership]
        heads.sort(reverse=True)
        target = min(heads[strict_majority(len(self.membership)) - 1], self.created_max)
        while self.commit_index < target:
            self.commit_index += 1
            block = self.chain.blocks[self.commit_index]
            self.record(now, self.id, "block_committed", term=self.term,
                        block_num=block.block_num, entries=len(block.entries))
            for entry in block.entries:
                self.record(now, self.id, "commit", request_id=entry.request_id,
                            block_num=block.block_num)
                out.append(Send(entry.client_id,
                                CommitNotice(self.term, self.id, entry.request_id,
                                             block.block_num, ()), PH_CLIENT))
