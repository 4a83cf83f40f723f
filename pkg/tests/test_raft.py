import numpy as np

from racsim.core import (
    Chain,
    NodeId,
    TransactionRequest,
    append_block,
    hash_block,
    make_block,
)
from racsim.protocol import (
    AppendEntriesMsg,
    AppendEntriesReply,
    Delivery,
    NodeFaults,
    ProtocolTiming,
    RequestVoteMsg,
    RequestVoteReply,
    Send,
)
from racsim.raft import RaftNode


def nid(value: str) -> NodeId:
    return NodeId(value, value.split("-")[0])


class Records(list):
    def __call__(self, now, node, kind, **fields):
        entry = {"time_us": now, "node": str(node), "kind": kind}
        entry.update(fields)
        self.append(entry)

    def kinds(self):
        return [e["kind"] for e in self]


def make_cluster(n=5, faults=None):
    members = [nid(f"n-{i}") for i in range(n)]
    records = Records()
    nodes = {
        m: RaftNode(
            m,
            members,
            ProtocolTiming(),
            np.random.default_rng(i),
            records,
            faults=(faults or {}).get(m.value, NodeFaults()),
        )
        for i, m in enumerate(members)
    }
    return nodes, records


def sends(out, msg_type=None):
    picked = [a for a in out if isinstance(a, Send)]
    if msg_type is not None:
        picked = [a for a in picked if isinstance(a.msg, msg_type)]
    return picked


def elect(nodes, leader_name="n-0", term=1):
    leader = nodes[nid(leader_name)]
    out: list = []
    leader._start_candidacy(1_000, out)
    granters = [m for m in nodes if m != leader.id][:2]
    for g in granters:
        leader.step(2_000, Delivery(g, RequestVoteReply(term, g, True)))
    assert leader.is_leader
    return leader


def test_candidacy_and_majority_election():
    nodes, records = make_cluster()
    leader = elect(nodes)
    assert records.kinds().count("accountant_established") == 1
    assert leader.term == 1


def test_votes_are_single_use_per_term():
    nodes, _ = make_cluster()
    voter = nodes[nid("n-3")]
    out: list = []
    voter._on_message(1_000, nid("n-0"), RequestVoteMsg(1, nid("n-0")), out)
    out2: list = []
    voter._on_message(1_100, nid("n-1"), RequestVoteMsg(1, nid("n-1")), out2)
    (first,) = sends(out, RequestVoteReply)
    (second,) = sends(out2, RequestVoteReply)
    assert first.msg.vote_granted is True and second.msg.vote_granted is False


def test_byzantine_voter_denies_other_candidates():
    nodes, _ = make_cluster(faults={"n-4": NodeFaults(tamper=True)})
    byz = nodes[nid("n-4")]
    out: list = []
    byz._on_request_vote(1_000, nid("n-0"), RequestVoteMsg(1, nid("n-0")), out)
    (reply,) = sends(out, RequestVoteReply)
    assert reply.msg.vote_granted is False


def test_leader_packages_and_replicates():
    nodes, _ = make_cluster()
    leader = elect(nodes)
    req = TransactionRequest("r1", "client-0", b"\x01", 0)
    leader._on_client_request(3_000, req, [])
    out: list = []
    leader._package(4_000, out)
    blocks = sends(out, AppendEntriesMsg)
    assert len(blocks) == 4 and blocks[0].msg.block.entries[0].request_id == "r1"

    follower = nodes[nid("n-1")]
    fout = follower.step(5_000, Delivery(leader.id, blocks[0].msg))
    (ack,) = sends(fout, AppendEntriesReply)
    assert ack.msg.success is True and follower.chain.head_num == 1


def test_tampering_leader_flips_payloads():
    nodes, records = make_cluster(faults={"n-0": NodeFaults(tamper=True)})
    leader = elect(nodes)
    req = TransactionRequest("r1", "client-0", b"\x01", 0)
    leader._on_client_request(3_000, req, [])
    leader._package(4_000, [])
    assert leader.chain.last.entries[0].payload != req.payload
    assert "tamper" in records.kinds()


def test_out_of_order_appends_buffered_and_drained():
    nodes, _ = make_cluster()
    leader, follower = nodes[nid("n-0")], nodes[nid("n-1")]
    chain = Chain()
    blocks = []
    for i in range(1, 3):
        b = make_block(i, hash_block(chain.last), 1_000 * i,
                       [TransactionRequest(f"r{i}", "client-0", bytes([i]), 0)])
        chain = append_block(chain, b)
        blocks.append(b)
    out: list = []
    follower._on_append_entries(5_000, leader.id, AppendEntriesMsg(1, leader.id, blocks[1], ()), out)
    assert not sends(out) and 2 in follower.ae_backlog
    out = []
    follower._on_append_entries(6_000, leader.id, AppendEntriesMsg(1, leader.id, blocks[0], ()), out)
    assert follower.chain.head_num == 2 and not follower.ae_backlog


def test_catch_up_waits_for_margin_and_rate_limits():
    nodes, _ = make_cluster()
    leader = elect(nodes)
    chain = leader.chain
    for i in range(1, 4):
        b = make_block(i, hash_block(chain.last), 1_000 * i,
                       [TransactionRequest(f"r{i}", "client-0", bytes([i]), 0)])
        chain = append_block(chain, b)
        leader.block_sent_at[i] = 1_000 * i
    leader.chain = chain
    leader.created_max = 3
    leader.heads[leader.id] = 3

    young: list = []
    leader._on_head_report(4_000, nid("n-2"), 0, young)
    assert not sends(young, AppendEntriesMsg)

    late = 3_000 + leader.timing.catch_up_margin_us + 1
    first: list = []
    leader._on_head_report(late, nid("n-2"), 0, first)
    resent = sends(first, AppendEntriesMsg)
    assert [s.msg.block.block_num for s in resent] == [1, 2, 3]
    assert all(s.msg.catch_up for s in resent)

    again: list = []
    leader._on_head_report(late + 1, nid("n-2"), 0, again)
    assert not sends(again, AppendEntriesMsg)


def test_commit_requires_majority_heads():
    nodes, records = make_cluster()
    leader = elect(nodes)
    req = TransactionRequest("r1", "client-0", b"\x01", 0)
    leader._on_client_request(3_000, req, [])
    leader._package(4_000, [])
    leader._on_head_report(5_000, nid("n-1"), 1, [])
    assert leader.commit_index == 0  # leader + one follower: not yet 3 of 5
    leader._on_head_report(5_500, nid("n-2"), 1, [])
    assert leader.commit_index == 1
    assert "block_committed" in records.kinds()


def test_uncommitted_divergence_is_overwritten():
    nodes, _ = make_cluster()
    follower = nodes[nid("n-1")]
    stale = make_block(1, hash_block(follower.chain.last), 500,
                       [TransactionRequest("old", "client-0", b"\x0a", 0)])
    follower.chain = append_block(follower.chain, stale)
    fresh = make_block(1, stale.prehash, 900,
                       [TransactionRequest("new", "client-0", b"\x0b", 0)])
    out: list = []
    follower._on_append_entries(5_000, nid("n-0"), AppendEntriesMsg(1, nid("n-0"), fresh, ()), out)
    (reply,) = sends(out, AppendEntriesReply)
    assert reply.msg.success is True
    assert follower.chain.last.entries[0].request_id == "new"


def test_step_down_on_higher_term():
    nodes, _ = make_cluster()
    leader = elect(nodes)
    req = TransactionRequest("r1", "client-0", b"\x01", 0)
    leader._on_client_request(3_000, req, [])
    leader.step(6_000, Delivery(nid("n-3"), RequestVoteMsg(5, nid("n-3"))))
    assert not leader.is_leader and leader.term == 5
    # the unfinished batch went back to the forward buffer
    assert "r1" in leader.forward_buffer or not leader.batch
