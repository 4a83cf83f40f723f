"""Ledger primitives shared by every other module.

Identities, terms, transactions, blocks, chains, and the risk-node list.
All types are immutable values and all operations are pure functions, so
they are safe to share across any number of concurrent activities.

Canonical wire format (used by both hashing and serialization):
every variable-length field is length-prefixed with a big-endian u32,
integers are fixed-width big-endian (u64 unless noted), digests are raw
32-byte strings. A ``Block`` serializes as::

    u64 block_num | 32B prehash | u64 time_stamp_us | 32B merkle_root
    | u8 empty_flag | u32 entry_count | entry...

and a ``TransactionRequest`` as::

    u32 len + request_id utf-8 | u32 len + client_id utf-8
    | u32 len + payload | u64 submit_time_us
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum

Term = int  # logical timestamp; monotonically non-decreasing per node


class Role(Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    ACCOUNTANT = "accountant"
    EVALUATOR = "evaluator"

DIGEST_SIZE = 32
ZERO_DIGEST = b"\x00" * DIGEST_SIZE
EMPTY_MERKLE_ROOT = hashlib.sha256(b"").digest()

_LEAF_TAG = b"\x00"
_NODE_TAG = b"\x01"


class HashMismatch(Exception):
    """prehash does not link to the chain head: tampering or a stale block."""


class NumGap(Exception):
    """block_num is not head+1: a block was missed."""


@dataclass(frozen=True, order=True)
class NodeId:
    """Cluster-unique node identity, tagged with its owning organization."""

    value: str
    org: str

    def __post_init__(self) -> None:
        if not self.value:
            raise ValueError("NodeId.value must be non-empty")
        if not self.org:
            raise ValueError("NodeId.org must be non-empty")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TransactionRequest:
    request_id: str
    client_id: str
    payload: bytes
    submit_time_us: int  # simulation clock, microseconds

    def __post_init__(self) -> None:
        if not self.payload:
            raise ValueError("payload must be non-empty")


@dataclass(frozen=True)
class Block:
    block_num: int
    prehash: bytes
    time_stamp_us: int
    merkle_root: bytes
    entries: tuple[TransactionRequest, ...]
    empty_flag: bool


def serialize_request(req: TransactionRequest) -> bytes:
    rid = req.request_id.encode("utf-8")
    cid = req.client_id.encode("utf-8")
    return b"".join(
        (
            struct.pack(">I", len(rid)),
            rid,
            struct.pack(">I", len(cid)),
            cid,
            struct.pack(">I", len(req.payload)),
            req.payload,
            struct.pack(">Q", req.submit_time_us),
        )
    )


def serialize_block(block: Block) -> bytes:
    parts = [
        struct.pack(">Q", block.block_num),
        block.prehash,
        struct.pack(">Q", block.time_stamp_us),
        block.merkle_root,
        struct.pack(">B", 1 if block.empty_flag else 0),
        struct.pack(">I", len(block.entries)),
    ]
    parts.extend(serialize_request(e) for e in block.entries)
    return b"".join(parts)


def hash_block(block: Block) -> bytes:
    """Deterministic content digest of a block's canonical serialization."""
    return hashlib.sha256(serialize_block(block)).digest()


def leaf_hash(req: TransactionRequest) -> bytes:
    return hashlib.sha256(_LEAF_TAG + serialize_request(req)).digest()


def merkle_root(entries) -> bytes:
    """Binary Merkle tree over leaf hashes; the last leaf is duplicated
    whenever a level has odd width. No entries yields a fixed empty-root
    constant."""
    level = [leaf_hash(e) for e in entries]
    if not level:
        return EMPTY_MERKLE_ROOT
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [
            hashlib.sha256(_NODE_TAG + level[i] + level[i + 1]).digest()
            for i in range(0, len(level), 2)
        ]
    return level[0]


def make_block(
    block_num: int,
    prehash: bytes,
    time_stamp_us: int,
    entries,
) -> Block:
    """Build a block whose merkle_root and empty_flag satisfy the invariants."""
    entries = tuple(entries)
    return Block(
        block_num=block_num,
        prehash=prehash,
        time_stamp_us=time_stamp_us,
        merkle_root=merkle_root(entries),
        entries=entries,
        empty_flag=not entries,
    )


def empty_copy(block: Block) -> Block:
    """The voided form of a block: same block_num/prehash/timestamp, no entries."""
    return make_block(block.block_num, block.prehash, block.time_stamp_us, ())


def validate_block(block: Block) -> None:
    if block.empty_flag != (len(block.entries) == 0):
        raise ValueError("empty_flag must mirror entries emptiness")
    if block.merkle_root != merkle_root(block.entries):
        raise ValueError("merkle_root does not match entries")
    if block.block_num < 0:
        raise ValueError("block_num must be non-negative")


GENESIS = make_block(0, ZERO_DIGEST, 0, ())


@dataclass(frozen=True)
class Chain:
    """Append-only block sequence anchored at the fixed genesis block."""

    blocks: tuple[Block, ...] = (GENESIS,)

    @property
    def last(self) -> Block:
        return self.blocks[-1]

    @property
    def head_num(self) -> int:
        return self.blocks[-1].block_num

    def __len__(self) -> int:
        return len(self.blocks)

    def validate(self) -> None:
        """Full O(length) check: genesis anchor, prehash links, merkle roots."""
        if self.blocks[0] != GENESIS:
            raise ValueError("chain must start at the genesis block")
        for i, block in enumerate(self.blocks):
            validate_block(block)
            if i > 0:
                if block.prehash != hash_block(self.blocks[i - 1]):
                    raise HashMismatch(f"broken prehash link at block {block.block_num}")
                if block.block_num != self.blocks[i - 1].block_num + 1:
                    raise NumGap(f"block_num jump at index {i}")


def append_block(chain: Chain, block: Block) -> Chain:
    """Extend the chain by one block; never mutates the input on error."""
    if block.block_num != chain.last.block_num + 1:
        raise NumGap(
            f"expected block_num {chain.last.block_num + 1}, got {block.block_num}"
        )
    if block.prehash != hash_block(chain.last):
        raise HashMismatch(f"prehash of block {block.block_num} does not link to head")
    return Chain(chain.blocks + (block,))


@dataclass(frozen=True)
class RiskNodeList:
    """The shared blacklist: NodeId -> term in which the node was added."""

    entries: tuple[tuple[NodeId, Term], ...] = ()

    def __contains__(self, node: NodeId) -> bool:
        return any(n == node for n, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def term_of(self, node: NodeId) -> Term:
        for n, t in self.entries:
            if n == node:
                return t
        raise KeyError(node)

    def nodes(self) -> frozenset[NodeId]:
        return frozenset(n for n, _ in self.entries)

    def add(self, node: NodeId, term: Term) -> "RiskNodeList":
        if node in self:
            return self
        return RiskNodeList(tuple(sorted(self.entries + ((node, term),))))

    def remove(self, node: NodeId) -> "RiskNodeList":
        return RiskNodeList(tuple((n, t) for n, t in self.entries if n != node))

    def merge(self, other: "RiskNodeList") -> "RiskNodeList":
        merged = dict(self.entries)
        for n, t in other.entries:
            if n not in merged or t < merged[n]:
                merged[n] = t
        return RiskNodeList(tuple(sorted(merged.items())))
