"""Role behavior automata and the stake punishment ledger.

Each consensus role has a small DFA over a shared 12-symbol action
alphabet. A node's per-term action trace either lands in an honest
final state, in the role's designated byzantine state, or stops short
(incomplete). Out-of-order actions are protocol violations, reported
rather than silently punished.

Stake penalties redistribute an offender organization's stake to the
honest organizations; compensation lets a listed node buy its way off
the risk list. Both conserve total stake exactly (Fraction arithmetic,
quantized to a millionth of a unit).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Optional

from .core import NodeId, RiskNodeList, Role, Term

MIN_STAKE_UNIT = Fraction(1, 1_000_000)


class UnknownSymbol(Exception):
    """Input outside the closed action alphabet."""


class InsufficientStake(Exception):
    pass


class NotListed(Exception):
    pass


class Underpayment(Exception):
    pass


class ActionSymbol(str, Enum):
    RECEIVE = "receive"
    GENERATE_NEW_BLOCK = "generate_new_block"
    BROADCAST = "broadcast"
    VALID_BLOCK = "valid_block"
    EMPTY_BLOCK = "empty_block"
    VERIFY = "verify"
    SUCCESS = "success"
    FAIL = "fail"
    ADDITION_NEW_BLOCK = "addition_new_block"
    SEND_SYSTEMCALL = "send_systemcall"
    ABNORMAL = "abnormal"
    NORMAL = "normal"


ALPHABET = frozenset(ActionSymbol)


class Verdict(Enum):
    HONEST = "honest"
    BYZANTINE = "byzantine"
    INCOMPLETE = "incomplete"


@dataclass(frozen=True)
class BehaviorRecord:
    node: NodeId
    trace: tuple
    role_at_time: Role

    def __post_init__(self) -> None:
        if not self.trace:
            raise ValueError("behavior trace must be non-empty")


@dataclass(frozen=True)
class RoleDfa:
    states: frozenset
    alphabet: frozenset
    delta: dict  # (state, ActionSymbol) -> state, partial
    start: int
    accepting: frozenset
    byzantine_states: frozenset

    def __post_init__(self) -> None:
        if not self.byzantine_states <= self.accepting:
            raise ValueError("byzantine states must be accepting")


A = ActionSymbol

_ACCOUNTANT_DFA = RoleDfa(
    states=frozenset(range(6)),
    alphabet=ALPHABET,
    delta={
        (0, A.RECEIVE): 1,
        (1, A.GENERATE_NEW_BLOCK): 2,
        (2, A.BROADCAST): 3,
        (3, A.VALID_BLOCK): 4,
        (3, A.EMPTY_BLOCK): 5,
    },
    start=0,
    accepting=frozenset({4, 5}),
    byzantine_states=frozenset({5}),
)

_EVALUATOR_DFA = RoleDfa(
    states=frozenset(range(5)),
    alphabet=ALPHABET,
    delta={
        (0, A.RECEIVE): 1,
        (1, A.VERIFY): 2,
        (2, A.SUCCESS): 3,
        (2, A.FAIL): 4,
    },
    start=0,
    accepting=frozenset({3, 4}),
    byzantine_states=frozenset({4}),
)

_FOLLOWER_DFA = RoleDfa(
    states=frozenset(range(6)),
    alphabet=ALPHABET,
    delta={
        (0, A.RECEIVE): 1,
        (1, A.ADDITION_NEW_BLOCK): 2,
        (2, A.SEND_SYSTEMCALL): 3,
        (3, A.ABNORMAL): 4,
        (3, A.NORMAL): 5,
    },
    start=0,
    accepting=frozenset({4, 5}),
    byzantine_states=frozenset({4}),
)

_DFAS = {
    Role.ACCOUNTANT: _ACCOUNTANT_DFA,
    Role.EVALUATOR: _EVALUATOR_DFA,
    Role.FOLLOWER: _FOLLOWER_DFA,
}

_CRITERION = {Role.ACCOUNTANT: 1, Role.EVALUATOR: 2, Role.FOLLOWER: 3}


def role_dfa(role: Role) -> RoleDfa:
    dfa = _DFAS.get(role)
    if dfa is None:
        raise ValueError(f"no behavior automaton for role {role}")
    return dfa


@dataclass(frozen=True)
class Classification:
    verdict: Verdict
    final_state: int
    protocol_violation: bool  # trace used an action undefined at its state
    criterion: Optional[int]  # 1..3 when byzantine, else None


def _coerce(symbol) -> ActionSymbol:
    if isinstance(symbol, ActionSymbol):
        return symbol
    try:
        return ActionSymbol(symbol)
    except ValueError:
        raise UnknownSymbol(repr(symbol)) from None


def classify(record: BehaviorRecord) -> Classification:
    dfa = role_dfa(record.role_at_time)
    state = dfa.start
    for raw in record.trace:
        symbol = _coerce(raw)
        nxt = dfa.delta.get((state, symbol))
        if nxt is None:
            return Classification(Verdict.INCOMPLETE, state, True, None)
        state = nxt
    if state in dfa.byzantine_states:
        return Classification(
            Verdict.BYZANTINE, state, False, _CRITERION[record.role_at_time]
        )
    if state in dfa.accepting:
        return Classification(Verdict.HONEST, state, False, None)
    return Classification(Verdict.INCOMPLETE, state, False, None)


# ----------------------------------------------------------------- stakes


@dataclass(frozen=True)
class StakeEvent:
    kind: str  # "penalty" | "compensation"
    term: Term
    node: NodeId
    amount: Fraction
    shares: tuple  # ((org, Fraction), ...) sorted by org


@dataclass(frozen=True, eq=False)
class StakeLedger:
    balances: dict  # org -> Fraction
    penalty_fraction: Fraction = Fraction(5, 100)
    removal_price: Optional[Fraction] = None  # None: price of the last penalty
    history: tuple = ()

    def __post_init__(self) -> None:
        if not 0 <= self.penalty_fraction < 1:
            raise ValueError("penalty_fraction must lie in [0, 1)")
        if any(v < 0 for v in self.balances.values()):
            raise ValueError("balances must be non-negative")

    def total(self) -> Fraction:
        return sum(self.balances.values(), Fraction(0))

    def effective_removal_price(self) -> Fraction:
        if self.removal_price is not None:
            return self.removal_price
        for event in reversed(self.history):
            if event.kind == "penalty":
                return event.amount
        return Fraction(0)


def _split_equally(amount: Fraction, orgs) -> tuple:
    """Quantized equal split; any sub-unit remainder goes to the first org."""
    orgs = sorted(orgs)
    share = (amount / len(orgs)) // MIN_STAKE_UNIT * MIN_STAKE_UNIT
    shares = {org: share for org in orgs}
    shares[orgs[0]] += amount - share * len(orgs)
    return tuple(sorted(shares.items()))


def apply_penalty(
    ledger: StakeLedger, offender: NodeId, honest_orgs, term: Term = 0
) -> StakeLedger:
    """Move penalty_fraction of the offender org's stake to the honest orgs."""
    if not honest_orgs:
        raise ValueError("honest_orgs must be non-empty")
    org = offender.org
    balance = ledger.balances.get(org, Fraction(0))
    if balance <= 0:
        raise InsufficientStake(f"org {org!r} has no stake to penalize")
    amount = balance * ledger.penalty_fraction
    if ledger.penalty_fraction > 0 and amount < MIN_STAKE_UNIT:
        raise InsufficientStake(f"org {org!r} balance below the minimum penalty unit")

    shares = _split_equally(amount, honest_orgs) if amount > 0 else ()
    balances = dict(ledger.balances)
    balances[org] = balance - amount
    for recipient, share in shares:
        balances[recipient] = balances.get(recipient, Fraction(0)) + share
    event = StakeEvent("penalty", term, offender, amount, shares)
    return replace(ledger, balances=balances, history=ledger.history + (event,))


def settle_compensation(
    ledger: StakeLedger,
    rnl: RiskNodeList,
    node: NodeId,
    payment: Fraction,
    term: Term = 0,
):
    """A listed node pays at least the removal price from its org's stake;
    the payment is split among the other orgs and the node leaves the list."""
    if node not in rnl:
        raise NotListed(str(node))
    payment = Fraction(payment)
    price = ledger.effective_removal_price()
    if payment < price:
        raise Underpayment(f"payment {payment} below removal price {price}")
    org = node.org
    balance = ledger.balances.get(org, Fraction(0))
    if payment > balance:
        raise InsufficientStake(f"org {org!r} cannot cover payment {payment}")
    recipients = [o for o in ledger.balances if o != org]
    if not recipients:
        raise ValueError("no other org to receive the compensation")

    shares = _split_equally(payment, recipients) if payment > 0 else ()
    balances = dict(ledger.balances)
    balances[org] = balance - payment
    for recipient, share in shares:
        balances[recipient] += share
    event = StakeEvent("compensation", term, node, payment, shares)
    new_ledger = replace(ledger, balances=balances, history=ledger.history + (event,))
    return new_ledger, rnl.remove(node)


def export_history_csv(ledger: StakeLedger) -> str:
    """history as CSV: event, term, node, amount, recipient shares."""
    lines = ["event,term,node,amount,shares"]
    for e in ledger.history:
        shares = ";".join(f"{org}:{float(x):.6f}" for org, x in e.shares)
        lines.append(f"{e.kind},{e.term},{e.node},{float(e.amount):.6f},{shares}")
    return "\n".join(lines) + "\n"
