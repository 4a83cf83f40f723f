"""Measurements over simulation event logs.

Every function reads the list-of-dicts event log a run produces and
nothing else, so any report can be recomputed from the persisted
events.ldjson alone. Log times are integer microseconds; reported
values are milliseconds and per-second rates.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np


class NotCommitted(Exception):
    pass


class InsufficientCommits(Exception):
    pass


class NoElection(Exception):
    pass


class LogInconsistent(Exception):
    """The log contradicts itself (per-phase counts vs transport totals)."""


# ------------------------------------------------------------- extraction


def submit_times(events) -> dict:
    return {
        e["request_id"]: e["time_us"]
        for e in events
        if e["kind"] == "request_submitted"
    }


def first_commits(events) -> dict:
    """Commit instant per request: the accountant's commit-check time for
    the block that first carried it."""
    out: dict = {}
    for e in events:
        if e["kind"] == "commit" and e["request_id"] not in out:
            out[e["request_id"]] = e["time_us"]
    return out


def latency_ms(events, request_id: str) -> float:
    submits = submit_times(events)
    commits = first_commits(events)
    if request_id not in submits:
        raise NotCommitted(f"request {request_id!r} was never submitted")
    if request_id not in commits:
        raise NotCommitted(f"request {request_id!r} never committed")
    return (commits[request_id] - submits[request_id]) / 1000.0


def latencies_ms(events) -> dict:
    submits = submit_times(events)
    return {
        rid: (t - submits[rid]) / 1000.0
        for rid, t in first_commits(events).items()
        if rid in submits
    }


def throughput_tps(events, count: int) -> float:
    """count / (commit instant of the count-th distinct request minus the
    first submission instant)."""
    if count < 1:
        raise ValueError("count must be positive")
    submits = submit_times(events)
    commits = sorted(first_commits(events).values())
    if not submits:
        raise InsufficientCommits("no requests were submitted")
    if len(commits) < count:
        raise InsufficientCommits(f"only {len(commits)} of {count} requests committed")
    window_us = commits[count - 1] - min(submits.values())
    if window_us <= 0:
        raise InsufficientCommits("commit window is empty")
    return count / (window_us / 1_000_000.0)


def election_costs_ms(events) -> dict:
    """Cost of each concluded election, keyed by the established term:
    from the first candidacy after the previous establishment to the
    establishment instant. Disrupted or split attempts in between belong
    to the election they delayed, whatever term number they burned."""
    costs: dict = {}
    episode_start: Optional[int] = None
    for e in events:
        if e["kind"] == "candidacy":
            if episode_start is None:
                episode_start = e["time_us"]
        elif e["kind"] == "accountant_established" and e["term"] not in costs:
            start = episode_start if episode_start is not None else e["time_us"]
            costs[e["term"]] = (e["time_us"] - start) / 1000.0
            episode_start = None
    return costs


def election_cost_ms(events, term: int) -> float:
    costs = election_costs_ms(events)
    if term not in costs:
        raise NoElection(f"term {term} has no concluded election")
    return costs[term]


def phase_counts(events, *, round: Optional[int] = None, term: Optional[int] = None) -> Counter:
    """Message counts by protocol phase, optionally narrowed to one block
    round or one term."""
    counts: Counter = Counter()
    for e in events:
        if e["kind"] != "message":
            continue
        if round is not None and e.get("round") != round:
            continue
        if term is not None and e.get("term") != term:
            continue
        counts[e["phase"]] += 1
    return counts


def message_totals(events) -> tuple:
    delivered = dropped = 0
    for e in events:
        if e["kind"] == "message":
            if e["status"] == "delivered":
                delivered += 1
            else:
                dropped += 1
    return delivered, dropped


def fit_linear(xs, ys) -> tuple:
    """Least-squares line with its coefficient of determination."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = slope * xs + intercept
    ss_res = float(((ys - predicted) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------- summary


@dataclass(frozen=True)
class MetricsReport:
    committed: int
    latency_mean_ms: Optional[float]
    latency_p50_ms: Optional[float]
    latency_p95_ms: Optional[float]
    throughput_tps: Optional[float]
    election_costs_ms: tuple  # ((term, ms), ...)
    phase_totals: tuple  # ((phase, count), ...)
    deliveries: int
    drops: int
    blocks_committed: int
    empty_blocks: int


def summarize(events, expected_requests: Optional[int] = None) -> MetricsReport:
    lats = sorted(latencies_ms(events).values())
    delivered, dropped = message_totals(events)
    phases = phase_counts(events)
    if sum(phases.values()) != delivered + dropped:
        raise LogInconsistent(
            f"phase counts {sum(phases.values())} != deliveries {delivered} + drops {dropped}"
        )
    tput = None
    if expected_requests:
        try:
            tput = throughput_tps(events, expected_requests)
        except InsufficientCommits:
            tput = None
    committed_nums = {e["block_num"] for e in events if e["kind"] == "block_committed"}
    empty_nums = {
        e["block_num"] for e in events if e["kind"] == "appended" and e.get("empty")
    }
    arr = np.asarray(lats, dtype=float) if lats else None
    return MetricsReport(
        committed=len(lats),
        latency_mean_ms=float(arr.mean()) if arr is not None else None,
        latency_p50_ms=float(np.percentile(arr, 50)) if arr is not None else None,
        latency_p95_ms=float(np.percentile(arr, 95)) if arr is not None else None,
        throughput_tps=tput,
        election_costs_ms=tuple(sorted(election_costs_ms(events).items())),
        phase_totals=tuple(sorted(phases.items())),
        deliveries=delivered,
        drops=dropped,
        blocks_committed=len(committed_nums),
        empty_blocks=len(empty_nums),
    )


def report_rows(report: MetricsReport) -> list:
    """Long-format rows (section, name, value) for CSV export."""
    rows = [
        ("summary", "committed", report.committed),
        ("summary", "latency_mean_ms", report.latency_mean_ms),
        ("summary", "latency_p50_ms", report.latency_p50_ms),
        ("summary", "latency_p95_ms", report.latency_p95_ms),
        ("summary", "throughput_tps", report.throughput_tps),
        ("summary", "deliveries", report.deliveries),
        ("summary", "drops", report.drops),
        ("summary", "blocks_committed", report.blocks_committed),
        ("summary", "empty_blocks", report.empty_blocks),
    ]
    rows.extend(("election_cost_ms", str(term), ms) for term, ms in report.election_costs_ms)
    rows.extend(("messages", phase, count) for phase, count in report.phase_totals)
    return rows
