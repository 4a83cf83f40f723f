"""Command-line front end: run scenarios, sweep comparison grids, score
the consensus-algorithm matrix, and demo the risk pipeline.

Every command writes its artifacts into one output directory (flag
--out, else $RACSIM_OUT, else ./racsim-out) next to a manifest.json.
Reruns with the same inputs and seed are byte-identical except for the
timestamp, which lives only in the manifest.

Exit codes: 0 success, 2 invalid input, 3 invariant violation during a
run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .core import NodeId
from .evalmodel import UnknownLevel, evaluate, load_matrix_csv, reference_matrix_path
from .metrics import election_costs_ms, phase_counts, report_rows
from .risk import DegenerateInput, RiskConfig, assess, load_trace
from .simnet import (
    FaultPlan,
    InvalidScenario,
    load_scenario,
    run_scenario,
    scenario_from_mapping,
    synthesize_traces,
)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_VIOLATION = 3

OUT_DIR_ENV = "RACSIM_OUT"

# grid cells mirror the steady-load shape used by the acceptance suite
GRID_DURATION_MS = 3000
GRID_RATE_PER_MS = 0.2
GRID_REQUESTS = 600
GRID_TRACE_LENGTH = 200
GRID_KAPPA = 6.0

COMPARE_COLUMNS = (
    "algorithm",
    "n",
    "byz_fraction",
    "seed",
    "latency_p50",
    "throughput",
    "election_cost",
    "msgs_per_round",
    "committed_tampered",
)


# ------------------------------------------------------------ output plumbing


def resolve_out_dir(arg: str | None) -> Path:
    path = Path(arg or os.environ.get(OUT_DIR_ENV) or "racsim-out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, **fields) -> None:
    body = {
        "command": command,
        "build": __version__,
        "output_dir": str(out),
        "created_unix": time.time(),  # the one non-deterministic field
    }
    body.update(fields)
    (out / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cell(value) -> object:
    return "" if value is None else value


# ---------------------------------------------------------------- racsim run


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except InvalidScenario as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)

    out = resolve_out_dir(args.out)
    result = run_scenario(scenario)

    with open(out / "events.ldjson", "w") as fh:
        for event in result.events:
            fh.write(json.dumps(event, sort_keys=True, default=str))
            fh.write("\n")

    write_csv(
        out / "metrics.csv",
        ("section", "name", "value"),
        ((s, n, _cell(v)) for s, n, v in report_rows(result.metrics)),
    )
    write_csv(
        out / "verdicts.csv",
        ("node", "role", "term", "block_num", "verdict", "criterion", "violation"),
        (
            (
                r["node"],
                r["role"],
                r["term"],
                _cell(r["block_num"]),
                r["verdict"],
                _cell(r["criterion"]),
                r["violation"],
            )
            for r in result.verdicts
        ),
    )
    write_manifest(
        out,
        "run",
        scenario=str(args.scenario),
        seed=scenario.seed,
        algorithm=scenario.algorithm,
    )

    if result.violations:
        for line in result.violations:
            print(f"invariant violated: {line}", file=sys.stderr)
        return EXIT_VIOLATION
    print(
        f"{scenario.algorithm} seed={scenario.seed}: "
        f"{result.metrics.committed} committed, "
        f"{result.metrics.blocks_committed} blocks -> {out}"
    )
    return EXIT_OK


# ------------------------------------------------------------ racsim compare


def byzantine_cast(n: int, byz_fraction: float) -> dict:
    """Pick which node names act byzantine for a two-org cluster of n.

    Colluders come from the low-index names of each org (the likely
    evaluator seats, capped below the group majority); the rest tamper
    when elected, drawn from the high-index names so they start outside
    the evaluator group.
    """
    half = n // 2
    per_org = 1 if n < 8 else 2
    group = 2 * per_org
    byz = round(byz_fraction * n)
    colluders = min(byz // 2, (group - 1) // 2)
    collude = ["alpha-0", "beta-0"][:colluders]
    back_names = [f"beta-{i}" for i in range(half - 1, -1, -1)]
    back_names += [f"alpha-{i}" for i in range(n - half - 1, -1, -1)]
    tamper = [x for x in back_names if x not in collude][: byz - colluders]
    return {"tamper_accountant": tamper, "collude_evaluator": collude}


def grid_cell(algorithm: str, n: int, byz_fraction: float, seed: int):
    """One comparison-grid scenario: two orgs, steady load, leader-kill
    churn so every run yields many election samples."""
    half = n // 2
    faults = byzantine_cast(n, byz_fraction)
    faults["targeted_dos"] = True
    return scenario_from_mapping(
        {
            "algorithm": algorithm,
            "orgs": {"alpha": n - half, "beta": half},
            "evaluators_per_org": 1 if n < 8 else 2,
            "duration_ms": GRID_DURATION_MS,
            "workload": {
                "rate_per_ms": GRID_RATE_PER_MS,
                "total_requests": GRID_REQUESTS,
            },
            "risk": {"trace_length": GRID_TRACE_LENGTH, "kappa": GRID_KAPPA},
            "faults": faults,
            "seed": seed,
        }
    )


def compare_row(algorithm: str, n: int, byz_fraction: float, seed: int) -> tuple:
    result = run_scenario(grid_cell(algorithm, n, byz_fraction, seed))
    report = result.metrics
    rounds = phase_counts(result.events)
    round_msgs = (
        rounds["block_addition"] + rounds["judgment_reply"] + rounds["confirmation"]
    )
    per_round = (
        round(round_msgs / report.blocks_committed, 3)
        if report.blocks_committed
        else None
    )
    total_cost = round(sum(election_costs_ms(result.events).values()), 3)
    return (
        algorithm,
        n,
        byz_fraction,
        seed,
        _cell(None if report.latency_p50_ms is None else round(report.latency_p50_ms, 3)),
        _cell(None if report.throughput_tps is None else round(report.throughput_tps, 3)),
        total_cost,
        _cell(per_round),
        result.committed_tampered,
    )


def cmd_compare(args) -> int:
    try:
        nodes = parse_int_list(args.nodes, "nodes")
        fractions = parse_float_list(args.byz, "byz")
        seeds = parse_seed_range(args.seeds)
    except ValueError as exc:
        print(f"invalid grid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    algos = ("rac", "raft") if args.algo == "both" else (args.algo,)

    out = resolve_out_dir(args.out)
    rows = [
        compare_row(algorithm, n, frac, seed)
        for n in nodes
        for frac in fractions
        for seed in seeds
        for algorithm in algos
    ]
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    write_manifest(
        out,
        "compare",
        algorithms=list(algos),
        nodes=list(nodes),
        byz_fractions=list(fractions),
        seeds=[seeds[0], seeds[-1]],
    )
    print(f"{len(rows)} rows -> {out / 'compare.csv'}")
    return EXIT_OK


# --------------------------------------------------------- racsim eval-topsis


def cmd_eval_topsis(args) -> int:
    path = Path(args.matrix) if args.matrix else reference_matrix_path()
    try:
        matrix = load_matrix_csv(path)
        scores = evaluate(matrix)
    except (OSError, ValueError, UnknownLevel) as exc:
        print(f"invalid matrix: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = resolve_out_dir(args.out)
    width = max(len(name) for name in scores.algorithms)
    for name, sp, sm, f in zip(scores.algorithms, scores.s_plus, scores.s_minus, scores.f):
        print(f"{name:<{width}}  s+={sp:.6f}  s-={sm:.6f}  f={f:.6f}")
    print("ranking:", " > ".join(scores.ranking))
    if scores.degenerate:
        print("note: ideal solutions coincide; every score is pinned at 0.5")

    write_csv(
        out / "topsis.csv",
        ("algorithm", "s_plus", "s_minus", "closeness", "rank"),
        (
            (name, repr(sp), repr(sm), repr(f), scores.ranking.index(name) + 1)
            for name, sp, sm, f in zip(
                scores.algorithms, scores.s_plus, scores.s_minus, scores.f
            )
        ),
    )
    write_manifest(out, "eval-topsis", matrix=str(path), degenerate=scores.degenerate)
    return EXIT_OK


# ----------------------------------------------------------- racsim risk-demo


def demo_traces(args) -> list:
    if args.traces:
        files = sorted(Path(args.traces).glob("*.txt"))
        return [load_trace(f) for f in files]
    plan = FaultPlan()
    names = [f"node-{i:02d}" for i in range(args.nodes)]
    if args.attackers:
        plan = FaultPlan(tamper=tuple(names[-args.attackers :]))
    ids = [NodeId(v, "node") for v in names]
    book = synthesize_traces(
        ids, 1, plan, args.seed, length=args.trace_length, alphabet=6
    )
    return [book[i] for i in sorted(book)]


def cmd_risk_demo(args) -> int:
    try:
        traces = demo_traces(args)
    except (OSError, ValueError) as exc:
        print(f"invalid traces: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = resolve_out_dir(args.out)
    config = RiskConfig(kappa=args.kappa, seed=args.seed)
    try:
        report = assess(traces, config)
    except DegenerateInput as exc:
        print(f"assessment skipped: {exc}")
        write_manifest(out, "risk-demo", seed=args.seed, skipped=True)
        return EXIT_OK

    flagged = sorted(str(n) for n in report.flagged)
    for node in sorted(report.scores, key=str):
        mark = "  <- flagged" if node in report.flagged else ""
        print(f"{node}  score={report.scores[node]:.6f}{mark}")
    print(f"threshold={report.threshold:.6f}  flagged={flagged or 'none'}")

    write_csv(
        out / "scores.csv",
        ("node", "score", "flagged"),
        (
            (str(node), repr(report.scores[node]), int(node in report.flagged))
            for node in sorted(report.scores, key=str)
        ),
    )
    write_manifest(
        out,
        "risk-demo",
        seed=args.seed,
        threshold=report.threshold,
        flagged=flagged,
    )
    return EXIT_OK


# -------------------------------------------------------------- flag parsing


def parse_int_list(text: str, what: str) -> tuple:
    try:
        values = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ValueError(f"{what}: expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise ValueError(f"{what}: needs positive integers, got {text!r}")
    return values


def parse_float_list(text: str, what: str) -> tuple:
    try:
        values = tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ValueError(f"{what}: expected comma-separated numbers, got {text!r}")
    if not values or any(not 0 <= v < 1 for v in values):
        raise ValueError(f"{what}: fractions must be in [0, 1), got {text!r}")
    return values


def parse_seed_range(text: str) -> tuple:
    """Either one integer or an inclusive A..B range."""
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            start, end = int(lo), int(hi)
        except ValueError:
            raise ValueError(f"seeds: expected A..B, got {text!r}")
        if end < start:
            raise ValueError(f"seeds: empty range {text!r}")
        return tuple(range(start, end + 1))
    try:
        return (int(text),)
    except ValueError:
        raise ValueError(f"seeds: expected an integer or A..B, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="racsim",
        description="Deterministic consensus-protocol simulator and evaluation tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario file and dump artifacts")
    p_run.add_argument("--scenario", required=True, help="scenario YAML path")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--out", default=None, help=f"output dir (default ${OUT_DIR_ENV})")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="paired-seed grid over both algorithms")
    p_cmp.add_argument("--algo", choices=("both", "rac", "raft"), default="both")
    p_cmp.add_argument("--nodes", default="5,10,20,30", help="comma list of cluster sizes")
    p_cmp.add_argument("--byz", default="0", help="comma list of byzantine fractions")
    p_cmp.add_argument("--seeds", default="0..4", help="seed (N) or inclusive range (A..B)")
    p_cmp.add_argument("--out", default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_top = sub.add_parser("eval-topsis", help="rank algorithms by ideal-point closeness")
    p_top.add_argument("--matrix", default=None, help="indicator CSV (default: bundled)")
    p_top.add_argument("--out", default=None)
    p_top.set_defaults(func=cmd_eval_topsis)

    p_risk = sub.add_parser("risk-demo", help="score syscall traces and show flags")
    p_risk.add_argument("--traces", default=None, help="directory of *.txt traces")
    p_risk.add_argument("--nodes", type=int, default=10, help="synthetic cluster size")
    p_risk.add_argument("--attackers", type=int, default=1, help="synthetic attackers")
    p_risk.add_argument("--trace-length", type=int, default=400)
    p_risk.add_argument("--kappa", type=float, default=2.0, help="flag threshold sigmas")
    p_risk.add_argument("--seed", type=int, default=0)
    p_risk.add_argument("--out", default=None)
    p_risk.set_defaults(func=cmd_risk_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
