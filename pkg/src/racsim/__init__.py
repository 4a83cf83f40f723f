"""Deterministic simulator for a risk-aware permissioned-ledger consensus
protocol, with a classic leader-election baseline, syscall-anomaly risk
scoring, a behavior-automaton punishment model, and a TOPSIS-based
protocol evaluation model."""

__version__ = "0.1.0"
