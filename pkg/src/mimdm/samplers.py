"""Unmasking strategies and the decode loop.

Every strategy sees the per-position entropies of the current pass and picks a
set of masked positions to commit. ``mi_guided`` additionally charges each
candidate for its predicted MI with the positions already picked this pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mimdm.mdm import SequenceState, entropy_rows

STRATEGIES = ("sequential", "naive_k", "entropy_budget", "mi_guided")
COMMIT_RULES = ("argmax", "sample")


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "sequential"
    k: int = 1
    gamma: float = 0.0
    lam: float = 1.0
    commit: str = "argmax"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.commit not in COMMIT_RULES:
            raise ValueError(f"unknown commit rule {self.commit!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")

    @property
    def needs_estimator(self) -> bool:
        return self.strategy == "mi_guided"

    def label(self) -> str:
        if self.strategy == "sequential":
            return "sequential"
        if self.strategy == "naive_k":
            return f"naive(k={self.k})"
        if self.strategy == "entropy_budget":
            return f"entropy_budget(gamma={self.gamma:g})"
        return f"mi_guided(gamma={self.gamma:g},lambda={self.lam:g})"


def by_confidence(entropies: np.ndarray, masked_set) -> np.ndarray:
    """Masked indices sorted by increasing entropy, ties by lowest index."""
    idx = np.sort(np.asarray(list(masked_set), dtype=np.int64))
    h = np.asarray(entropies, dtype=np.float64)[idx]
    return idx[np.argsort(h, kind="stable")]


def select_sequential(entropies: np.ndarray, masked_set) -> list[int]:
    order = by_confidence(entropies, masked_set)
    if order.size == 0:
        raise ValueError("no masked positions to select from")
    return [int(order[0])]


def select_naive_topk(entropies: np.ndarray, masked_set, k: int) -> list[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return [int(i) for i in by_confidence(entropies, masked_set)[:k]]


def select_entropy_budget(entropies: np.ndarray, masked_set, gamma: float) -> list[int]:
    """Lowest-entropy prefix whose summed entropy stays within ``gamma``.

    The first candidate is always taken so every pass makes progress.
    """
    order = by_confidence(entropies, masked_set)
    if order.size == 0:
        return []
    h = np.asarray(entropies, dtype=np.float64)
    picked = [int(order[0])]
    spent = h[order[0]]
    for i in order[1:]:
        if spent + h[i] > gamma:
            break
        spent += h[i]
        picked.append(int(i))
    return picked


@dataclass
class MIScan:
    selected: list[int]
    costs: list[float]
    remaining: float
    forced: bool


def scan_mi_guided(entropies: np.ndarray, mi: np.ndarray, masked_set, gamma: float, lam: float) -> MIScan:
    """Budgeted greedy scan; see ``select_mi_guided``."""
    order = by_confidence(entropies, masked_set)
    h = np.asarray(entropies, dtype=np.float64)
    mi = np.asarray(mi, dtype=np.float64)
    chosen: list[int] = []
    costs: list[float] = []
    budget = float(gamma)
    for i in order:
        dep = float(mi[i, chosen].sum()) if chosen else 0.0
        cost = float(h[i]) + lam * dep
        if cost <= budget:
            chosen.append(int(i))
            costs.append(cost)
            budget -= cost
        if budget <= 0:
            break
    forced = False
    if not chosen and order.size:
        chosen = [int(order[0])]
        costs = [float(h[order[0]])]
        forced = True
    return MIScan(chosen, costs, budget, forced)


def select_mi_guided(entropies: np.ndarray, mi_hat, masked_set, gamma: float, lam: float) -> list[int]:
    """Greedy MI-aware selection under a per-pass entropy budget.

    Candidates are visited by increasing entropy. A candidate costs its
    entropy plus ``lam`` times its summed predicted MI with the positions
    already accepted; it is accepted if the cost fits the remaining budget,
    which then shrinks by that cost. The scan stops once the budget reaches
    zero. If nothing fits, the lowest-entropy candidate is taken anyway.
    """
    values = getattr(mi_hat, "values", mi_hat)
    return scan_mi_guided(entropies, values, masked_set, gamma, lam).selected


@dataclass
class PassRecord:
    selected: list[int]
    entropies: dict[int, float]
    costs: list[float]
    budget_spent: float
    forced: bool = False


@dataclass
class DecodeTrace:
    initial_state: SequenceState
    final_state: SequenceState | None = None
    passes: list[PassRecord] = field(default_factory=list)
    backbone_nfe: int = 0
    head_nfe: int = 0
    config: SamplerConfig | None = None

    @property
    def n_passes(self) -> int:
        return len(self.passes)

    def committed(self) -> list[int]:
        return [i for p in self.passes for i in p.selected]

    def to_json(self) -> dict:
        cfg = self.config
        return {
            "config": None if cfg is None else {
                "strategy": cfg.strategy,
                "k": cfg.k,
                "gamma": cfg.gamma,
                "lambda": cfg.lam,
                "commit": cfg.commit,
                "seed": cfg.seed,
            },
            "initial_masked": [int(i) for i in self.initial_state.masked_indices()],
            "initial_tokens": [int(t) for t in self.initial_state.tokens],
            "final_tokens": None if self.final_state is None else [int(t) for t in self.final_state.tokens],
            "backbone_nfe": self.backbone_nfe,
            "head_nfe": self.head_nfe,
            "passes": [
                {
                    "selected": p.selected,
                    "entropies": {str(k): v for k, v in sorted(p.entropies.items())},
                    "costs": p.costs,
                    "budget_spent": p.budget_spent,
                    "forced": p.forced,
                }
                for p in self.passes
            ],
        }


TRACE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["config", "initial_masked", "initial_tokens", "final_tokens", "backbone_nfe", "head_nfe", "passes"],
    "properties": {
        "config": {
            "type": ["object", "null"],
            "required": ["strategy", "k", "gamma", "lambda", "commit", "seed"],
            "properties": {
                "strategy": {"enum": list(STRATEGIES)},
                "k": {"type": "integer", "minimum": 1},
                "gamma": {"type": "number", "minimum": 0},
                "lambda": {"type": "number", "minimum": 0},
                "commit": {"enum": list(COMMIT_RULES)},
                "seed": {"type": "integer"},
            },
        },
        "initial_masked": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "initial_tokens": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "final_tokens": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
        "backbone_nfe": {"type": "integer", "minimum": 0},
        "head_nfe": {"type": "integer", "minimum": 0},
        "passes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["selected", "entropies", "costs", "budget_spent", "forced"],
                "properties": {
                    "selected": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
                    "entropies": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                    "costs": {"type": "array", "items": {"type": "number"}},
                    "budget_spent": {"type": "number"},
                    "forced": {"type": "boolean"},
                },
            },
        },
    },
}


def select(config: SamplerConfig, entropies: np.ndarray, masked: np.ndarray, mi: np.ndarray | None):
    """Dispatch to the configured strategy; returns ``(selected, costs, spent, forced)``."""
    h = entropies
    if config.strategy == "sequential":
        sel = select_sequential(h, masked)
    elif config.strategy == "naive_k":
        sel = select_naive_topk(h, masked, config.k)
    elif config.strategy == "entropy_budget":
        sel = select_entropy_budget(h, masked, config.gamma)
    else:
        scan = scan_mi_guided(h, mi, masked, config.gamma, config.lam)
        return scan.selected, scan.costs, float(sum(scan.costs)), scan.forced
    costs = [float(h[i]) for i in sel]
    return sel, costs, float(sum(costs)), False


def decode_batch(
    mdm,
    estimator,
    states: Sequence[SequenceState],
    config: SamplerConfig,
    seeds: Sequence[int] | None = None,
) -> list[DecodeTrace]:
    """Decode several sequences in lockstep, one backbone pass per live sequence per round.

    Each sequence keeps its own trace and RNG stream; batching only shares the
    matrix products.
    """
    if config.needs_estimator and estimator is None:
        raise ValueError("mi_guided decoding needs an MI estimator")
    if seeds is None:
        seeds = [config.seed] * len(states)
    traces = [DecodeTrace(s.copy(), config=config) for s in states]
    current = [s.copy() for s in states]
    rngs = [np.random.default_rng(sd) for sd in seeds]
    while True:
        live = [b for b, s in enumerate(current) if s.mask_flags.any()]
        if not live:
            break
        probs, hidden = mdm.forward_tokens(np.stack([current[b].tokens for b in live]))
        mi_all = None
        if config.needs_estimator:
            mi_all = estimator.predict_batch(hidden, np.stack([current[b].mask_flags for b in live]))
        for row, b in enumerate(live):
            st = current[b]
            tr = traces[b]
            tr.backbone_nfe += 1
            masked = st.masked_indices()
            h = entropy_rows(probs[row])
            mi = None
            if mi_all is not None:
                tr.head_nfe += 1
                mi = mi_all[row]
            sel, costs, spent, forced = select(config, h, masked, mi)
            if not sel:
                raise RuntimeError("selection made no progress")
            for i in sel:
                p = probs[row, i]
                if config.commit == "argmax":
                    v = int(np.argmax(p))
                else:
                    v = int(rngs[b].choice(p.size, p=p / p.sum()))
                st.tokens[i] = v
                st.mask_flags[i] = False
            tr.passes.append(
                PassRecord(sel, {int(i): float(h[i]) for i in masked}, costs, spent, forced)
            )
    for tr, st in zip(traces, current):
        tr.final_state = st
    return traces


def decode(mdm, estimator, initial_state: SequenceState, config: SamplerConfig) -> DecodeTrace:
    return decode_batch(mdm, estimator, [initial_state], config, [config.seed])[0]
