"""Benchmark harness, MI map export and the k-mer JSD metric."""
from __future__ import annotations

import csv
import hashlib
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import rel_entr
from scipy.stats import binomtest

from mimdm.io import dump_json
from mimdm.mdm import SequenceState, board_from_state, state_from_puzzle
from mimdm.oracle import MIMatrix
from mimdm.samplers import SamplerConfig, decode_batch
from mimdm.sudoku import PuzzleRecord, check_solution, format_puzzle_line


class NFEMismatch(AssertionError):
    pass


@dataclass
class MethodResult:
    method: str
    config: dict
    n_puzzles: int
    avg_passes: float
    avg_backbone_nfe: float
    avg_head_nfe: float
    accuracy: float
    ci_low: float
    ci_high: float
    wall_time: float
    solved: list[bool] = field(default_factory=list, repr=False)


@dataclass
class BenchmarkReport:
    rows: list[MethodResult]
    n_puzzles: int
    avg_empty_cells: float
    seed: int

    def to_json(self) -> dict:
        return {
            "n_puzzles": self.n_puzzles,
            "avg_empty_cells": self.avg_empty_cells,
            "seed": self.seed,
            "rows": [{k: v for k, v in asdict(r).items() if k != "solved"} for r in self.rows],
        }

    def to_table(self) -> str:
        width = max([len("Method")] + [len(r.method) for r in self.rows])
        lines = [
            f"{'Method':<{width}}  {'Avg. Passes':>11}  {'Sol. Acc.':>9}  {'95% CI':>15}",
            "-" * (width + 42),
        ]
        for r in self.rows:
            ci = f"[{100 * r.ci_low:.1f}, {100 * r.ci_high:.1f}]"
            lines.append(f"{r.method:<{width}}  {r.avg_passes:>11.2f}  {100 * r.accuracy:>8.1f}%  {ci:>15}")
        return "\n".join(lines)

    def row(self, method: str) -> MethodResult:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    ci = binomtest(successes, n).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def puzzle_seed(record: PuzzleRecord, seed: int) -> int:
    """Per-puzzle RNG seed from the puzzle's content, independent of file order."""
    h = hashlib.sha256(f"{seed}:{format_puzzle_line(record)}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def run_method(mdm, estimator, puzzles: Sequence[PuzzleRecord], config: SamplerConfig,
               seed: int = 0, name: str | None = None, batch_size: int = 256) -> MethodResult:
    if config.needs_estimator and estimator is None:
        raise ValueError(f"{config.label()} needs an MI estimator checkpoint")
    start = time.perf_counter()
    solved: list[bool] = []
    passes: list[int] = []
    backbone: list[int] = []
    head: list[int] = []
    for lo in range(0, len(puzzles), batch_size):
        chunk = puzzles[lo:lo + batch_size]
        states = [state_from_puzzle(p) for p in chunk]
        seeds = [puzzle_seed(p, seed) for p in chunk]
        nfe0 = mdm.nfe
        head0 = estimator.calls if estimator is not None else 0
        traces = decode_batch(mdm, estimator, states, config, seeds)
        used = sum(t.backbone_nfe for t in traces)
        if mdm.nfe - nfe0 != used:
            raise NFEMismatch(f"backbone counter moved by {mdm.nfe - nfe0}, traces claim {used}")
        for tr in traces:
            if tr.backbone_nfe != tr.n_passes:
                raise NFEMismatch("backbone NFE differs from pass count")
            want_head = tr.n_passes if config.needs_estimator else 0
            if tr.head_nfe != want_head:
                raise NFEMismatch("head NFE differs from pass count")
        if estimator is not None and estimator.calls - head0 != sum(t.head_nfe for t in traces):
            raise NFEMismatch("head counter disagrees with traces")
        for rec, tr in zip(chunk, traces):
            solved.append(check_solution(rec, board_from_state(tr.final_state, rec.box_size)))
            passes.append(tr.n_passes)
            backbone.append(tr.backbone_nfe)
            head.append(tr.head_nfe)
    n = len(puzzles)
    k = int(sum(solved))
    lo_ci, hi_ci = wilson_interval(k, n)
    return MethodResult(
        method=name or config.label(),
        config={"strategy": config.strategy, "k": config.k, "gamma": config.gamma,
                "lambda": config.lam, "commit": config.commit},
        n_puzzles=n,
        avg_passes=float(np.mean(passes)) if n else 0.0,
        avg_backbone_nfe=float(np.mean(backbone)) if n else 0.0,
        avg_head_nfe=float(np.mean(head)) if n else 0.0,
        accuracy=k / n if n else 0.0,
        ci_low=lo_ci,
        ci_high=hi_ci,
        wall_time=time.perf_counter() - start,
        solved=solved,
    )


def run_benchmark(mdm, estimator, puzzles: Sequence[PuzzleRecord], configs: Sequence[SamplerConfig] | dict,
                  seed: int = 0, exclude_hashes: Iterable[str] | None = None) -> BenchmarkReport:
    """Decode every puzzle under every config.

    ``configs`` is a list or a ``{name: config}`` mapping. Puzzles whose
    content hash appears in ``exclude_hashes`` (the training split) are an
    error, not silently dropped.
    """
    if exclude_hashes is not None:
        banned = set(exclude_hashes)
        leaked = sum(p.content_hash() in banned for p in puzzles)
        if leaked:
            raise ValueError(f"{leaked} evaluation puzzles appear in the training split")
    items = configs.items() if isinstance(configs, dict) else [(None, c) for c in configs]
    for _, cfg in items:
        if cfg.needs_estimator and estimator is None:
            raise ValueError(f"{cfg.label()} needs an MI estimator checkpoint")
    rows = [run_method(mdm, estimator, puzzles, cfg, seed, name) for name, cfg in items]
    empty = float(np.mean([len(p.holes) for p in puzzles])) if puzzles else 0.0
    return BenchmarkReport(rows, len(puzzles), empty, seed)


# ------------------------------------------------------------------ MI maps


def export_mi_map(state: SequenceState, mi: MIMatrix, path, box_size: int | None = None,
                  label: str = "") -> tuple[Path, Path]:
    """Dense N x N CSV in nats plus a JSON sidecar describing the board."""
    path = Path(path)
    n = state.n
    if mi.values.shape != (n, n):
        raise ValueError("MI matrix does not match the state length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in mi.values:
            w.writerow([repr(float(x)) for x in row])
    side = path.with_suffix(path.suffix + ".json")
    if box_size is None:
        box_size = int(round(n ** 0.25))
    dump_json(
        {
            "n": n,
            "box_size": box_size,
            "side": box_size * box_size,
            "tokens": [None if m else int(t) + 1 for t, m in zip(state.tokens, state.mask_flags)],
            "masked": [int(i) for i in state.masked_indices()],
            "units": "nats",
            "label": label,
            "max_mi": float(mi.values.max(initial=0.0)),
        },
        side,
    )
    return path, side


def read_mi_map(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh)])


def write_mi_pairs_csv(mi: MIMatrix, path) -> None:
    """Long-form ``row,col,nats`` listing of the upper triangle."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "nats"])
        n = mi.n
        for i in range(n):
            for j in range(i + 1, n):
                w.writerow([i, j, repr(float(mi.values[i, j]))])


# ------------------------------------------------------------------ k-mer JSD


def kmer_histogram(seqs: Iterable[Sequence], k: int) -> Counter:
    counts: Counter = Counter()
    for s in seqs:
        s = tuple(s)
        for i in range(len(s) - k + 1):
            counts[s[i:i + k]] += 1
    return counts


def kmer_jsd(generated: Sequence[Sequence], reference: Sequence[Sequence], k: int) -> float:
    """Jensen-Shannon divergence (nats) between k-mer frequency histograms.

    Adapted metric: the histograms stand in for embedding-cluster occupancies.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not generated or not reference:
        raise ValueError("both sequence sets must be non-empty")
    hp, hq = kmer_histogram(generated, k), kmer_histogram(reference, k)
    if not hp or not hq:
        raise ValueError("no sequence is at least k long")
    support = sorted(set(hp) | set(hq))
    p = np.array([hp[s] for s in support], dtype=np.float64)
    q = np.array([hq[s] for s in support], dtype=np.float64)
    return jsd(p / p.sum(), q / q.sum())


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)
    return float(0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum())
