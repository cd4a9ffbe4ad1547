"""Dataset generation with splits, and the end-to-end desk run on 4x4 boards."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mimdm.estimator import (
    EstimatorConfig,
    EstimatorTrainConfig,
    MIEstimator,
    build_mi_dataset,
    constant_baseline_mse,
    evaluate_mse,
    train_estimator,
)
from mimdm.io import load_checkpoint, save_checkpoint
from mimdm.mdm import MaskedDiffusionModel, ModelConfig, TrainConfig, train_mdm
from mimdm.sudoku import PuzzleRecord, generate_complete_grid, punch_holes

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def parse_holes(value: str | int, n_cells: int) -> tuple[int, int]:
    """``"12"`` or ``"4-16"`` to an inclusive range, checked against the board size."""
    text = str(value).strip()
    try:
        if "-" in text:
            a, b = text.split("-", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ValueError(f"cannot read hole count {value!r}") from None
    if not 0 <= lo <= hi <= n_cells:
        raise ValueError(f"hole count {value!r} outside 0..{n_cells}")
    return lo, hi


def generate_puzzles(box_size: int, count: int, holes: tuple[int, int], seed: int,
                     exclude: set[str] | None = None, max_tries: int | None = None) -> list[PuzzleRecord]:
    """``count`` distinct puzzles; hole counts uniform over the inclusive range.

    Attempt ``a`` uses grid seed ``[seed, a]``, so the output depends only on
    the arguments. Hashes in ``exclude`` are skipped.
    """
    exclude = exclude or set()
    seen: set[str] = set()
    out: list[PuzzleRecord] = []
    tries = max_tries if max_tries is not None else 50 * count + 100
    lo, hi = holes
    for a in range(tries):
        if len(out) == count:
            break
        rng = np.random.default_rng([seed, a])
        grid = generate_complete_grid(box_size, int(rng.integers(2**63)))
        rec = punch_holes(grid, int(rng.integers(lo, hi + 1)), int(rng.integers(2**63)))
        h = rec.content_hash()
        if h in seen or h in exclude:
            continue
        seen.add(h)
        out.append(rec)
    if len(out) < count:
        raise ValueError(f"only {len(out)} distinct puzzles found for count={count}, holes={lo}-{hi}")
    return out


def assign_splits(records: Sequence[PuzzleRecord], val_frac: float, test_frac: float, seed: int) -> dict[str, list[str]]:
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise ValueError("split fractions must be non-negative and sum below 1")
    n = len(records)
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_val, n_test = int(round(n * val_frac)), int(round(n * test_frac))
    parts = {"val": order[:n_val], "test": order[n_val:n_val + n_test], "train": order[n_val + n_test:]}
    return {k: [records[i].content_hash() for i in sorted(parts[k])] for k in SPLITS}


def select_split(records: Sequence[PuzzleRecord], manifest: dict, split: str) -> list[PuzzleRecord]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    keep = set(manifest["splits"][split])
    return [r for r in records if r.content_hash() in keep]


# ------------------------------------------------------------------ desk run


@dataclass
class DeskConfig:
    """Everything needed to reproduce the 4x4 end-to-end run."""
    n_train: int = 20000
    train_holes: tuple[int, int] = (4, 16)
    n_test: int = 500
    test_holes: int = 12
    data_seed: int = 0
    test_seed: int = 1
    model: ModelConfig = field(default_factory=lambda: ModelConfig.for_sudoku(2))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, batch_size=64, lr=2e-3, warmup_steps=100))
    mi_puzzles: int = 4000
    mi_samples: int = 2
    mi_seed: int = 1
    mi_val_frac: float = 0.1
    estimator: EstimatorConfig = field(default_factory=lambda: EstimatorConfig(64, d_proj=32, hidden=128))
    est_train: EstimatorTrainConfig = field(default_factory=lambda: EstimatorTrainConfig(epochs=10, batch_size=32))


@dataclass
class DeskRun:
    mdm: MaskedDiffusionModel
    estimator: MIEstimator
    train: list[PuzzleRecord]
    test: list[PuzzleRecord]
    est_val_mse: float
    est_baseline_mse: float
    est_history: list
    timings: dict[str, float]
    mi_examples: list = field(default_factory=list, repr=False)


def run_desk(cfg: DeskConfig, workdir=None) -> DeskRun:
    """Train backbone then MI head, reusing checkpoints already in ``workdir``."""
    timings: dict[str, float] = {}
    train = generate_puzzles(2, cfg.n_train, cfg.train_holes, cfg.data_seed)
    banned = {r.content_hash() for r in train}
    test = generate_puzzles(2, cfg.n_test, (cfg.test_holes, cfg.test_holes), cfg.test_seed, exclude=banned)

    wd = Path(workdir) if workdir is not None else None
    mdm_dir = wd / "mdm" if wd else None
    t0 = time.perf_counter()
    if mdm_dir is not None and (mdm_dir / "manifest.json").exists():
        man, store = load_checkpoint(mdm_dir, "mdm")
        mdm = MaskedDiffusionModel(ModelConfig(**man["config"]), store)
    else:
        mdm = MaskedDiffusionModel(cfg.model)
        train_mdm(mdm, train, cfg.train)
        if mdm_dir is not None:
            save_checkpoint(mdm_dir, "mdm", asdict(cfg.model), mdm.store, lineage={"train": asdict(cfg.train)})
    timings["mdm"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    examples = build_mi_dataset(mdm, train[:cfg.mi_puzzles], cfg.mi_samples, seed=cfg.mi_seed)
    timings["mi_data"] = time.perf_counter() - t0
    n_val = int(round(len(examples) * cfg.mi_val_frac))
    val, tr = examples[:n_val], examples[n_val:]

    t0 = time.perf_counter()
    est = MIEstimator(cfg.estimator)
    history = train_estimator(est, tr, val, cfg.est_train)
    timings["estimator"] = time.perf_counter() - t0
    mdm.nfe = 0
    return DeskRun(mdm, est, train, test, evaluate_mse(est, val), constant_baseline_mse(val), history, timings, examples)
