"""Pairwise MI head on frozen backbone hidden states.

Each position's hidden state goes through a two-layer MLP to an embedding
``u_i``; the predicted MI for a pair is ``softplus(u_i . u_j / sqrt(d_p) + c)``.
The score matrix is symmetrised before the softplus, so predictions are
exactly symmetric and non-negative.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mimdm import nn
from mimdm.mdm import MaskedDiffusionModel, apply_forward_mask, clean_state
from mimdm.oracle import MIMatrix, entropy_reduction_matrix, finalize_mi, probe_conditionals
from mimdm.sudoku import PuzzleRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    d_in: int
    d_proj: int = 32
    hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d_proj < 1 or self.hidden < 1:
            raise ValueError("d_proj and hidden must be positive")


def pair_mask(masked: np.ndarray) -> np.ndarray:
    """(..., N, N) float mask of ordered masked pairs, diagonal excluded."""
    m = np.asarray(masked, dtype=bool)
    pm = (m[..., :, None] & m[..., None, :]).astype(np.float64)
    n = m.shape[-1]
    pm[..., np.arange(n), np.arange(n)] = 0.0
    return pm


def masked_flags(n: int, masked_set) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    flags[np.asarray(masked_set, dtype=np.int64)] = True
    return flags


class MIEstimator:
    def __init__(self, config: EstimatorConfig, store: nn.ParamStore | None = None):
        self.config = config
        if store is None:
            rng = np.random.default_rng(config.seed)
            store = nn.ParamStore()
            d, h, p = config.d_in, config.hidden, config.d_proj
            store.add("w1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, h)))
            store.add("b1", np.zeros(h))
            store.add("w2", rng.normal(0.0, 1.0 / math.sqrt(h), (h, p)))
            store.add("b2", np.zeros(p))
            store.add("c", np.array([-3.0]))
        self.store = store
        self.calls = 0

    def forward(self, hidden: np.ndarray, masked: np.ndarray) -> nn.Tensor:
        """Predicted MI for a batch: hidden (B, N, D), masked flags (B, N)."""
        hidden = np.asarray(hidden, dtype=np.float64)
        if hidden.ndim != 3 or hidden.shape[-1] != self.config.d_in:
            raise nn.ShapeError(f"expected (B, N, {self.config.d_in}) hidden states, got {hidden.shape}")
        s = self.store
        u = nn.gelu(nn.add(nn.matmul(nn.Tensor(hidden), s["w1"]), s["b1"]))
        u = nn.add(nn.matmul(u, s["w2"]), s["b2"])
        scores = nn.scale(nn.matmul(u, nn.transpose(u, (0, 2, 1))), 1.0 / math.sqrt(self.config.d_proj))
        scores = nn.scale(nn.add(scores, nn.transpose(scores, (0, 2, 1))), 0.5)
        out = nn.softplus(nn.add(scores, s["c"]))
        return nn.mul(out, nn.Tensor(pair_mask(masked)))

    def predict_batch(self, hidden: np.ndarray, masked: np.ndarray) -> np.ndarray:
        with nn.no_grad():
            out = self.forward(hidden, masked).data
        self.calls += out.shape[0]
        return out

    def predict_mi(self, hidden: np.ndarray, masked_set) -> MIMatrix:
        hidden = np.asarray(hidden)
        if hidden.ndim != 2:
            raise nn.ShapeError(f"expected (N, D) hidden states, got {hidden.shape}")
        flags = masked_flags(hidden.shape[0], masked_set)
        values = self.predict_batch(hidden[None], flags[None])[0]
        return MIMatrix(values, np.flatnonzero(flags))


def estimator_loss(pred: MIMatrix, target: MIMatrix, masked_set) -> float:
    """Mean squared error over unordered masked pairs."""
    idx = np.asarray(sorted(int(i) for i in masked_set), dtype=np.int64)
    if idx.size < 2:
        return 0.0
    iu, ju = np.triu_indices(idx.size, k=1)
    d = pred.values[idx[iu], idx[ju]] - target.values[idx[iu], idx[ju]]
    return float(np.mean(d * d))


def batch_loss(pred: nn.Tensor, target: np.ndarray, masked: np.ndarray) -> nn.Tensor:
    """Pooled pair MSE for a batch; each unordered pair counted once."""
    w = np.triu(pair_mask(masked))
    count = w.sum()
    if count == 0:
        return nn.scale(nn.total(pred), 0.0)
    diff = nn.sub(pred, nn.Tensor(target))
    return nn.scale(nn.total(nn.mul(nn.mul(diff, diff), nn.Tensor(w))), 1.0 / count)


@dataclass
class MITrainingExample:
    hidden: np.ndarray  # (N, D)
    masked: np.ndarray  # (N,) bool
    target: np.ndarray  # (N, N) nats
    t: float = float("nan")
    oracle_nfe: int = 0

    @property
    def masked_set(self) -> np.ndarray:
        return np.flatnonzero(self.masked)


def build_mi_dataset(
    model: MaskedDiffusionModel,
    puzzles: Sequence[PuzzleRecord],
    samples_per_puzzle: int,
    t_range: tuple[float, float] = (0.0, 1.0),
    seed: int = 0,
) -> list[MITrainingExample]:
    """Oracle MI targets on randomly noised solutions; clues stay pinned."""
    out = []
    lo, hi = t_range
    for k, rec in enumerate(puzzles):
        rng = np.random.default_rng([seed, k])
        x0 = clean_state(rec.solution)
        pinned = rec.clues.cells != 0
        for _ in range(samples_per_puzzle):
            t = float(lo + (hi - lo) * rng.random())
            xt = apply_forward_mask(x0, t, rng, pinned=pinned)
            before = model.nfe
            probes = probe_conditionals(model, xt)
            mi = finalize_mi(entropy_reduction_matrix(probes), probes.masked)
            out.append(
                MITrainingExample(
                    hidden=probes.hidden,
                    masked=xt.mask_flags.copy(),
                    target=mi.values,
                    t=t,
                    oracle_nfe=model.nfe - before,
                )
            )
    return out


def stack_examples(examples: Sequence[MITrainingExample]):
    h = np.stack([e.hidden for e in examples])
    m = np.stack([e.masked for e in examples])
    y = np.stack([e.target for e in examples])
    return h, m, y


def pooled_mse(pred: np.ndarray, target: np.ndarray, masked: np.ndarray) -> float:
    w = np.triu(pair_mask(masked))
    count = w.sum()
    return float(((pred - target) ** 2 * w).sum() / count) if count else 0.0


def constant_baseline_mse(examples: Sequence[MITrainingExample]) -> float:
    """MSE of the best constant predictor (the pair-pooled target mean) on ``examples``."""
    _, m, y = stack_examples(examples)
    w = np.triu(pair_mask(m))
    vals = y[w > 0]
    return float(np.mean((vals - vals.mean()) ** 2)) if vals.size else 0.0


def evaluate_mse(est: MIEstimator, examples: Sequence[MITrainingExample], batch_size: int = 256) -> float:
    num = den = 0.0
    for lo in range(0, len(examples), batch_size):
        h, m, y = stack_examples(examples[lo:lo + batch_size])
        with nn.no_grad():
            pred = est.forward(h, m).data
        w = np.triu(pair_mask(m))
        num += float(((pred - y) ** 2 * w).sum())
        den += float(w.sum())
    return num / den if den else 0.0


@dataclass
class EstimatorTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def train_estimator(
    est: MIEstimator,
    train: Sequence[MITrainingExample],
    val: Sequence[MITrainingExample],
    cfg: EstimatorTrainConfig,
) -> list[tuple[int, float, float]]:
    """Adam on the pooled pair MSE. Returns ``(epoch, train_mse, val_mse)`` rows."""
    if not train:
        raise ValueError("estimator training set is empty")
    h_all, m_all, y_all = stack_examples(train)
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        num = den = 0.0
        for lo in range(0, len(train), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            est.store.zero_grad()
            loss = batch_loss(est.forward(h_all[idx], m_all[idx]), y_all[idx], m_all[idx])
            loss.backward()
            if not np.isfinite(loss.data):
                raise nn.NumericError("non-finite estimator loss")
            nn.adam_step(est.store, lr=cfg.lr)
            cnt = float(np.triu(pair_mask(m_all[idx])).sum())
            num += float(loss.data) * cnt
            den += cnt
        val_mse = evaluate_mse(est, val) if val else float("nan")
        history.append((epoch + 1, num / den if den else 0.0, val_mse))
        log.info("estimator epoch %d train %.5f val %.5f", epoch + 1, history[-1][1], val_mse)
    return history
