"""Masked diffusion model over fixed-length token sequences.

Tokens ``0..V-1`` are data symbols and ``V`` is the absorbing mask token. The
denoiser is a bidirectional transformer whose per-position softmax over the
``V`` data symbols is the model's belief ``p(x_0^i | x_t)``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from mimdm import nn
from mimdm.nn.layers import EncoderShape, encoder_forward, init_encoder
from mimdm.sudoku import Board, PuzzleRecord

log = logging.getLogger(__name__)


@dataclass
class SequenceState:
    """Token sequence ``x_t`` with mask flags; unmasked positions form the context."""

    tokens: np.ndarray
    mask_flags: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).copy()
        self.mask_flags = np.asarray(self.mask_flags, dtype=bool).copy()
        if self.tokens.shape != self.mask_flags.shape or self.tokens.ndim != 1:
            raise ValueError("tokens and mask_flags must be equal-length vectors")
        if not np.array_equal(self.tokens == self.mask_id, self.mask_flags):
            raise ValueError("tokens must equal the mask id exactly where masked")
        if np.any(self.tokens < 0) or np.any(self.tokens > self.vocab_size):
            raise ValueError("token id out of range")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def n(self) -> int:
        return self.tokens.size

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask_flags)

    def copy(self) -> "SequenceState":
        return SequenceState(self.tokens, self.mask_flags, self.vocab_size)

    def with_value(self, i: int, v: int) -> "SequenceState":
        """Copy with position ``i`` unmasked and set to symbol ``v``."""
        out = self.copy()
        out.tokens[i] = v
        out.mask_flags[i] = False
        return out

    @classmethod
    def from_symbols(cls, symbols: Sequence[int | None], vocab_size: int) -> "SequenceState":
        toks = [vocab_size if s is None else int(s) for s in symbols]
        return cls(np.array(toks), np.array([s is None for s in symbols]), vocab_size)


def state_from_puzzle(record: PuzzleRecord) -> SequenceState:
    """Clues become context, holes are masked. Digit ``d`` maps to token ``d-1``."""
    clues = record.clues.cells
    v = record.box_size**2
    tokens = np.where(clues == 0, v, clues - 1)
    return SequenceState(tokens, clues == 0, v)


def clean_state(board: Board) -> SequenceState:
    v = board.side
    return SequenceState(board.cells - 1, np.zeros(board.n_cells, dtype=bool), v)


def board_from_state(state: SequenceState, box_size: int) -> Board:
    cells = np.where(state.mask_flags, 0, state.tokens + 1)
    return Board(box_size, cells)


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "linear"

    def gamma(self, t: float) -> float:
        """Masking probability at time ``t``."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        if self.kind != "linear":
            raise ValueError(f"unknown schedule {self.kind!r}")
        return float(t)


LINEAR = NoiseSchedule()


def gamma(schedule: NoiseSchedule, t: float) -> float:
    return schedule.gamma(t)


def apply_forward_mask(
    x0: SequenceState,
    t: float,
    rng: np.random.Generator,
    pinned: np.ndarray | None = None,
    schedule: NoiseSchedule = LINEAR,
) -> SequenceState:
    """Mask each non-pinned position independently with probability gamma(t)."""
    p = schedule.gamma(t)
    hit = rng.random(x0.n) < p
    if pinned is not None:
        hit &= ~np.asarray(pinned, dtype=bool)
    hit &= ~x0.mask_flags
    out = x0.copy()
    out.tokens[hit] = x0.mask_id
    out.mask_flags |= hit
    return out


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @classmethod
    def for_sudoku(cls, box_size: int, seed: int = 0, **overrides) -> "ModelConfig":
        if box_size == 2:
            base = dict(d_model=64, n_layers=4, n_heads=4, d_ff=256)
        else:
            base = dict(d_model=128, n_layers=6, n_heads=8, d_ff=2048)
        base.update(overrides)
        return cls(vocab_size=box_size**2, seq_len=box_size**4, seed=seed, **base)

    def encoder_shape(self) -> EncoderShape:
        return EncoderShape(
            vocab_in=self.vocab_size + 1,
            vocab_out=self.vocab_size,
            seq_len=self.seq_len,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
        )


@dataclass
class Marginals:
    probs: np.ndarray  # (N, V)
    hidden: np.ndarray  # (N, D)


class MaskedDiffusionModel:
    """Transformer denoiser plus an NFE counter.

    ``nfe`` counts sequences pushed through the backbone: a batched call on
    ``B`` states adds ``B``.
    """

    def __init__(self, config: ModelConfig, store: nn.ParamStore | None = None):
        self.config = config
        self.shape = config.encoder_shape()
        if store is None:
            store = nn.ParamStore()
            init_encoder(store, self.shape, np.random.default_rng(config.seed))
        self.store = store
        self.nfe = 0

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def logits(self, tokens: np.ndarray) -> tuple[nn.Tensor, nn.Tensor]:
        return encoder_forward(self.store, self.shape, tokens)

    def forward_tokens(self, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched inference on ids of shape (B, N).

        Returns ``(probs, hidden)``; rows at unmasked positions are one-hot on
        the observed token.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        with nn.no_grad():
            logits, hidden = self.logits(tokens)
        self.nfe += tokens.shape[0]
        z = logits.data
        z = z - z.max(axis=-1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=-1, keepdims=True)
        observed = tokens != self.vocab_size
        if observed.any():
            probs[observed] = np.eye(self.vocab_size)[tokens[observed]]
        return probs, hidden.data

    def forward_marginals(self, state: SequenceState) -> Marginals:
        probs, hidden = self.forward_tokens(state.tokens[None, :])
        return Marginals(probs[0], hidden[0])

    def forward_marginals_batch(self, states: Sequence[SequenceState]) -> list[Marginals]:
        if not states:
            return []
        probs, hidden = self.forward_tokens(np.stack([s.tokens for s in states]))
        return [Marginals(p, h) for p, h in zip(probs, hidden)]


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


def entropy_per_position(marginals: Marginals) -> np.ndarray:
    return entropy_rows(marginals.probs)


def mdm_loss(model: MaskedDiffusionModel, x0: np.ndarray, xt: np.ndarray) -> nn.Tensor:
    """Batch mean of the masked-position cross-entropy sum.

    ``x0`` holds clean ids (B, N) and ``xt`` the corrupted ids (B, N).
    """
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    logits, _ = model.logits(xt)
    ce = nn.cross_entropy_masked(logits, x0, xt == model.vocab_size)
    return nn.scale(ce, 1.0 / x0.shape[0])


def corrupt_batch(
    x0: np.ndarray,
    pinned: np.ndarray,
    rng: np.random.Generator,
    mask_id: int,
    t: np.ndarray | None = None,
    schedule: NoiseSchedule = LINEAR,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised forward process for a (B, N) batch; returns ``(xt, t)``."""
    bsz, n = x0.shape
    if t is None:
        t = rng.random(bsz)
    p = np.array([schedule.gamma(float(tt)) for tt in t])
    hit = (rng.random((bsz, n)) < p[:, None]) & ~pinned
    return np.where(hit, mask_id, x0), t


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    warmup_steps: int = 200
    min_lr_ratio: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay down to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, total - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def clip_grads(store: nn.ParamStore, max_norm: float) -> float:
    sq = sum(float((p.grad * p.grad).sum()) for _, p in store.items())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        for _, p in store.items():
            p.grad *= f
    return norm


def puzzle_arrays(puzzles: Sequence[PuzzleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Clean ids (B, N) and pinned-clue flags (B, N)."""
    x0 = np.stack([p.solution.cells - 1 for p in puzzles])
    pinned = np.stack([p.clues.cells != 0 for p in puzzles])
    return x0, pinned


@dataclass
class TrainResult:
    model: MaskedDiffusionModel
    losses: list[tuple[int, float]] = field(default_factory=list)


def train_mdm(
    model: MaskedDiffusionModel,
    puzzles: Sequence[PuzzleRecord],
    cfg: TrainConfig,
    metrics_path=None,
    on_epoch: Callable[[int, MaskedDiffusionModel], None] | None = None,
) -> TrainResult:
    """Minimise the masked cross-entropy with Adam.

    Resumes from ``model.store.step`` when the store already carries optimizer
    state. Each step draws ``t ~ U(0, 1)`` per example.
    """
    if not puzzles:
        raise ValueError("training set is empty")
    x0_all, pinned_all = puzzle_arrays(puzzles)
    n = len(puzzles)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    store = model.store
    mask_id = model.vocab_size
    result = TrainResult(model)
    writer = None
    fh = None
    if metrics_path is not None:
        new = store.step == 0
        fh = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "loss"])
    try:
        start_epoch = store.step // steps_per_epoch
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            skip = store.step - epoch * steps_per_epoch
            for b in range(max(0, skip), steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x0 = x0_all[idx]
                rng = np.random.default_rng([cfg.seed, epoch, b])
                xt, _ = corrupt_batch(x0, pinned_all[idx], rng, mask_id)
                store.zero_grad()
                loss = mdm_loss(model, x0, xt)
                loss.backward()
                if not np.isfinite(loss.data) or not store.grads_finite():
                    raise nn.NumericError(f"non-finite loss at step {store.step}")
                clip_grads(store, cfg.grad_clip)
                nn.adam_step(store, lr=lr_at(store.step, total, cfg))
                value = float(loss.data)
                result.losses.append((store.step, value))
                if writer is not None:
                    writer.writerow([store.step, repr(value)])
            log.info("epoch %d done, last loss %.4f", epoch + 1, result.losses[-1][1] if result.losses else float("nan"))
            if on_epoch is not None:
                on_epoch(epoch, model)
    finally:
        if fh is not None:
            fh.close()
    return result


def heldout_loss(model: MaskedDiffusionModel, puzzles: Sequence[PuzzleRecord], seed: int = 0) -> float:
    x0, pinned = puzzle_arrays(puzzles)
    rng = np.random.default_rng(seed)
    xt, _ = corrupt_batch(x0, pinned, rng, model.vocab_size)
    with nn.no_grad():
        return float(mdm_loss(model, x0, xt).data)


def masked_token_accuracy(
    model: MaskedDiffusionModel,
    puzzles: Sequence[PuzzleRecord],
    t_max: float = 0.3,
    seed: int = 0,
    repeats: int = 1,
) -> float:
    """Argmax accuracy on masked positions with ``t ~ U(0, t_max)``."""
    x0, pinned = puzzle_arrays(puzzles)
    rng = np.random.default_rng(seed)
    hits = total = 0
    for _ in range(repeats):
        t = rng.random(len(puzzles)) * t_max
        xt, _ = corrupt_batch(x0, pinned, rng, model.vocab_size, t=t)
        probs, _ = model.forward_tokens(xt)
        masked = xt == model.vocab_size
        hits += int((probs.argmax(-1) == x0)[masked].sum())
        total += int(masked.sum())
    return hits / max(total, 1)


def config_dict(cfg) -> dict:
    return asdict(cfg)
