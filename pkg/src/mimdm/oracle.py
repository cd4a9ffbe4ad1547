"""Exact pairwise conditional mutual information from model conditionals.

Two independent routes are provided:

* ``ground_truth_mi`` probes any model exposing ``forward_marginals`` /
  ``forward_marginals_batch``: one base pass, then one pass per (masked
  position, symbol) with that position pinned, and MI as the reduction in the
  entropy of ``X_j`` once ``X_i`` is known.
* ``enumerate_mi_exact`` marginalises an explicit joint table and evaluates the
  KL form of MI directly. It only works for ``MockJointModel``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from mimdm.mdm import Marginals, SequenceState, entropy_rows

PROBE_CHUNK = 512


@dataclass
class MIMatrix:
    values: np.ndarray
    masked_set: np.ndarray
    raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, n: int, masked_set=()) -> "MIMatrix":
        return cls(np.zeros((n, n)), np.asarray(masked_set, dtype=np.int64))

    def check(self, tol: float = 1e-12) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("MI matrix must be square")
        if np.abs(v - v.T).max(initial=0.0) > tol:
            raise ValueError("MI matrix is not symmetric")
        if v.min(initial=0.0) < 0:
            raise ValueError("MI matrix has negative entries")
        if np.any(np.diag(v) != 0):
            raise ValueError("MI matrix diagonal must be zero")
        outside = np.ones(self.n, dtype=bool)
        outside[self.masked_set] = False
        if np.any(v[outside] != 0) or np.any(v[:, outside] != 0):
            raise ValueError("MI matrix has entries outside the masked set")


def finalize_mi(raw: np.ndarray, masked_set: np.ndarray) -> MIMatrix:
    """Symmetrise, clamp at zero, zero the diagonal and everything off the masked set."""
    n = raw.shape[0]
    keep = np.zeros(n, dtype=bool)
    keep[masked_set] = True
    m = np.where(keep[:, None] & keep[None, :], raw, 0.0)
    m = np.maximum(0.5 * (m + m.T), 0.0)
    np.fill_diagonal(m, 0.0)
    return MIMatrix(m, np.asarray(masked_set, dtype=np.int64), raw=raw)


@dataclass
class ProbedConditionals:
    """Base marginals and, for every masked ``i`` and symbol ``v``, ``P(X_. | X_i=v, C)``.

    ``cond[a, v]`` is the (N, V) table obtained with ``masked[a]`` pinned to ``v``.
    """

    base: np.ndarray
    masked: np.ndarray
    cond: np.ndarray
    hidden: np.ndarray | None = None

    def __post_init__(self):
        self._slot = {int(i): a for a, i in enumerate(self.masked)}

    @property
    def empty(self) -> bool:
        return self.cond.size == 0

    def conditional(self, i: int, v: int) -> np.ndarray:
        return self.cond[self._slot[int(i)], v]


def probe_conditionals(model, state: SequenceState) -> ProbedConditionals:
    """Base pass plus ``m * |V|`` pinned passes (``m`` masked positions)."""
    state = state.copy()
    first = model.forward_marginals(state)
    base = first.probs
    masked = state.masked_indices()
    v = state.vocab_size
    if masked.size < 2:
        return ProbedConditionals(base, masked, np.zeros((0, v, state.n, v)), first.hidden)
    probes = [state.with_value(int(i), s) for i in masked for s in range(v)]
    tables = []
    for lo in range(0, len(probes), PROBE_CHUNK):
        tables.extend(m.probs for m in model.forward_marginals_batch(probes[lo:lo + PROBE_CHUNK]))
    cond = np.stack(tables).reshape(masked.size, v, state.n, v)
    return ProbedConditionals(base, masked, cond, first.hidden)


def conditional_entropy_reduction(probes: ProbedConditionals, i: int, j: int) -> float:
    """``H(X_j | C) - sum_v P(X_i=v | C) H(X_j | X_i=v, C)``; may dip below 0."""
    if i == j:
        raise ValueError("i and j must differ")
    h_j = entropy_rows(probes.base[j])
    weights = probes.base[i]
    h_cond = sum(
        weights[v] * entropy_rows(probes.conditional(i, v)[j]) for v in range(weights.size)
    )
    return float(h_j - h_cond)


def entropy_reduction_matrix(probes: ProbedConditionals) -> np.ndarray:
    """Raw (unsymmetrised) entropy reductions; row ``i`` is the pinned position."""
    n = probes.base.shape[0]
    raw = np.zeros((n, n))
    if probes.empty:
        return raw
    m = probes.masked
    h_base = entropy_rows(probes.base)  # (N,)
    h_cond = entropy_rows(probes.cond)  # (m, V, N)
    expected = np.einsum("av,avn->an", probes.base[m], h_cond)
    raw[np.ix_(m, m)] = h_base[m][None, :] - expected[:, m]
    np.fill_diagonal(raw, 0.0)
    return raw


def ground_truth_mi(model, state: SequenceState) -> MIMatrix:
    probes = probe_conditionals(model, state)
    return finalize_mi(entropy_reduction_matrix(probes), probes.masked)


# ------------------------------------------------------------ explicit joints


class ZeroProbabilityContext(ValueError):
    pass


class MockJointModel:
    """A model whose marginals come from exact marginalisation of a joint table.

    ``table`` has shape ``(V,) * n``. Marginals for a context with zero
    probability fall back to uniform rows at masked positions.
    """

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        v = table.shape[0]
        if any(s != v for s in table.shape):
            raise ValueError("joint table must have equal-length axes")
        if table.min() < 0 or abs(table.sum() - 1.0) > 1e-12:
            raise ValueError("joint table must be a probability distribution")
        self.table = table
        self.n = table.ndim
        self.vocab_size = v
        self.nfe = 0

    def conditioned(self, state: SequenceState) -> np.ndarray:
        """Unnormalised table restricted to outcomes consistent with the context."""
        if state.n != self.n or state.vocab_size != self.vocab_size:
            raise ValueError("state does not match the joint's shape")
        idx = tuple(slice(None) if state.mask_flags[k] else int(state.tokens[k]) for k in range(self.n))
        sub = np.zeros_like(self.table)
        sub[idx] = self.table[idx]
        return sub

    def forward_marginals(self, state: SequenceState) -> Marginals:
        self.nfe += 1
        sub = self.conditioned(state)
        z = sub.sum()
        v = self.vocab_size
        probs = np.empty((self.n, v))
        for k in range(self.n):
            if not state.mask_flags[k]:
                probs[k] = np.eye(v)[state.tokens[k]]
            elif z > 0:
                axes = tuple(a for a in range(self.n) if a != k)
                probs[k] = sub.sum(axis=axes) / z
            else:
                probs[k] = 1.0 / v
        return Marginals(probs, np.zeros((self.n, 0)))

    def forward_marginals_batch(self, states) -> list[Marginals]:
        return [self.forward_marginals(s) for s in states]

    # constructors -----------------------------------------------------------

    @classmethod
    def random(cls, n: int, vocab: int, rng: np.random.Generator, concentration: float = 1.0):
        t = rng.dirichlet(np.full(vocab**n, concentration)).reshape((vocab,) * n)
        return cls(t / t.sum())

    @classmethod
    def product(cls, marginals: list[np.ndarray]):
        t = marginals[0]
        for p in marginals[1:]:
            t = np.multiply.outer(t, p)
        return cls(t / t.sum())

    @classmethod
    def copy_channel(cls, vocab: int = 2):
        return cls(np.eye(vocab) / vocab)

    @classmethod
    def xor3(cls):
        t = np.zeros((2, 2, 2))
        for a, b in itertools.product(range(2), repeat=2):
            t[a, b, a ^ b] = 0.25
        return cls(t)


def enumerate_mi_exact(joint: MockJointModel, state: SequenceState) -> MIMatrix:
    """Pairwise MI by brute-force marginalisation and the direct double sum."""
    if joint.table.size > 4096:
        raise ValueError("joint too large to enumerate")
    sub = joint.conditioned(state)
    z = sub.sum()
    if z <= 0:
        raise ZeroProbabilityContext("zero-probability context")
    p = sub / z
    masked = state.masked_indices()
    out = np.zeros((joint.n, joint.n))
    for i, j in itertools.combinations(masked.tolist(), 2):
        axes = tuple(a for a in range(joint.n) if a not in (i, j))
        pij = p.sum(axis=axes)  # axes kept in (i, j) order since i < j
        pi = pij.sum(axis=1)
        pj = pij.sum(axis=0)
        mi = 0.0
        for a in range(joint.vocab_size):
            for b in range(joint.vocab_size):
                if pij[a, b] > 0:
                    mi += pij[a, b] * np.log(pij[a, b] / (pi[a] * pj[b]))
        out[i, j] = out[j, i] = mi
    return MIMatrix(out, masked)


def joint_entropy_pair(joint: MockJointModel, state: SequenceState, i: int, j: int) -> float:
    """``H(X_i, X_j | C)`` by enumeration."""
    sub = joint.conditioned(state)
    p = sub / sub.sum()
    axes = tuple(a for a in range(joint.n) if a not in (i, j))
    pij = p.sum(axis=axes).reshape(-1)
    return float(entropy_rows(pij))
