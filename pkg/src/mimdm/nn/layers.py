"""Pre-norm bidirectional transformer encoder built on the tape ops."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mimdm.nn import tensor as T
from mimdm.nn.optim import ParamStore
from mimdm.nn.tensor import Tensor


@dataclass(frozen=True)
class EncoderShape:
    vocab_in: int
    vocab_out: int
    seq_len: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int


def init_encoder(store: ParamStore, shape: EncoderShape, rng: np.random.Generator) -> None:
    d = shape.d_model
    std = 0.02
    # residual projections scaled down with depth
    proj_std = std / math.sqrt(2 * shape.n_layers)
    store.add("tok_emb", rng.normal(0.0, std, (shape.vocab_in, d)))
    store.add("pos_emb", rng.normal(0.0, std, (shape.seq_len, d)))
    for i in range(shape.n_layers):
        pre = f"block{i}."
        store.add(pre + "ln1.g", np.ones(d))
        store.add(pre + "ln1.b", np.zeros(d))
        for name in ("q", "k", "v"):
            store.add(pre + f"attn.w{name}", rng.normal(0.0, std, (d, d)))
            store.add(pre + f"attn.b{name}", np.zeros(d))
        store.add(pre + "attn.wo", rng.normal(0.0, proj_std, (d, d)))
        store.add(pre + "attn.bo", np.zeros(d))
        store.add(pre + "ln2.g", np.ones(d))
        store.add(pre + "ln2.b", np.zeros(d))
        store.add(pre + "ff.w1", rng.normal(0.0, std, (d, shape.d_ff)))
        store.add(pre + "ff.b1", np.zeros(shape.d_ff))
        store.add(pre + "ff.w2", rng.normal(0.0, proj_std, (shape.d_ff, d)))
        store.add(pre + "ff.b2", np.zeros(d))
    store.add("ln_f.g", np.ones(d))
    store.add("ln_f.b", np.zeros(d))
    store.add("head.w", rng.normal(0.0, std, (d, shape.vocab_out)))
    store.add("head.b", np.zeros(shape.vocab_out))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def attention(x: Tensor, store: ParamStore, pre: str, n_heads: int) -> Tensor:
    bsz, n, d = x.shape
    dh = d // n_heads

    def heads(name: str) -> Tensor:
        y = linear(x, store[pre + "w" + name], store[pre + "b" + name])
        return T.transpose(T.reshape(y, (bsz, n, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = T.matmul(T.softmax_rows(scores), v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bsz, n, d))
    return linear(out, store[pre + "wo"], store[pre + "bo"])


def encoder_forward(store: ParamStore, shape: EncoderShape, ids: np.ndarray) -> tuple[Tensor, Tensor]:
    """Run the encoder on integer ids of shape (B, N).

    Returns ``(logits, hidden)`` with shapes (B, N, vocab_out) and (B, N, D);
    ``hidden`` is the final layer-normed state fed to the output head.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != shape.seq_len:
        raise T.ShapeError(f"encoder expects (B, {shape.seq_len}) ids, got {ids.shape}")
    x = T.add(T.embedding(store["tok_emb"], ids), store["pos_emb"])
    for i in range(shape.n_layers):
        pre = f"block{i}."
        h = T.layer_norm(x, store[pre + "ln1.g"], store[pre + "ln1.b"])
        x = T.add(x, attention(h, store, pre + "attn.", shape.n_heads))
        h = T.layer_norm(x, store[pre + "ln2.g"], store[pre + "ln2.b"])
        h = T.gelu(linear(h, store[pre + "ff.w1"], store[pre + "ff.b1"]))
        x = T.add(x, linear(h, store[pre + "ff.w2"], store[pre + "ff.b2"]))
    hidden = T.layer_norm(x, store["ln_f.g"], store["ln_f.b"])
    logits = linear(hidden, store["head.w"], store["head.b"])
    return logits, hidden
