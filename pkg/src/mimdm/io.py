"""On-disk formats: checkpoints and the MI training record stream.

A checkpoint is a directory::

    manifest.json   format version, model kind, config, parameter names/shapes,
                    sha256 of params.bin, optimizer step, seed lineage
    params.bin      float32 little-endian values, concatenated in manifest order
    optim.bin       optional Adam moments (m then v per parameter), same layout

Values are computed in float64 and stored as float32; loading widens them
back, so a load/save cycle reproduces the blobs byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from mimdm.nn import ParamStore

FORMAT_VERSION = 1
LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _pack(arrays: Iterable[np.ndarray]) -> bytes:
    return b"".join(np.asarray(a, dtype=np.float64).astype(LE_F32).tobytes() for a in arrays)


def save_checkpoint(path, kind: str, config: dict, store: ParamStore, lineage: dict | None = None,
                    extra: dict | None = None, with_optimizer: bool = True) -> str:
    """Write a checkpoint directory; returns the params content hash."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    names = list(store)
    blob = _pack(store[n].data for n in names)
    digest = sha256_bytes(blob)
    (out / "params.bin").write_bytes(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": [{"name": n, "shape": list(store[n].shape)} for n in names],
        "sha256": digest,
        "lineage": lineage or {},
        "extra": extra or {},
    }
    if with_optimizer:
        oblob = _pack([store.m[n] for n in names] + [store.v[n] for n in names])
        (out / "optim.bin").write_bytes(oblob)
        manifest["optimizer"] = {"step": store.step, "sha256": sha256_bytes(oblob)}
    dump_json(manifest, out / "manifest.json")
    return digest


def _unpack(blob: bytes, shapes: list[tuple[int, ...]], offset_values: int = 0) -> tuple[list[np.ndarray], int]:
    flat = np.frombuffer(blob, dtype=LE_F32).astype(np.float64)
    out = []
    pos = offset_values
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        out.append(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    return out, pos


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, ParamStore]:
    src = Path(path)
    try:
        manifest = load_json(src / "manifest.json")
        blob = (src / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {src}: {exc.filename}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    shapes = [tuple(p["shape"]) for p in manifest["params"]]
    total = sum(int(np.prod(s)) if s else 1 for s in shapes)
    if len(blob) != 4 * total:
        raise CheckpointError(f"params.bin holds {len(blob)} bytes, manifest implies {4 * total}")
    if sha256_bytes(blob) != manifest["sha256"]:
        raise CheckpointError("params.bin hash does not match manifest")
    values, _ = _unpack(blob, shapes)
    store = ParamStore()
    for p, v in zip(manifest["params"], values):
        store.add(p["name"], v)
    opt = manifest.get("optimizer")
    if opt is not None and (src / "optim.bin").exists():
        oblob = (src / "optim.bin").read_bytes()
        if sha256_bytes(oblob) != opt["sha256"]:
            raise CheckpointError("optim.bin hash does not match manifest")
        moments, _ = _unpack(oblob, shapes + shapes)
        for k, p in enumerate(manifest["params"]):
            store.m[p["name"]] = moments[k]
            store.v[p["name"]] = moments[len(shapes) + k]
        store.step = int(opt["step"])
    return manifest, store


# ------------------------------------------------------------ MI record stream

_REC_HEAD = struct.Struct("<IdI")  # payload length, t, oracle nfe


def write_mi_dataset(path, examples, meta: dict) -> None:
    """Length-prefixed records plus ``<path>.json`` sidecar.

    Record payload: t (f64), oracle nfe (u32), packed mask bitmap, hidden
    (N x D float32), target (N x N float32).
    """
    examples = list(examples)
    n = examples[0].hidden.shape[0] if examples else meta.get("n", 0)
    d = examples[0].hidden.shape[1] if examples else meta.get("d", 0)
    with open(path, "wb") as fh:
        for ex in examples:
            body = (
                np.packbits(ex.masked.astype(np.uint8)).tobytes()
                + ex.hidden.astype(LE_F32).tobytes()
                + ex.target.astype(LE_F32).tobytes()
            )
            fh.write(_REC_HEAD.pack(len(body) + 12, float(ex.t), int(ex.oracle_nfe)))
            fh.write(body)
    side = dict(meta)
    side.update({"n": int(n), "d": int(d), "count": len(examples), "dtype": "float32-le", "format_version": FORMAT_VERSION})
    dump_json(side, str(path) + ".json")


def read_mi_dataset(path) -> tuple[dict, list]:
    from mimdm.estimator import MITrainingExample

    meta = load_json(str(path) + ".json")
    n, d = meta["n"], meta["d"]
    nbits = (n + 7) // 8
    out = []
    with open(path, "rb") as fh:
        for rec in _iter_records(fh):
            length, t, nfe, body = rec
            if length != 12 + nbits + 4 * n * d + 4 * n * n:
                raise CheckpointError("MI record length does not match sidecar dims")
            masked = np.unpackbits(np.frombuffer(body[:nbits], dtype=np.uint8))[:n].astype(bool)
            off = nbits
            hidden = np.frombuffer(body[off:off + 4 * n * d], dtype=LE_F32).reshape(n, d).astype(np.float64)
            off += 4 * n * d
            target = np.frombuffer(body[off:], dtype=LE_F32).reshape(n, n).astype(np.float64)
            out.append(MITrainingExample(hidden, masked, target, t, nfe))
    if len(out) != meta["count"]:
        raise CheckpointError(f"sidecar says {meta['count']} records, found {len(out)}")
    return meta, out


def _iter_records(fh) -> Iterator[tuple[int, float, int, bytes]]:
    while True:
        head = fh.read(_REC_HEAD.size)
        if not head:
            return
        if len(head) != _REC_HEAD.size:
            raise CheckpointError("truncated MI record header")
        length, t, nfe = _REC_HEAD.unpack(head)
        body = fh.read(length - 12)
        if len(body) != length - 12:
            raise CheckpointError("truncated MI record body")
        yield length, t, nfe, body
