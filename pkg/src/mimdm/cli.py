"""Command-line entry point: ``mimdm <command> ...``.

Exit codes: 0 success, 2 usage or config error, 3 data or format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from mimdm import nn
from mimdm.config import ConfigError, dump_sections, load_sections, section_to_dataclass
from mimdm.estimator import (
    EstimatorConfig,
    EstimatorTrainConfig,
    MIEstimator,
    build_mi_dataset,
    constant_baseline_mse,
    evaluate_mse,
    train_estimator,
)
from mimdm.evaluation import export_mi_map, puzzle_seed, run_benchmark
from mimdm.io import (
    CheckpointError,
    dump_json,
    load_checkpoint,
    load_json,
    save_checkpoint,
    read_mi_dataset,
    sha256_bytes,
    write_mi_dataset,
)
from mimdm.mdm import (
    MaskedDiffusionModel,
    ModelConfig,
    SequenceState,
    TrainConfig,
    board_from_state,
    state_from_puzzle,
    train_mdm,
)
from mimdm.oracle import ground_truth_mi
from mimdm.pipeline import assign_splits, generate_puzzles, parse_holes, select_split
from mimdm.samplers import SamplerConfig, decode_batch
from mimdm.sudoku import PuzzleFormatError, check_solution, parse_puzzle_line, read_puzzles, write_puzzles

log = logging.getLogger("mimdm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _split_manifest_path(puzzles: Path) -> Path:
    return puzzles.with_name(puzzles.name + ".split.json")


def _load_puzzles(path, split: str | None = None):
    p = _require_file(path, "puzzle file")
    records = read_puzzles(p)
    if split:
        mpath = _split_manifest_path(p)
        if not mpath.exists():
            raise UsageError(f"--split needs a split manifest next to the data: {mpath}")
        records = select_split(records, load_json(mpath), split)
    if not records:
        raise DataError(f"no puzzles in {p}" + (f" (split {split})" if split else ""))
    return records


def _load_mdm(path) -> tuple[MaskedDiffusionModel, dict]:
    _require_file(Path(path) / "manifest.json", "MDM checkpoint")
    man, store = load_checkpoint(path, "mdm")
    return MaskedDiffusionModel(ModelConfig(**man["config"]), store), man


def _load_estimator(path, mdm_manifest: dict | None, force: bool) -> MIEstimator:
    _require_file(Path(path) / "manifest.json", "estimator checkpoint")
    man, store = load_checkpoint(path, "estimator")
    want = man.get("extra", {}).get("backbone_sha256")
    if mdm_manifest is not None and want != mdm_manifest["sha256"]:
        msg = f"estimator was trained on backbone {want}, got {mdm_manifest['sha256']}"
        if not force:
            raise UsageError(msg + " (pass --force to use it anyway)")
        log.warning(msg)
    return MIEstimator(EstimatorConfig(**man["config"]), store)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    if args.box_size not in (2, 3):
        raise UsageError("--box-size must be 2 or 3")
    if args.count < 1:
        raise UsageError("--count must be positive")
    n_cells = args.box_size ** 4
    try:
        holes = parse_holes(args.holes, n_cells)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    banned: set[str] = set()
    for path in args.exclude:
        banned.update(r.content_hash() for r in _load_puzzles(path))
    try:
        records = generate_puzzles(args.box_size, args.count, holes, args.seed, exclude=banned)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        splits = assign_splits(records, args.val_frac, args.test_frac, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = f"box_size={args.box_size} count={args.count} holes={holes[0]}-{holes[1]} seed={args.seed}"
    write_puzzles(out, records, header=header)
    dump_json(
        {
            "data_sha256": sha256_bytes(out.read_bytes()),
            "box_size": args.box_size,
            "count": args.count,
            "holes": list(holes),
            "seed": args.seed,
            "excluded_files": [str(p) for p in args.exclude],
            "fractions": {"val": args.val_frac, "test": args.test_frac},
            "splits": splits,
        },
        _split_manifest_path(out),
    )
    print(f"wrote {len(records)} puzzles to {out} "
          f"(train {len(splits['train'])}, val {len(splits['val'])}, test {len(splits['test'])})")
    return EXIT_OK


def cmd_train_mdm(args) -> int:
    records = _load_puzzles(args.data, args.split)
    b = records[0].box_size
    if any(r.box_size != b for r in records):
        raise DataError("mixed board sizes in training data")
    base = ModelConfig.for_sudoku(b)
    fixed = {"vocab_size": base.vocab_size, "seq_len": base.seq_len}
    secs, _ = load_sections(args.config, {"model": (ModelConfig, fixed), "train": (TrainConfig, {})})
    mcfg, tcfg = secs["model"], secs["train"]
    out = Path(args.out)
    if (out / "manifest.json").exists():
        if not args.resume:
            raise UsageError(f"{out} already holds a checkpoint; pass --resume to continue it")
        man, store = load_checkpoint(out, "mdm")
        if man["config"] != asdict(mcfg):
            raise UsageError("checkpoint model config differs from --config")
        model = MaskedDiffusionModel(mcfg, store)
        log.info("resuming at step %d", store.step)
    else:
        model = MaskedDiffusionModel(mcfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "resolved_config.ini", dump_sections({"model": mcfg, "train": tcfg}))
    data_hash = sha256_bytes(Path(args.data).read_bytes())
    lineage = {"model_seed": mcfg.seed, "train_seed": tcfg.seed, "data_sha256": data_hash, "split": args.split or "all"}

    def save(_epoch, m):
        save_checkpoint(out, "mdm", asdict(mcfg), m.store, lineage=lineage, extra={"train": asdict(tcfg)})

    train_mdm(model, records, tcfg, metrics_path=out / "loss.csv", on_epoch=save)
    digest = save_checkpoint(out, "mdm", asdict(mcfg), model.store, lineage=lineage, extra={"train": asdict(tcfg)})
    print(f"checkpoint {out} step {model.store.step} sha256 {digest}")
    return EXIT_OK


def cmd_build_mi_data(args) -> int:
    model, man = _load_mdm(args.mdm)
    records = _load_puzzles(args.data, args.split)
    if args.limit:
        records = records[:args.limit]
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    if records[0].box_size ** 4 != model.config.seq_len:
        raise DataError("puzzle size does not match the backbone")
    examples = build_mi_dataset(model, records, args.samples, (args.t_min, args.t_max), seed=args.seed)
    meta = {
        "mdm_sha256": man["sha256"],
        "data_sha256": sha256_bytes(Path(args.data).read_bytes()),
        "split": args.split or "all",
        "puzzles": len(records),
        "samples_per_puzzle": args.samples,
        "t_range": [args.t_min, args.t_max],
        "seed": args.seed,
        "oracle_nfe": int(sum(e.oracle_nfe for e in examples)),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_mi_dataset(args.out, examples, meta)
    print(f"wrote {len(examples)} MI examples to {args.out} ({meta['oracle_nfe']} oracle passes)")
    return EXIT_OK


def cmd_train_estimator(args) -> int:
    _require_file(args.mi_data, "MI dataset")
    _require_file(str(args.mi_data) + ".json", "MI dataset sidecar")
    meta, examples = read_mi_dataset(args.mi_data)
    if not examples:
        raise DataError("MI dataset is empty")
    if args.mdm:
        _, man = _load_mdm(args.mdm)
        if man["sha256"] != meta.get("mdm_sha256"):
            msg = f"MI data was built with backbone {meta.get('mdm_sha256')}, --mdm is {man['sha256']}"
            if not args.force:
                raise UsageError(msg + " (pass --force to train anyway)")
            log.warning(msg)
    secs, _ = load_sections(
        args.config,
        {"estimator": (EstimatorConfig, {"d_in": int(meta["d"])}), "train": (EstimatorTrainConfig, {})},
    )
    ecfg, tcfg = secs["estimator"], secs["train"]
    n_val = int(round(len(examples) * args.val_frac))
    val, train = examples[:n_val], examples[n_val:]
    est = MIEstimator(ecfg)
    history = train_estimator(est, train, val, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "resolved_config.ini", dump_sections({"estimator": ecfg, "train": tcfg}))
    with open(out / "mse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    val_mse = evaluate_mse(est, val) if val else float("nan")
    base = constant_baseline_mse(val) if val else float("nan")
    train_curve = [h[1] for h in history]
    monotone = all(b <= a for a, b in zip(train_curve, train_curve[1:]))
    extra = {"backbone_sha256": meta.get("mdm_sha256"), "val_mse": val_mse, "constant_mse": base,
             "train_monotone": monotone, "train": asdict(tcfg)}
    digest = save_checkpoint(out, "estimator", asdict(ecfg), est.store,
                             lineage={"seed": ecfg.seed, "mi_data": meta}, extra=extra)
    for ep, tr, va in history:
        print(f"epoch {ep:3d}  train {tr:.6f}  val {va:.6f}")
    print(f"train MSE monotone: {'yes' if monotone else 'no'}")
    print(f"held-out MSE {val_mse:.6f} vs constant {base:.6f}; checkpoint sha256 {digest}")
    return EXIT_OK


def cmd_sample(args) -> int:
    try:
        cfg = SamplerConfig(args.strategy, k=args.k, gamma=args.gamma, lam=args.lam, commit=args.commit, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.needs_estimator and not args.estimator:
        raise UsageError(f"--strategy {cfg.strategy} needs --estimator")
    model, man = _load_mdm(args.mdm)
    est = _load_estimator(args.estimator, man, args.force) if args.estimator else None
    records = _load_puzzles(args.puzzles, args.split)
    if args.limit:
        records = records[:args.limit]
    states = [state_from_puzzle(r) for r in records]
    traces = decode_batch(model, est, states, cfg, [puzzle_seed(r, args.seed) for r in records])
    solved = [check_solution(r, board_from_state(t.final_state, r.box_size)) for r, t in zip(records, traces)]
    doc = {
        "config": {"strategy": cfg.strategy, "k": cfg.k, "gamma": cfg.gamma, "lambda": cfg.lam,
                   "commit": cfg.commit, "seed": cfg.seed},
        "mdm_sha256": man["sha256"],
        "traces": [dict(t.to_json(), solved=bool(s)) for t, s in zip(traces, solved)],
    }
    if args.trace_out:
        Path(args.trace_out).parent.mkdir(parents=True, exist_ok=True)
        dump_json(doc, args.trace_out)
    passes = np.mean([t.n_passes for t in traces])
    print(f"{cfg.label()}: {sum(solved)}/{len(solved)} solved, avg passes {passes:.2f}, "
          f"backbone NFE {sum(t.backbone_nfe for t in traces)}, head NFE {sum(t.head_nfe for t in traces)}")
    return EXIT_OK


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


@dataclass
class Suite:
    """``[suite]`` section of a benchmark config; paths are relative to the file."""
    mdm: str = ""
    estimator: str = ""
    puzzles: str = ""
    split: str = ""
    exclude: str = ""
    seed: int = 0
    limit: int = 0
    force: bool = False


def cmd_benchmark(args) -> int:
    secs, methods = load_sections(args.suite_config, {"suite": (Suite, {})}, allow_prefixed=("method",))
    suite = secs["suite"]
    if not suite.mdm or not suite.puzzles:
        raise ConfigError("[suite] needs mdm and puzzles")
    if not methods:
        raise ConfigError("no [method <name>] sections")
    base = Path(args.suite_config).resolve().parent
    configs = {}
    for name, sec in methods.items():
        sec = dict(sec)
        if "lambda" in sec:
            sec["lam"] = sec.pop("lambda")
        configs[name.split(" ", 1)[1].strip()] = section_to_dataclass(sec, SamplerConfig, name)
    model, man = _load_mdm(_resolve(base, suite.mdm))
    est = _load_estimator(_resolve(base, suite.estimator), man, suite.force) if suite.estimator else None
    if est is None and any(c.needs_estimator for c in configs.values()):
        raise UsageError("an mi_guided method needs [suite] estimator")
    ppath = _resolve(base, suite.puzzles)
    records = _load_puzzles(ppath, suite.split or None)
    if suite.limit:
        records = records[:suite.limit]
    banned = None
    mpath = _split_manifest_path(ppath)
    if suite.split and suite.split != "train" and mpath.exists():
        banned = list(load_json(mpath)["splits"]["train"])
    if suite.exclude:
        # training file given explicitly: its train split, or every puzzle if it has no manifest
        xpath = _resolve(base, suite.exclude)
        xman = _split_manifest_path(xpath)
        xrecs = _load_puzzles(xpath, "train" if xman.exists() else None)
        banned = (banned or []) + [r.content_hash() for r in xrecs]
    report = run_benchmark(model, est, records, configs, seed=suite.seed, exclude_hashes=banned)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_json()
    doc["mdm_sha256"] = man["sha256"]
    doc["suite"] = asdict(suite)
    dump_json(doc, out.with_name(out.name + ".json"))
    table = report.to_table()
    _write_text(out.with_name(out.name + ".txt"), table + "\n")
    print(table)
    return EXIT_OK


def _parse_assignments(text: str, side: int) -> list[tuple[int, int]]:
    """``"r,c=v;r,c=v"`` with 1-based rows, columns and digits to (cell, token id)."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        try:
            cell, val = item.split("=")
            r, c = (int(x) for x in cell.split(","))
            v = int(val)
        except ValueError:
            raise UsageError(f"bad cell assignment {item!r}; use r,c=v") from None
        if not (1 <= r <= side and 1 <= c <= side and 1 <= v <= side):
            raise UsageError(f"cell assignment {item!r} out of range 1..{side}")
        out.append(((r - 1) * side + (c - 1), v - 1))
    return out


def _puzzle_state(source: str, index: int) -> tuple[SequenceState, int]:
    p = Path(source)
    if p.exists():
        records = read_puzzles(p)
        if not 0 <= index < len(records):
            raise UsageError(f"--index {index} outside 0..{len(records) - 1}")
        rec = records[index]
        return state_from_puzzle(rec), rec.box_size
    if "," in source:
        rec = parse_puzzle_line(source)
        return state_from_puzzle(rec), rec.box_size
    digits = source.strip().replace(".", "0")
    if len(digits) not in (16, 81) or not digits.isdigit():
        raise UsageError("--puzzle must be a file, a '<clues>,<solution>' line or a 16/81-digit clue string")
    b = 2 if len(digits) == 16 else 3
    vals = [int(ch) for ch in digits]
    if max(vals) > b * b:
        raise DataError(f"digit above {b * b} in clue string")
    return SequenceState.from_symbols([v - 1 if v else None for v in vals], b * b), b


def cmd_export_mi_map(args) -> int:
    state, b = _puzzle_state(args.puzzle, args.index)
    model, man = _load_mdm(args.mdm)
    if state.n != model.config.seq_len:
        raise DataError("puzzle size does not match the backbone")
    for cell, tok in _parse_assignments(args.cell_assignments or "", b * b):
        if not state.mask_flags[cell]:
            raise UsageError(f"cell {cell} is already filled")
        state = state.with_value(cell, tok)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    oracle = ground_truth_mi(model, state)
    written = [export_mi_map(state, oracle, out.with_name(out.name + ".oracle.csv"), b, label="oracle")[0]]
    if args.estimator:
        est = _load_estimator(args.estimator, man, args.force)
        marg = model.forward_marginals(state)
        pred = est.predict_mi(marg.hidden, state.masked_indices())
        written.append(export_mi_map(state, pred, out.with_name(out.name + ".estimator.csv"), b, label="estimator")[0])
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mimdm", description="MI-guided parallel decoding for masked diffusion on Sudoku")
    ap.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate puzzles and a train/val/test split manifest")
    p.add_argument("--box-size", type=int, default=2)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--holes", required=True, help="hole count, or an inclusive range like 4-16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-frac", type=float, default=0.05)
    p.add_argument("--test-frac", type=float, default=0.05)
    p.add_argument("--exclude", action="append", default=[], metavar="FILE",
                   help="skip puzzles that appear in FILE (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-mdm", help="train the masked diffusion backbone")
    p.add_argument("--config", required=True, help="INI file with [model] and [train] sections")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train", help="split to train on; empty string for the whole file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_mdm)

    p = sub.add_parser("build-mi-data", help="oracle MI targets for estimator training")
    p.add_argument("--mdm", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--samples", type=int, default=2, help="noised states per puzzle")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--t-min", type=float, default=0.0)
    p.add_argument("--t-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_mi_data)

    p = sub.add_parser("train-estimator", help="fit the MI head on a built MI dataset")
    p.add_argument("--config", required=True, help="INI file with [estimator] and [train] sections")
    p.add_argument("--mi-data", required=True)
    p.add_argument("--mdm", help="backbone checkpoint to check against the dataset's recorded hash")
    p.add_argument("--force", action="store_true")
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_estimator)

    p = sub.add_parser("sample", help="decode puzzles with one strategy and write traces")
    p.add_argument("--mdm", required=True)
    p.add_argument("--estimator")
    p.add_argument("--puzzles", required=True)
    p.add_argument("--split", default="")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--strategy", default="sequential")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--commit", default="argmax")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--trace-out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("benchmark", help="run a method suite; writes <out>.json and <out>.txt")
    p.add_argument("--suite-config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("export-mi-map", help="oracle (and optionally estimator) MI maps for one board")
    p.add_argument("--mdm", required=True)
    p.add_argument("--puzzle", required=True, help="puzzle file, puzzle line, or clue string with 0 or . for blanks")
    p.add_argument("--index", type=int, default=0, help="line index when --puzzle is a file")
    p.add_argument("--cell-assignments", default="", help="extra fills before export, e.g. '1,2=3;4,4=1'")
    p.add_argument("--estimator")
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_export_mi_map)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PuzzleFormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (nn.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
