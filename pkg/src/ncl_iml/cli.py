"""Command-line entry point: ``ncl-iml <verb> ...``.

Verbs: ``synth-gen``, ``train``, ``eval``, ``attack-eval`` and ``predict``.
Each writes its outputs plus a ``manifest.json`` (resolved config, seed and
sha256 of every input and artifact) into ``--out``. Exit status is 0 on
success, 2 on bad arguments or inputs, and 1 when the run itself fails.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import DEFAULT_ATTACK_GRID, attack_label, load_dataset, read_image, save_dataset, synth_splice, write_image
from .metrics import FIXED_THRESHOLD, evaluate, write_per_image_csv

SEED_ENV = "NCL_SEED"
OVERLAY_ALPHA = 0.4
OVERLAY_COLOUR = np.array([255.0, 0.0, 0.0])

log = logging.getLogger("ncl_iml")


class UsageError(Exception):
    """Bad arguments or unusable inputs (exit status 2)."""


# ------------------------------------------------------------------- hashing


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root) -> str:
    """Digest of every file under ``root`` (relative names and contents, sorted)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def write_manifest(out: Path, verb: str, command: dict, seed: int, config: dict | None, inputs: dict) -> Path:
    """Record everything needed to rerun ``verb``; artifacts are hashed relative to ``out``."""
    artifacts = {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "tool": "ncl-iml",
        "version": __version__,
        "verb": verb,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "artifacts": artifacts,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------- helpers


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def open_dataset(root: str):
    path = Path(root)
    if not path.is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    try:
        samples = load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(f"dataset directory {root}: {exc}") from None
    if not samples:
        raise UsageError(f"dataset directory {root} contains no images")
    return samples


def open_checkpoint(path: str):
    from .trainer import load_state

    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_state(path)


def out_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {path} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def result_row(label: str, res) -> dict:
    return {
        "attack": label,
        "images": len(res.per_image),
        "f1_fixed": f"{res.f1_fixed:.6f}",
        "f1_pooled": f"{res.f1_pooled:.6f}",
        "f1_optimal": f"{res.f1_optimal:.6f}",
        "auc": f"{res.auc:.6f}",
        "auc_images": res.auc_images,
    }


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def overlay(image: np.ndarray, prob: np.ndarray) -> np.ndarray:
    """Tint pixels with p >= 0.5 red at 40% alpha; other pixels are untouched."""
    out = image.astype(np.float64)
    hit = prob >= FIXED_THRESHOLD
    out[hit] = (1.0 - OVERLAY_ALPHA) * out[hit] + OVERLAY_ALPHA * OVERLAY_COLOUR
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def write_image_gray(path, arr: np.ndarray) -> None:
    Image.fromarray(arr, mode="L").save(path)


def prob_to_png(prob: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------- verbs


def cmd_synth_gen(args) -> int:
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.size < 8 or args.size % 8:
        raise UsageError("--size must be a positive multiple of 8")
    out = out_dir(args.out)
    samples, rows = synth_splice(seed, args.count, args.size, with_manifest=True)
    save_dataset(samples, out, rows)
    write_manifest(out, "synth-gen", {"count": args.count, "size": args.size}, seed, None, {})
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def resolve_train_config(args):
    from .trainer import TrainConfig, load_config, parse_overrides

    base = TrainConfig.tiny() if args.preset == "tiny" else TrainConfig()
    try:
        if args.config is not None and not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} does not exist")
        config = load_config(args.config, (), base)
        seed = env_seed()
        values = config.to_dict()
        if seed is not None:
            values["seed"] = seed
        values.update(parse_overrides(args.set))
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    from .trainer import dump_config, fit

    config = resolve_train_config(args)
    train_set = open_dataset(args.data)
    val_set = open_dataset(args.val) if args.val else None
    if args.resume is not None and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint {args.resume} does not exist")
    out = out_dir(args.out)
    (out / "config.txt").write_text(dump_config(config))
    state = fit(config, train_set, val_set, out_dir=out, resume=args.resume)
    inputs = {"data": sha256_tree(args.data)}
    if args.val:
        inputs["val"] = sha256_tree(args.val)
    if args.resume:
        inputs["resume"] = sha256_file(args.resume)
    write_manifest(out, "train", {"preset": args.preset, "overrides": list(args.set)},
                   state.config.seed, state.config.to_dict(), inputs)
    means = ", ".join(f"{m:.4f}" for m in state.epoch_means)
    print(f"trained {state.epoch} epochs ({state.step} steps); epoch mean total loss: {means}")
    if val_set:
        print(f"best val f1 {state.best_f1:.4f} at epoch {state.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    dataset = open_dataset(args.data)
    state = open_checkpoint(args.checkpoint)
    out = out_dir(args.out)
    res = evaluate(state.model, dataset)
    write_rows(out / "eval_summary.csv", [result_row("None", res)])
    write_per_image_csv(res, out / "per_image.csv")
    inputs = {"checkpoint": sha256_file(args.checkpoint), "data": sha256_tree(args.data)}
    write_manifest(out, "eval", {}, state.config.seed, state.config.to_dict(), inputs)
    print(res.summary(f"eval {args.data}"))
    return 0


def cmd_attack_eval(args) -> int:
    dataset = open_dataset(args.data)
    state = open_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else env_seed()
    seed = state.config.seed if seed is None else seed
    out = out_dir(args.out)
    rows = []
    for spec in DEFAULT_ATTACK_GRID:
        res = evaluate(state.model, dataset, attack=spec, seed=seed)
        rows.append(result_row(attack_label(spec), res))
        log.info("%-26s f1 %.4f auc %.4f", attack_label(spec), res.f1_fixed, res.auc)
    write_rows(out / "attack_eval.csv", rows)
    inputs = {"checkpoint": sha256_file(args.checkpoint), "data": sha256_tree(args.data)}
    write_manifest(out, "attack-eval", {"grid": [r["attack"] for r in rows]}, seed, state.config.to_dict(), inputs)
    print(f"{'attack':<26} {'f1':>8} {'auc':>8}")
    for r in rows:
        print(f"{r['attack']:<26} {r['f1_fixed']:>8} {r['auc']:>8}")
    return 0


def cmd_predict(args) -> int:
    from .model import predict

    state = open_checkpoint(args.checkpoint)
    src = Path(args.input)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not paths:
            raise UsageError(f"input directory {args.input} contains no images")
    elif src.is_file():
        paths = [src]
    else:
        raise UsageError(f"input {args.input} does not exist")
    images = []
    for p in paths:
        try:
            images.append(read_image(p))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    out = out_dir(args.out)
    for p, image in zip(paths, images):
        prob = predict(state.model, image)
        write_image_gray(out / f"{p.stem}_prob.png", prob_to_png(prob))
        write_image(out / f"{p.stem}_overlay.png", overlay(image, prob))
    inputs = {"checkpoint": sha256_file(args.checkpoint), **{f"image/{p.name}": sha256_file(p) for p in paths}}
    write_manifest(out, "predict", {}, state.config.seed, state.config.to_dict(), inputs)
    print(f"wrote {len(paths)} probability maps and overlays to {out}")
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncl-iml", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="write a seeded synthetic splice dataset")
    p.add_argument("--seed", type=int, default=None, help=f"generator seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoints and a loss log")
    p.add_argument("--data", required=True, help="training dataset (images/ + masks/)")
    p.add_argument("--val", default=None, help="validation dataset for best-F1 model selection")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("full", "tiny"), default="full",
                   help="base settings before --config/--set (full: 512px crops, 70 epochs; tiny: 64px, 15)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable; applied after --config")
    p.add_argument("--resume", default=None, help="continue from a last.safetensors checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack-eval", parents=[common], help="score a checkpoint under the 9-row attack grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="noise-attack seed (default: checkpoint seed)")
    p.set_defaults(func=cmd_attack_eval)

    p = sub.add_parser("predict", parents=[common], help="write probability maps and red overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="an image file or a directory of images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ncl-iml {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"ncl-iml {args.verb}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


run = main
