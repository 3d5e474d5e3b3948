"""Command-line entry point: ``mbtnet {synth,train,eval,predict,ablate,gradcheck}``.

Every command resolves a :class:`RunConfig` from built-in desk-scale
defaults, an optional ``--config`` key-value file (``section.key = value``)
and command-line flags, in increasing priority, and writes it to
``<out>/run.cfg`` before doing any work.

Exit status: 0 success, 1 usage or config error, 2 runtime failure,
3 gradient-check failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError
from .config import ConfigError, coerce, format_kv, read_kv
from .data import (DatasetPlan, ManifestError, SynthConfig, histogram_equalize, load_manifest,
                   load_split, read_mask, read_png_gray, synthesize_dataset, write_png_gray,
                   write_png_rgb)
from .gradsuite import run_model_case, run_suite
from .model import MBTNet, ModelConfig
from .supervision import LossWeights, binarize, evaluate, evaluate_masks, mean_of, pooled
from .trainer import TrainingError, TrainOptions, load_checkpoint, train, validate

log = logging.getLogger("mbtnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

RED = (255, 0, 0)
GREEN = (0, 255, 0)
ORANGE = (255, 165, 0)

METRIC_COLUMNS = ("id", "dice", "f1", "se", "sp")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config

@dataclasses.dataclass
class RunOptions:
    command: str = ""
    seed: int = 0
    epochs: int = 30
    data: str = ""
    split: str = "val"
    checkpoint: str = ""
    image: str = ""
    gt: str = ""
    resume: str = ""
    oracle_mode: bool = False
    equalize: bool = True
    depths: tuple[int, ...] = (0, 1, 2, 3, 4)
    jobs: int = 1
    full_model: bool = False
    grad_seeds: int = 1


SECTIONS = {
    "run": RunOptions,
    "model": ModelConfig,
    "loss": LossWeights,
    "synth": SynthConfig,
    "plan": DatasetPlan,
    "train": TrainOptions,
}

# desk scale: what a single CPU core trains in minutes
DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {"widths": (8, 16, 32, 64), "heads": 2, "input_size": (64, 64)},
}

# owned by run.seed, never set independently
_DERIVED_KEYS = {("synth", "seed")}


@dataclasses.dataclass
class RunConfig:
    run: RunOptions
    model: ModelConfig
    loss: LossWeights
    synth: SynthConfig
    plan: DatasetPlan
    train: TrainOptions
    explicit: frozenset = frozenset()  # "section.key" names set by file or flag

    def to_kv(self) -> dict[str, Any]:
        values = {}
        for section in SECTIONS:
            for key, value in dataclasses.asdict(getattr(self, section)).items():
                if (section, key) not in _DERIVED_KEYS:
                    values[f"{section}.{key}"] = value
        return values

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / "run.cfg"
        path.write_text(format_kv(self.to_kv()), encoding="utf-8")
        return path


def _section_defaults(section: str) -> dict[str, Any]:
    base = {f.name: f.default for f in dataclasses.fields(SECTIONS[section])
            if f.default is not dataclasses.MISSING}
    base.update(DEFAULTS.get(section, {}))
    return base


def build_run_config(file_values: dict[str, str], overrides: dict[str, Any]) -> RunConfig:
    """Merge defaults < file values (text) < typed overrides into a RunConfig."""
    merged = {name: _section_defaults(name) for name in SECTIONS}
    explicit = set()
    for dotted, text in file_values.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or key not in merged[section] or (section, key) in _DERIVED_KEYS:
            raise ConfigError(f"unknown config key {dotted!r}")
        merged[section][key] = coerce(text, merged[section][key], dotted)
        explicit.add(dotted)
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        merged[section][key] = value
        explicit.add(dotted)
    merged["synth"]["seed"] = merged["run"]["seed"]
    try:
        built = {name: SECTIONS[name](**values) for name, values in merged.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**built, explicit=frozenset(explicit))


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {"run.command": args.command}
    simple = {
        "seed": "run.seed", "epochs": "run.epochs", "data": "run.data", "split": "run.split",
        "checkpoint": "run.checkpoint", "image": "run.image", "gt": "run.gt",
        "resume": "run.resume", "jobs": "run.jobs", "grad_seeds": "run.grad_seeds",
        "tr_depth": "model.tr_depth", "heads": "model.heads", "span": "model.span",
        "widths": "model.widths", "depths": "run.depths",
    }
    for attr, dotted in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[dotted] = value
    if getattr(args, "oracle_mode", False):
        out["run.oracle_mode"] = True
    if getattr(args, "no_equalize", False):
        out["run.equalize"] = False
    if getattr(args, "full_model", False):
        out["run.full_model"] = True
    if getattr(args, "no_body_edge", False):
        out.update({"model.body_edge": False, "loss.body": 0.0, "loss.edge": 0.0})
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    file_values = read_kv(args.config) if args.config else {}
    return build_run_config(file_values, _flag_overrides(args))


# ---------------------------------------------------------------- helpers

def _prepare_out(out: str | None, force: bool = False, require_empty: bool = False) -> Path:
    if not out:
        raise UsageError("--out DIR is required")
    path = Path(out)
    if require_empty and path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to output directory {path}: {exc.strerror or exc}") from None
    return path


def _image_size(manifest, split: str) -> tuple[int, int]:
    records = manifest.split(split)
    if not records:
        raise ManifestError(f"split {split!r} is empty")
    return read_png_gray(manifest.resolve(records[0].image)).shape


def _with_input_size(cfg: RunConfig, size) -> RunConfig:
    if "model.input_size" in cfg.explicit and tuple(size) != cfg.model.input_size:
        raise ConfigError(f"model.input_size {cfg.model.input_size} does not match the data "
                          f"size {tuple(size)}")
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, input_size=tuple(size)))


def _check_compatible(cfg: RunConfig, stored: ModelConfig) -> None:
    """Error naming every explicitly requested model field the checkpoint disagrees with."""
    differing = []
    for f in dataclasses.fields(ModelConfig):
        if f.name == "input_size" or f"model.{f.name}" not in cfg.explicit:
            continue
        if getattr(cfg.model, f.name) != getattr(stored, f.name):
            differing.append(f"{f.name} (requested {getattr(cfg.model, f.name)}, "
                             f"checkpoint {getattr(stored, f.name)})")
    if differing:
        raise CheckpointError("config does not match checkpoint: " + "; ".join(differing))


def _load_model(cfg: RunConfig, size) -> MBTNet:
    if not cfg.run.checkpoint:
        raise UsageError("--checkpoint PATH is required")
    model, _, _ = load_checkpoint(cfg.run.checkpoint)
    _check_compatible(cfg, model.config)
    return model.resized(size)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] if k == "id" else f"{row[k]:.6f}" for k in METRIC_COLUMNS})


def format_table(rows: list[dict], columns) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c])
                      for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells)


def render_overlay(background: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB overlay: prediction-only red, ground-truth-only green, both orange."""
    background = np.asarray(background, dtype=np.uint8)
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if not (background.shape == pred.shape == gt.shape):
        raise ValueError(f"overlay inputs differ in shape: {background.shape}, "
                         f"{pred.shape}, {gt.shape}")
    rgb = np.repeat(background[..., None], 3, axis=2)
    rgb[pred & ~gt] = RED
    rgb[gt & ~pred] = GREEN
    rgb[pred & gt] = ORANGE
    return rgb


# ---------------------------------------------------------------- commands

_OWNED = ("images", "masks", "edges", "bodies", "manifest.tsv", "synth.cfg", "run.cfg")


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    for name in _OWNED:
        target = out / name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
    cfg.save(out)
    manifest = synthesize_dataset(out, cfg.synth, cfg.plan)
    counts = manifest.counts()
    print(f"wrote {sum(counts.values())} patches of {cfg.plan.patch[0]}x{cfg.plan.patch[1]} "
          f"to {out}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return EXIT_OK


def _require_data(cfg: RunConfig):
    if not cfg.run.data:
        raise UsageError("--data MANIFEST is required")
    return load_manifest(cfg.run.data)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    manifest = _require_data(cfg)
    cfg = _with_input_size(cfg, _image_size(manifest, "train"))
    cfg.save(out)
    model = MBTNet(cfg.model, seed=cfg.run.seed)
    report = train(model, load_split(manifest, "train"), load_split(manifest, "val"),
                   cfg.run.epochs, cfg.loss, seed=cfg.run.seed, out_dir=out,
                   options=cfg.train, resume=cfg.run.resume or None)
    initial = "n/a" if report.initial_dice is None else f"{report.initial_dice:.4f}"
    print(f"trained {cfg.model.tr_depth}-{cfg.model.tr_depth}-TR for {len(report.epochs)} "
          f"epochs: initial DICE {initial}, best DICE {report.best_dice:.4f}; "
          f"checkpoints in {out}")
    return EXIT_OK


def evaluate_split(cfg: RunConfig, manifest, split: str) -> list[dict]:
    """Per-image rows plus ``pooled`` and ``mean`` summary rows."""
    records = load_split(manifest, split)
    if not records:
        raise ManifestError(f"split {split!r} is empty")
    if cfg.run.oracle_mode:
        reports = [evaluate_masks(r.masks.final, r.masks.final) for r in records]
    else:
        model = _load_model(cfg, records[0].image.shape[1:])
        _, reports = validate(model, records, cfg.loss, cfg.train.threshold)
    rows = [{"id": r.ident, **rep.as_row()} for r, rep in zip(records, reports)]
    rows.append({"id": "pooled", **pooled(reports).as_row()})
    rows.append({"id": "mean", **mean_of(reports)})
    return rows


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    manifest = _require_data(cfg)
    cfg.save(out)
    rows = evaluate_split(cfg, manifest, cfg.run.split)
    write_metrics_csv(out / "metrics.csv", rows)
    print(format_table(rows, METRIC_COLUMNS))
    return EXIT_OK


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    if not cfg.run.image:
        raise UsageError("--image PATH is required")
    image = read_png_gray(cfg.run.image)
    if any(s % 8 for s in image.shape):
        raise ValueError(f"image size {image.shape} is not divisible by 8; pad it to "
                         f"{tuple(-(-s // 8) * 8 for s in image.shape)} first")
    cfg.save(out)
    shown = histogram_equalize(image) if cfg.run.equalize else image
    model = _load_model(cfg, image.shape)
    dtype = model.parameters()[0].dtype
    with T.no_grad():
        logits = model(T.Tensor((shown.astype(dtype) / 255)[None, None])).final_logits
    pred = binarize(logits, cfg.train.threshold)[0, 0]
    stem = Path(cfg.run.image).stem
    write_png_gray(out / f"{stem}_mask.png", pred * 255)
    message = f"wrote {out / (stem + '_mask.png')}"
    if cfg.run.gt:
        gt = read_mask(cfg.run.gt)
        if gt.shape != image.shape:
            raise ValueError(f"ground truth {gt.shape} and image {image.shape} differ")
        write_png_rgb(out / f"{stem}_overlay.png", render_overlay(shown, pred, gt))
        rep = evaluate(logits, gt[None, None], cfg.train.threshold)
        message += f" and {stem}_overlay.png (DICE {rep.dice:.4f})"
    print(message)
    return EXIT_OK


ABLATION_COLUMNS = ("setting", "tr_depth", "body_edge", "params", "dice", "f1", "se", "sp",
                    "train_edge", "train_body", "train_final", "seconds")


def _ablation_cell(cfg: RunConfig, depth: int, body_edge: bool, data: str, root: str) -> dict:
    name = f"{depth}-{depth}-TR" + ("" if body_edge else "_no-body-edge")
    loss = cfg.loss if body_edge else dataclasses.replace(cfg.loss, body=0.0, edge=0.0)
    model_cfg = dataclasses.replace(cfg.model, tr_depth=depth, body_edge=body_edge)
    out = Path(root) / name
    started = time.perf_counter()
    manifest = load_manifest(data)
    model = MBTNet(model_cfg, seed=cfg.run.seed)
    report = train(model, load_split(manifest, "train"), load_split(manifest, "val"),
                   cfg.run.epochs, loss, seed=cfg.run.seed, out_dir=out, options=cfg.train)
    best = out / "best.ckpt"
    final_model, _, _ = load_checkpoint(best if best.is_file() else out / "last.ckpt")
    split = "test" if manifest.split("test") else "val"
    _, reports = validate(final_model, load_split(manifest, split), loss, cfg.train.threshold)
    metrics = pooled(reports)
    last = report.epochs[-1] if report.epochs else None
    return {
        "setting": name, "tr_depth": depth, "body_edge": "on" if body_edge else "off",
        "params": model.parameter_count(), "dice": metrics.dice, "f1": metrics.f1,
        "se": metrics.sensitivity, "sp": metrics.specificity,
        "train_edge": last.train_edge if last else 0.0,
        "train_body": last.train_body if last else 0.0,
        "train_final": last.train_final if last else 0.0,
        "seconds": time.perf_counter() - started,
    }


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    data = cfg.run.data
    size = _image_size(load_manifest(data), "train") if data else cfg.plan.patch
    cfg = _with_input_size(cfg, size)
    cfg.save(out)
    if not data:
        synthesize_dataset(out / "data", cfg.synth, cfg.plan)
        data = str(out / "data" / "manifest.tsv")
    grid = [(d, be) for d in cfg.run.depths for be in (True, False)]
    args = [(cfg, d, be, data, str(out / "runs")) for d, be in grid]
    if cfg.run.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.jobs) as pool:
            rows = list(pool.map(_ablation_cell, *zip(*args)))
    else:
        rows = [_ablation_cell(*a) for a in args]
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    table = format_table(rows, ABLATION_COLUMNS)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path | None) -> int:
    if out is not None:
        cfg.save(out)
    results = run_suite(seeds=tuple(range(cfg.run.grad_seeds)), include_model=False)
    lines = [f"{'PASS' if r.report.passed else 'FAIL'}  {r.name:44s} "
             f"max_rel_error={r.report.max_rel_error:.3e}"
             + (f"  ({r.report.failure})" if r.report.failure else "") for r in results]
    failed = [r.name for r in results if not r.report.passed]
    if cfg.run.full_model:
        report = run_model_case(cfg.run.seed)
        lines.append(f"{'PASS' if report.passed else 'FAIL'}  {'full_model[toy]':44s} "
                     f"max_rel_error={report.max_rel_error:.3e}  "
                     f"skipped_at_kinks={report.skipped}")
        if not report.passed:
            failed.append("full_model[toy]")
    text = "\n".join(lines)
    print(text)
    if out is not None:
        (out / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results) + cfg.run.full_model} gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------- argparse

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key-value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--tr-depth", type=int, choices=range(5), metavar="{0..4}")
    model.add_argument("--widths", type=_int_list, metavar="a,b,c,d")
    model.add_argument("--heads", type=int)
    model.add_argument("--span", type=int)
    model.add_argument("--no-body-edge", action="store_true",
                       help="zero the body/edge loss weights and bypass fusion")

    parser = _Parser(prog="mbtnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")

    p = sub.add_parser("train", parents=[common, model], help="train a model")
    p.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", metavar="CKPT", help="continue from a training checkpoint")

    p = sub.add_parser("eval", parents=[common, model], help="score a checkpoint")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--oracle-mode", action="store_true",
                   help="score the ground truth against itself")

    p = sub.add_parser("predict", parents=[common, model], help="segment one image")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--image", metavar="PNG")
    p.add_argument("--gt", metavar="PNG", help="ground-truth mask for the overlay")
    p.add_argument("--no-equalize", action="store_true",
                   help="the image is already histogram-equalized")

    p = sub.add_parser("ablate", parents=[common, model],
                       help="train the transformer-depth x body-edge grid")
    p.add_argument("--data", metavar="MANIFEST", help="default: synthesize into OUT/data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--depths", type=_int_list, metavar="0,1,2,3,4")
    p.add_argument("--jobs", type=int, help="train grid cells in parallel processes")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--grad-seeds", type=int, metavar="N", help="seeds per case (default 1)")
    p.add_argument("--full-model", action="store_true", help="also check the toy full model")
    return parser


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        if args.command == "gradcheck":
            out = _prepare_out(args.out) if args.out else None
        else:
            out = _prepare_out(args.out, getattr(args, "force", False),
                               require_empty=args.command == "synth")
        return COMMANDS[args.command](cfg, out)
    except (UsageError, ConfigError) as exc:
        print(f"mbtnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, CheckpointError, ManifestError, TrainingError) as exc:
        print(f"mbtnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
