"""``crackmamba`` command line: data generation, training, evaluation, inference,
scan visualisation and the branch ablation table.

Exit codes: 0 ok, 1 usage or invalid value, 2 I/O or parse failure, 3 numeric fault.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, scan
from .errors import InvalidArgument, NumericFault, ParseError
from .model import ModelConfig, build, load_checkpoint, save_checkpoint
from .nn.tensor import no_grad
from .train import SegMetrics, TrainConfig, compute_metrics, fit, predict

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
PATH_KEYS = {"data": "", "checkpoint": "model.ckpt", "log": "train.log"}

ABLATIONS = (
    ("cross-only", dict(use_cross_branch=True, use_snake_branch=False, use_conv_branch=False, use_sca=False)),
    ("snake-only", dict(use_cross_branch=False, use_snake_branch=True, use_conv_branch=False, use_sca=False)),
    ("both", dict(use_cross_branch=True, use_snake_branch=True, use_conv_branch=False, use_sca=False)),
    ("+conv", dict(use_cross_branch=True, use_snake_branch=True, use_conv_branch=True, use_sca=False)),
    ("+sca", dict(use_cross_branch=True, use_snake_branch=True, use_conv_branch=True, use_sca=True)),
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors raised (exit code 1) instead of exiting with 2."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- run config

class RunConfig:
    """Model, training and path settings merged from a key=value file and overrides."""

    def __init__(self, values: dict | None = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(MODEL_KEYS) - set(TRAIN_KEYS) - set(PATH_KEYS))
        if unknown:
            raise InvalidArgument(f"unknown config key {unknown[0]!r}")
        self.model = ModelConfig.from_mapping({k: v for k, v in values.items() if k in MODEL_KEYS})
        self.train = TrainConfig.from_mapping({k: v for k, v in values.items() if k in TRAIN_KEYS})
        self.paths = {k: str(values.get(k, d)) for k, d in PATH_KEYS.items()}
        self.model.validate()
        self.train.validate()

    def lines(self) -> list:
        return self.model.to_lines() + self.train.to_lines() + [f"{k}={v}" for k, v in self.paths.items()]


def parse_config_text(text: str) -> dict:
    values = {}
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise InvalidArgument(f"config line {num}: expected key=value, got {raw.strip()!r}")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def parse_overrides(tokens: list) -> dict:
    """``['--lr0', '1e-3', '--epochs=5']`` -> ``{'lr0': '1e-3', 'epochs': '5'}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}")
        key, sep, val = tok[2:].partition("=")
        if not sep:
            if i + 1 >= len(tokens):
                raise UsageError(f"override {tok} needs a value")
            val = tokens[i + 1]
            i += 1
        out[key.replace("-", "_")] = val
        i += 1
    return out


def load_run_config(path, overrides: list) -> RunConfig:
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(parse_overrides(overrides))
    return RunConfig(values)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    rows = data.generate_dataset(args.out, args.count, args.size, args.seed, args.crack_free_frac)
    n_test = sum(r["split"] == "test" for r in rows)
    n_free = sum(r["morphology"] == "noncrack" for r in rows)
    print(f"wrote {len(rows)} samples to {args.out} ({n_test} test, {n_free} crack-free)")
    return 0


def _train_val(data_dir):
    _, xtr, ytr = data.load_dataset(data_dir, "train")
    _, xte, yte = data.load_dataset(data_dir, "test")
    if len(xtr) == 0:
        xtr, ytr = xte, yte
    if len(xte) == 0:
        xte, yte = xtr, ytr
    return xtr, ytr, xte, yte


def cmd_train(args, overrides) -> int:
    cfg = load_run_config(args.config, overrides)
    if not cfg.paths["data"]:
        raise InvalidArgument("config key 'data' (dataset directory) is required")
    xtr, ytr, xte, yte = _train_val(cfg.paths["data"])
    model = build(cfg.model, cfg.train.seed)
    with open(cfg.paths["log"], "w") as log:
        for line in cfg.lines():
            log.write(f"# {line}\n")
            print(f"# {line}")
        result = fit(model, xtr, ytr, cfg.train, xte, yte, log=log)
    save_checkpoint(cfg.paths["checkpoint"], model,
                    {"best_epoch": result.best_epoch, "best_val_miou": f"{result.best_miou:.6f}"})
    print(f"# best epoch {result.best_epoch} val_miou {result.best_miou:.6f}; saved {cfg.paths['checkpoint']}")
    return 0


def predict_parallel(model, images: np.ndarray, threads: int = 1, batch_size: int = 8) -> np.ndarray:
    """Predict masks, sharding images over ``threads`` workers; results keep input order."""
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0,) + images.shape[2:], np.uint8)
    model.eval()
    with no_grad(), threadpool_limits(limits=1):
        if threads <= 1:
            parts = [predict(model, c, batch_size) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda c: predict(model, c, batch_size), chunks))
    return np.concatenate(parts)


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _, images, masks = data.load_dataset(args.data, args.split)
    if len(images) == 0:
        raise InvalidArgument(f"split {args.split!r} of {args.data} is empty")
    pred = predict_parallel(model, images, args.threads)
    total = SegMetrics()
    for p, g in zip(pred, masks):
        total = total.merge(compute_metrics(p, g))
    iou = total.iou
    print("metric\tvalue")
    for name, val in (("images", len(images)), ("iou_background", f"{iou[0]:.6f}"),
                      ("iou_crack", f"{iou[1]:.6f}"), ("miou", f"{total.miou:.6f}"),
                      ("f1", f"{total.f1:.6f}"), ("sensitivity", f"{total.sensitivity:.6f}")):
        print(f"{name}\t{val}")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image = data.read_image(args.image)
    pred = predict_parallel(model, image[None].astype(model.config.dtype))[0]
    data.write_mask(args.out, pred)
    print(f"wrote {args.out} ({int(pred.sum())} crack pixels)")
    return 0


def cmd_scan_viz(args) -> int:
    order = scan.make_order(args.height, args.width, args.kind, args.seed)
    data.write_pnm(args.out, scan.visit_time_image(order))
    print(f"wrote {args.out}")
    return 0


def run_ablation(cfg: RunConfig, out=None) -> list:
    """Train every branch variant with the same data and seed; returns the table rows."""
    out = sys.stdout if out is None else out
    xtr, ytr, xte, yte = _train_val(cfg.paths["data"])
    base = {f.name: getattr(cfg.model, f.name) for f in fields(ModelConfig)}
    rows = []
    out.write("variant\tparams\tval_miou\tval_f1\n")
    for name, toggles in ABLATIONS:
        model = build(ModelConfig(**{**base, **toggles}), cfg.train.seed)
        result = fit(model, xtr, ytr, cfg.train, xte, yte, echo=None)
        best = result.history[result.best_epoch]
        row = (name, model.num_parameters(), best.val_miou, best.val_f1)
        rows.append(row)
        out.write(f"{row[0]}\t{row[1]}\t{row[2]:.6f}\t{row[3]:.6f}\n")
        out.flush()
    out.write(f"# delta snake-only minus cross-only: val_miou {rows[1][2] - rows[0][2]:+.6f} "
              f"val_f1 {rows[1][3] - rows[0][3]:+.6f}\n")
    return rows


def cmd_ablate(args, overrides) -> int:
    cfg = load_run_config(args.config, overrides)
    if not cfg.paths["data"]:
        raise InvalidArgument("config key 'data' (dataset directory) is required")
    for line in cfg.lines():
        print(f"# {line}")
    run_ablation(cfg)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> Parser:
    p = Parser(prog="crackmamba", description="Crack segmentation with snake and cross scan state-space blocks.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic crack dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=64, help="number of samples (default 64)")
    g.add_argument("--size", type=int, default=64, help="square image side in pixels (default 64)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--crack-free-frac", type=float, default=0.25,
                   help="fraction of samples without cracks (default 0.25)")

    t = sub.add_parser("train", help="train a model; extra --key value pairs override the config file",
                       epilog="Config keys: " + ", ".join(MODEL_KEYS + TRAIN_KEYS + tuple(PATH_KEYS)))
    t.add_argument("--config", help="key=value config file")

    e = sub.add_parser("eval", help="print segmentation metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", choices=("train", "test", "all"), default="test", help="split to score (default test)")
    e.add_argument("--threads", type=int, default=1, help="worker threads across images (default 1)")

    i = sub.add_parser("infer", help="predict a crack mask for one image")
    i.add_argument("--checkpoint", required=True, help="checkpoint file")
    i.add_argument("--image", required=True, help="input PPM/PGM image")
    i.add_argument("--out", required=True, help="output PGM mask (0/255)")

    v = sub.add_parser("scan-viz", help="write a scan order's visit times as a grayscale image")
    v.add_argument("--kind", required=True, choices=scan.ALL_KINDS, help="order kind")
    v.add_argument("--height", type=int, required=True, help="grid height")
    v.add_argument("--width", type=int, required=True, help="grid width")
    v.add_argument("--seed", type=int, default=0, help="seed for random orders (default 0)")
    v.add_argument("--out", required=True, help="output PGM file")

    a = sub.add_parser("ablate", help="train the five branch variants and print a comparison table",
                       epilog="Variants: " + ", ".join(n for n, _ in ABLATIONS))
    a.add_argument("--config", help="key=value config file (same keys as train)")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command in ("train", "ablate"):
            code = {"train": cmd_train, "ablate": cmd_ablate}[args.command](args, rest)
        else:
            if rest:
                raise UsageError(f"unrecognized arguments: {' '.join(rest)}")
            handler = {"gen-data": cmd_gen_data, "eval": cmd_eval, "infer": cmd_infer,
                       "scan-viz": cmd_scan_viz}[args.command]
            code = handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
