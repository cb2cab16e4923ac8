"""Command-line entry point: ``b2f generate|train|eval|infer|viz|ablate``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Run settings come from a preset (``desk`` or ``paper``), then an optional flat
``key = value`` config file, then ``--set key=value`` overrides. Keys are the
field names of ModelConfig, TrainConfig and SynthConfig; unknown keys are
rejected. ``train`` echoes the resolved settings to ``<out>/config.txt``,
which can be fed back with ``--config``.
"""
from __future__ import annotations

import os

_threads = os.environ.get("B2F_THREADS")
if _threads:
    # best effort: only effective if numpy has not been imported yet
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import blur_synth, flow_io, training
from .autodiff import Tensor
from .model import ConfigError, ModelConfig, check_divisible, estimate_fullres, init_params

logger = logging.getLogger("b2f")

CONFIG_NAME = "config.txt"

# the desk preset trains in well under an hour on one CPU core
PRESETS = {
    "desk": {
        "levels": 4,
        "encoder_channels": (12, 16, 24, 32),
        "dense_growth": 12,
        "stn_hidden": 8,
        "context_channels": (32, 32, 24, 16, 16, 8),
        "loss_weights": training.DEFAULT_LOSS_WEIGHTS[:4],
        "lr": 3e-4,
        # coupled decay on a per-pixel mean loss stalls the small model
        "weight_decay": 0.0,
        "lr_halving_epochs": (20, 30, 35),
        "epochs": 40,
        "crop": 64,
        "height": 64,
        "width": 64,
    },
    "paper": {
        "lr": 1e-4,
        "lr_halving_epochs": (100, 150, 200, 250),
        "epochs": 300,
        "crop": 256,
        "height": 256,
        "width": 256,
        "s_max": 75.0,
        "discard_threshold": 100.0,
        "sprite_min_size": 48,
        "sprite_max_size": 128,
        "camera_s_max": 24.0,
    },
}

SECTIONS = (("model", ModelConfig), ("train", training.TrainConfig), ("synth", blur_synth.SynthConfig))


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _defaults() -> dict:
    out = {}
    for _, cls in SECTIONS:
        for f in dataclasses.fields(cls):
            if f.name in out:
                raise AssertionError(f"config key {f.name!r} is defined twice")
            out[f.name] = getattr(cls(), f.name) if f.default is dataclasses.MISSING else f.default
    return out


def _parse_value(key: str, text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(like, tuple):
            items = [t.strip() for t in text.strip("()[]").split(",") if t.strip()]
            cast = type(like[0]) if like else float
            return tuple(cast(float(t)) if cast is int and float(t).is_integer() else cast(t) for t in items)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str, base: dict, source: str = "<config>") -> dict:
    out = dict(base)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in base:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value, base[key])
    return out


def resolve_config(preset: str = "desk", config_path=None, overrides=()) -> dict:
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    values = _defaults()
    values.update(PRESETS[preset])
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(encoding="utf-8"), values, str(path))
    if overrides:
        values = parse_config_text("\n".join(overrides), values, "--set")
    return values


def config_text(values: dict) -> str:
    lines = []
    for section, cls in SECTIONS:
        lines.append(f"# {section}")
        lines.extend(f"{f.name} = {_format_value(values[f.name])}" for f in dataclasses.fields(cls))
    return "\n".join(lines) + "\n"


def build(values: dict, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    try:
        return cls(**{k: v for k, v in values.items() if k in names})
    except (ValueError, ConfigError) as exc:
        raise UsageError(str(exc)) from None


def _values_for(args, ckpt=None) -> dict:
    """Resolve settings; for checkpoint-based commands default to the run's echo file."""
    config = args.config
    if config is None and ckpt is not None:
        echo = Path(ckpt).parent / CONFIG_NAME
        if echo.exists():
            config = echo
    values = resolve_config(args.preset, config, args.set)
    if getattr(args, "no_stn", False):
        values["use_stn"] = False
    if getattr(args, "no_rb", False):
        values["use_refining_block"] = False
    if getattr(args, "seed", None) is not None and "seed" in values:
        values["seed"] = args.seed
    return values


def _threads() -> int:
    raw = os.environ.get("B2F_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"B2F_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

def _draw_line(canvas, x0, y0, x1, y1, color):
    steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.round(np.linspace(x0, x1, steps)).astype(int)
    ys = np.round(np.linspace(y0, y1, steps)).astype(int)
    ok = (xs >= 0) & (xs < canvas.shape[1]) & (ys >= 0) & (ys < canvas.shape[0])
    canvas[ys[ok], xs[ok]] = color


def plot_curves(series: list, width: int = 320, height: int = 200) -> np.ndarray:
    """Rasterise (values, rgb) series sharing one y-range into an (H, W, 3) uint8 image."""
    canvas = np.full((height, width, 3), 255, np.uint8)
    margin = 12
    _draw_line(canvas, margin, height - margin, width - margin, height - margin, (0, 0, 0))
    _draw_line(canvas, margin, margin, margin, height - margin, (0, 0, 0))
    finite = [np.asarray(v, float)[np.isfinite(v)] for v, _ in series]
    finite = [f for f in finite if f.size]
    if not finite:
        return canvas
    top = max(float(f.max()) for f in finite)
    top = top if top > 0 else 1.0
    for values, color in series:
        values = np.asarray(values, float)
        n = len(values)
        if n == 0:
            continue
        xs = margin + (np.arange(n) / max(n - 1, 1)) * (width - 2 * margin)
        ys = height - margin - np.clip(values / top, 0, 1) * (height - 2 * margin)
        pts = [(x, y) for x, y, v in zip(xs, ys, values) if np.isfinite(v)]
        for (xa, ya), (xb, yb) in zip(pts, pts[1:]):
            _draw_line(canvas, xa, ya, xb, yb, color)
        for x, y in pts:
            canvas[int(round(y)), int(round(x))] = color
    return canvas


def write_loss_plot(history: list, path) -> None:
    train = [r["train_loss"] for r in history]
    val = [r["val_min_epe"] for r in history]
    flow_io.write_ppm(path, plot_curves([(train, (200, 30, 30)), (val, (30, 60, 200))]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_data(path, crop=None) -> training.Dataset:
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    return training.load_dataset(manifest, crop)


def cmd_generate(args) -> int:
    if args.count < 0 or (args.val_count is not None and args.val_count < 0):
        raise UsageError("--count and --val-count must be >= 0")
    values = _values_for(args)
    cfg = build(values, blur_synth.SynthConfig)
    workers = _threads()
    res = blur_synth.generate_dataset(args.count, args.out, cfg, seed=args.seed, workers=workers)
    print(f"manifest {res.manifest}")
    print(f"samples {len(res.s_values)} mean |s| {res.mean_s:.4f} mean n {res.mean_n:.4f}")
    if args.val_count:
        val = blur_synth.generate_dataset(args.val_count, Path(args.out) / "val", cfg,
                                          seed=args.seed + 1, workers=workers)
        print(f"manifest {val.manifest}")
        print(f"samples {len(val.s_values)} mean |s| {val.mean_s:.4f} mean n {val.mean_n:.4f}")
    return 0


def _val_path(args):
    if args.val is not None:
        return args.val
    candidate = Path(args.data) / "val" / "manifest.txt"
    return candidate if candidate.exists() else None


def cmd_train(args) -> int:
    values = _values_for(args)
    mcfg, tcfg = build(values, ModelConfig), build(values, training.TrainConfig)
    if len(tcfg.loss_weights) != mcfg.levels:
        raise UsageError(f"loss_weights needs {mcfg.levels} entries, got {len(tcfg.loss_weights)}")
    train_data = _load_data(args.data)
    val_path = _val_path(args)
    val_data = _load_data(val_path, tcfg.crop) if val_path is not None else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flow_io._atomic_write(out / CONFIG_NAME, config_text(values).encode("utf-8"))
    resume = training.load_checkpoint(args.resume) if args.resume else None

    def progress(row):
        print(f"epoch {row['epoch']} loss {row['train_loss']:.4f} val {row['val_min_epe']:.4f} "
              f"lr {row['lr']:g}", flush=True)

    result = training.train(mcfg, train_data, tcfg, val_data, out_dir=out, resume=resume,
                            progress=progress)
    write_loss_plot(result.history, out / "loss_curve.ppm")
    print(f"checkpoint {out / 'ckpt_final'}")
    return 0


def _load_model(args):
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    values = _values_for(args, ckpt_path)
    cfg = build(values, ModelConfig)
    params = init_params(cfg, 0)
    training.apply_checkpoint(training.load_checkpoint(ckpt_path), params)
    return cfg, params, values


def cmd_eval(args) -> int:
    cfg, params, values = _load_model(args)
    data = _load_data(args.data, values["crop"] if args.crop else None)
    res = training.evaluate(params, cfg, data)
    print(f"min-EPE {res.mean:.6f}")
    print(f"zero-flow baseline {res.zero_mean:.6f}")
    if args.csv:
        pairs = blur_synth.read_manifest(Path(args.data) if Path(args.data).is_file()
                                         else Path(args.data) / "manifest.txt")
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("index", "image", "min_epe", "zero_baseline"))
            for i, ((img, _), e, z) in enumerate(zip(pairs, res.per_sample, res.zero_baseline)):
                writer.writerow((i, img.name, repr(e), repr(z)))
        print(f"per-sample csv {args.csv}")
    return 0


def cmd_infer(args) -> int:
    cfg, params, _ = _load_model(args)
    image = flow_io.read_ppm(args.image)
    h, w = image.shape[:2]
    try:
        check_divisible(h, w, cfg.levels)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    x = Tensor(image.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
    flow = estimate_fullres(x, cfg, params).data[0].transpose(1, 2, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    flow_io.write_flo(flow, out / f"{stem}.flo")
    flow_io.write_ppm(out / f"{stem}_color.ppm", flow_io.flow_to_color(flow))
    print(f"flow {out / f'{stem}.flo'}")
    return 0


def cmd_viz(args) -> int:
    if args.metrics:
        write_loss_plot(training.read_metrics(args.metrics), args.out)
    elif args.flo:
        flow = flow_io.read_flo(args.flo, permissive=True)
        if args.gt:
            err, mean = flow_io.epe_map(flow, flow_io.read_flo(args.gt, permissive=True))
            flow_io.write_ppm(args.out, flow_io.epe_to_image(err, args.max))
            print(f"mean EPE {mean:.6f}")
        else:
            flow_io.write_ppm(args.out, flow_io.flow_to_color(flow, args.max))
    else:
        raise UsageError("viz needs --flo or --metrics")
    print(f"image {args.out}")
    return 0


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    values = _values_for(args)
    base, tcfg = build(values, ModelConfig), build(values, training.TrainConfig)
    if args.only == "stn":
        combos = [(True, True), (False, True)]
    elif args.only == "rb":
        combos = [(True, True), (True, False)]
    else:
        combos = [(False, False), (True, False), (False, True), (True, True)]
    cfgs = [dataclasses.replace(base, use_stn=s, use_refining_block=r) for s, r in combos]
    train_data = _load_data(args.data)
    val_path = _val_path(args)
    if val_path is None:
        raise UsageError("ablate needs --val (or <data>/val)")
    val_data = _load_data(val_path, tcfg.crop)
    seeds = [tcfg.seed + i for i in range(args.seeds)]
    rows = training.ablation_suite(train_data, val_data, cfgs, tcfg, seeds, progress=print)
    table = training.ablation_markdown(rows)
    print(table, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        flow_io._atomic_write(args.out, table.encode("utf-8"))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_args(p, seed=True):
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", help="flat 'key = value' file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    if seed:
        p.add_argument("--seed", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="b2f", description="Optical flow from a single motion-blurred image.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="synthesise a blurred dataset")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--val-count", type=int, default=None, help="also write <out>/val")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="training dataset directory or manifest")
    p.add_argument("--val", help="validation dataset (default <data>/val when present)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-stn", action="store_true")
    p.add_argument("--no-rb", action="store_true")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="min-EPE of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", help="per-sample CSV output")
    p.add_argument("--crop", action="store_true", help="centre-crop to the configured crop size")
    p.add_argument("--no-stn", action="store_true")
    p.add_argument("--no-rb", action="store_true")
    _config_args(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict flow for one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-stn", action="store_true")
    p.add_argument("--no-rb", action="store_true")
    _config_args(p, seed=False)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz", help="render a flow, an EPE map or a loss curve")
    p.add_argument("--flo")
    p.add_argument("--gt", help="ground-truth flow: render the EPE map instead")
    p.add_argument("--metrics", help="metrics.csv: render the loss curve")
    p.add_argument("--max", type=float, default=None, help="magnitude for full saturation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="train the STN x RB grid and print a markdown table")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--only", choices=("stn", "rb"))
    p.add_argument("--out", help="write the markdown table here")
    _config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"b2f: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, training.TrainingDivergedError, training.CheckpointFormatError,
            training.IncompatibleCheckpointError, flow_io.FlowFormatError,
            blur_synth.GenerationError, ValueError) as exc:
        print(f"b2f: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
