"""Command-line entry point.

    cs3d [--config PATH] [--seed N] [--out DIR] <command> [options]

Commands: convert, synth, train, eval, profile, gradcheck.  Every run writes
its artifacts (CSV, checkpoints, event files) plus one ``manifest.json`` into
``--out``.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, events, gradcheck, profiler, serialize
from .network import VARIANTS, ConfigError, ModelConfig, apply_ablation, build_model, variant_config
from .ssn import SsnParams
from .train import TrainConfig, evaluate, train

log = logging.getLogger("cs3d")

DEFAULTS = {
    "model": {"variant": "cs3d"},
    "train": {"learning_rate": 1e-4, "batch_size": 16, "epochs": 30},
    "data": {"synth": "moving-bar-4dir", "n_per_class": 50, "size": 32, "bins": 16, "test_fraction": 0.2,
             "threshold": 0.15, "policy": "count"},
}


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, err: BaseException):
        super().__init__(f"{stage}: {err}")
        self.stage = stage


class _Stage:
    """``with _Stage("load data"):`` tags any failure inside with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("%s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, UsageError, KeyboardInterrupt)):
            raise StageError(self.name, exc) from exc
        return False


# ---------------------------------------------------------------------------
# config merging


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_run_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise UsageError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"config file {path}: unknown sections {sorted(unknown)}")
    return _merge(DEFAULTS, raw)


def _model_config(cfg: dict, args, input_shape, class_count: int) -> ModelConfig:
    """Resolve the model section, then apply the command-line overrides."""
    m = cfg["model"]
    if "blocks" in m:
        mc = ModelConfig.from_dict({**m, "input_shape": list(input_shape), "class_count": class_count})
    else:
        variant = m.get("variant", "cs3d")
        if variant not in VARIANTS:
            raise UsageError(f"unknown model variant {variant!r}; choose from {', '.join(VARIANTS)}")
        mc = variant_config(variant, tuple(input_shape), class_count)
    mc.seed = int(args.seed)
    theta = getattr(args, "ssn_theta", None)
    beta = getattr(args, "ssn_beta", None)
    if theta is not None or beta is not None:
        mc.ssn_defaults = SsnParams(mc.ssn_defaults.theta if theta is None else theta,
                                    mc.ssn_defaults.beta if beta is None else beta)
    ablate = {k: bool(getattr(args, k, False)) for k in ("no_ssn", "no_factorized", "no_temporal_attn", "no_spatial_attn")}
    if any(ablate.values()):
        mc = apply_ablation(mc, **ablate)
    return mc


def _apply_data_flags(cfg: dict, args) -> None:
    d = cfg["data"]
    if getattr(args, "data", None):
        d["manifest"] = args.data
        d.pop("synth", None)
    if getattr(args, "synth", None):
        d["synth"] = args.synth
        d.pop("manifest", None)
    for key in ("n_per_class", "size", "bins", "test_fraction", "threshold", "policy"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v


def _load_dataset(d: dict, seed: int) -> events.Dataset:
    if d.get("manifest"):
        path = Path(d["manifest"])
        if not path.is_file():
            raise UsageError(f"dataset manifest {path} does not exist")
        return events.load_manifest_dataset(path, int(d["bins"]), int(d["size"]), int(d["size"]), d.get("policy", "count"))
    kind = d.get("synth", "moving-bar-4dir")
    if kind not in events.SYNTH_KINDS:
        raise UsageError(f"unknown synthetic dataset {kind!r}; choose from {', '.join(events.SYNTH_KINDS)}")
    size = int(d["size"])
    return events.synth_dataset(kind, int(d["n_per_class"]), (size, size), seed, int(d["bins"]), d.get("policy", "count"),
                                threshold=float(d["threshold"]))


# ---------------------------------------------------------------------------
# manifest


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(out: Path, subcommand: str, config: dict, seed: int, artifacts: list[Path], started: str) -> Path:
    """One manifest per run.  Timestamps are the only run-to-run varying field."""
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "artifacts": sorted(str(p.relative_to(out)) if p.is_relative_to(out) else str(p) for p in artifacts),
        "started": started,
        "finished": _now(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    src = Path(args.input)
    if not src.exists():
        raise UsageError(f"input {src} does not exist")
    with _Stage("read frames"):
        if src.is_dir():
            frames = events.load_frames_dir(src)
        elif src.suffix == ".npy":
            frames = np.load(src)
        else:
            frames = events.load_video_csv(src)
        if args.crop or args.resize:
            target = tuple(args.resize) if args.resize else (tuple(args.crop[2:]) if args.crop else frames.shape[1:3])
            frames = events.preprocess_frames(frames, tuple(args.crop) if args.crop else None, target)
    with _Stage("simulate events"):
        stream = events.frames_to_events(frames, args.threshold, 1e6 / args.fps)
    artifacts = []
    with _Stage("write events"):
        ev_path = out / f"events.{args.format}"
        events.write_events(stream, ev_path, args.format)
        artifacts.append(ev_path)
        if args.bins:
            grid = events.voxelize(stream, args.bins, stream.height, stream.width, args.policy)
            vox = out / "voxels.tnsr"
            serialize.save_tensor(vox, grid.data)
            artifacts.append(vox)
    print(f"{len(stream)} events from {len(frames)} frames ({stream.width}x{stream.height}) -> {ev_path}")
    resolved = {"input": str(src), "threshold": args.threshold, "fps": args.fps, "format": args.format,
                "crop": args.crop, "resize": args.resize, "bins": args.bins, "policy": args.policy}
    return resolved, artifacts


def cmd_synth(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    _apply_data_flags(cfg, args)
    d = cfg["data"]
    kind = d.get("synth", "moving-bar-4dir")
    if kind not in events.SYNTH_KINDS:
        raise UsageError(f"unknown synthetic dataset {kind!r}; choose from {', '.join(events.SYNTH_KINDS)}")
    size = int(d["size"])
    with _Stage("generate streams"):
        streams = events.synth_streams(kind, int(d["n_per_class"]), (size, size), args.seed, threshold=float(d["threshold"]))
    ev_dir = out / "events"
    ev_dir.mkdir(parents=True, exist_ok=True)
    artifacts, entries = [], []
    with _Stage("write events"):
        for i, s in enumerate(streams):
            p = ev_dir / f"{i:04d}.{args.format}"
            events.write_events(s, p, args.format)
            artifacts.append(p)
            entries.append((f"events/{p.name}", s.label, s.width, s.height))
        man = out / "dataset.csv"
        events.write_manifest(man, entries)
        artifacts.append(man)
    print(f"{len(streams)} streams ({kind}, {len(events.SYNTH_KINDS[kind])} classes) -> {man}")
    return {"data": d, "format": args.format}, artifacts


def _prepare(args, cfg: dict, split: bool = True) -> tuple[events.Dataset, events.Dataset, ModelConfig]:
    """(train split, held-out split, model config); with ``split=False`` both are the whole set."""
    _apply_data_flags(cfg, args)
    with _Stage("load data"):
        data = _load_dataset(cfg["data"], args.seed)
        train_set, test_set = data.split(float(cfg["data"]["test_fraction"]), args.seed) if split else (data, data)
    with _Stage("build model"):
        mc = _model_config(cfg, args, data.x.shape[1:], data.class_count)
    return train_set, test_set, mc


def cmd_train(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    t = cfg["train"]
    for key in ("learning_rate", "batch_size", "epochs", "target_accuracy"):
        v = getattr(args, key, None)
        if v is not None:
            t[key] = v
    train_set, test_set, mc = _prepare(args, cfg)
    try:
        target = t.get("target_accuracy")
        tc = TrainConfig(float(t["learning_rate"]), int(t["batch_size"]), int(t["epochs"]), seed=args.seed,
                         target_accuracy=None if target is None else float(target))
    except ValueError as e:
        raise UsageError(str(e)) from None
    with _Stage("build model"):
        model = build_model(mc)
    with _Stage("train"):
        history = train(model, train_set, tc, test_set if len(test_set) else None, restore_best=True)
    artifacts = []
    with _Stage("write artifacts"):
        hist = out / "history.csv"
        hist.write_text(history.to_csv())
        ckpt = out / "model.ckpt"
        model.save(ckpt)
        artifacts += [hist, ckpt]
        if len(test_set):
            metrics = evaluate(model, test_set)
            mpath = out / "metrics.csv"
            mpath.write_text(metrics.to_csv())
            artifacts.append(mpath)
            print(f"held-out accuracy {metrics.accuracy:.4f} (best epoch {history.best_epoch})")
        resolved = {"model": mc.to_dict(), "train": t, "data": cfg["data"]}
        cpath = out / "config.yaml"
        cpath.write_text(yaml.safe_dump(resolved, sort_keys=False))
        artifacts.append(cpath)
    print(f"{len(history.records)} epochs, {history.steps} steps -> {out}")
    return resolved, artifacts


def cmd_eval(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if ckpt is not None and not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    _, test_set, mc = _prepare(args, cfg, split=not args.all)
    with _Stage("build model"):
        model = build_model(mc)
        if ckpt is not None:
            model.load(ckpt)
    with _Stage("evaluate"):
        metrics = evaluate(model, test_set)
    mpath = out / "metrics.csv"
    mpath.write_text(metrics.to_csv())
    print(f"accuracy {metrics.accuracy:.4f} on {metrics.total} samples")
    return {"model": mc.to_dict(), "data": cfg["data"], "checkpoint": None if ckpt is None else str(ckpt)}, [mpath]


def _shape_arg(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use C,T,H,W") from None
    if len(shape) != 4 or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use C,T,H,W")
    return shape


def cmd_profile(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    trace = None
    if args.trace:
        if not Path(args.trace).is_file():
            raise UsageError(f"power trace {args.trace} does not exist")
        with _Stage("read power trace"):
            trace = profiler.read_power_trace(args.trace)
            if args.device:
                trace.source = args.device
    shape = args.input_shape
    names = [n.strip() for n in args.compare.split(",")] if args.compare else [None]
    reports = []
    with _Stage("count FLOPs"):
        for name in names:
            local = copy.deepcopy(cfg)
            if name is not None:
                if name not in VARIANTS:
                    raise UsageError(f"unknown model {name!r} in --compare; choose from {', '.join(VARIANTS)}")
                local["model"] = {"variant": name}
            mc = _model_config(local, args, shape, args.classes)
            reports.append(profiler.profile(build_model(mc), shape, trace, args.method))
    artifacts = []
    if args.compare:
        text = profiler.compare_csv(reports)
        path = out / "compare.csv"
        path.write_text(text)
        artifacts.append(path)
        print(text if args.format == "csv" else "\n\n".join(r.to_table() for r in reports), end="" if args.format == "csv" else "\n")
    else:
        r = reports[0]
        path = out / "profile.csv"
        path.write_text(r.to_csv())
        artifacts.append(path)
        print(r.to_csv() if args.format == "csv" else r.to_table(), end="" if args.format == "csv" else "\n")
    resolved = {"models": [r.model for r in reports], "input_shape": list(shape), "trace": args.trace, "method": args.method}
    return resolved, artifacts


class GradcheckFailed(Exception):
    pass


def cmd_gradcheck(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    names = None
    if args.cases:
        names = [n.strip() for n in args.cases.split(",")]
        bad = [n for n in names if n not in gradcheck.CASES and n != "ssn"]
        if bad:
            raise UsageError(f"unknown gradcheck cases {bad}; choose from {', '.join([*gradcheck.CASES, 'ssn'])}")
    with _Stage("gradient checks"):
        results = gradcheck.run_suite(names, seed=args.seed, h=args.h, tol=args.tol)
    print(gradcheck.format_results(results))
    path = out / "gradcheck.csv"
    lines = ["case,passed,max_rel_error"] + [f"{r.name},{int(r.passed)},{r.report.max_rel_error!r}" for r in results]
    path.write_text("\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        args._failure = f"gradient check failed for: {', '.join(failed)}"
    return {"cases": [r.name for r in results], "h": args.h, "tol": args.tol}, [path]


# ---------------------------------------------------------------------------
# parser


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}") from None
    return a, b


def _box(text: str) -> tuple[int, int, int, int]:
    try:
        box = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TOP,LEFT,H,W, got {text!r}") from None
    if len(box) != 4:
        raise argparse.ArgumentTypeError(f"expected TOP,LEFT,H,W, got {text!r}")
    return box


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), metavar="PATH", help="YAML run config (model / train / data sections)")
    p.add_argument("--seed", type=_seed, default=d(0), help="seed for data, initialization and shuffling")
    p.add_argument("--out", default=d("runs"), metavar="DIR", help="artifact directory")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ssn-theta", type=float, help="SSN threshold")
    p.add_argument("--ssn-beta", type=float, help="SSN surrogate sharpness")
    p.add_argument("--no-ssn", action="store_true", help="ReLU instead of SSN")
    p.add_argument("--no-factorized", action="store_true", help="dense 3x3x3 convs instead of factorized blocks")
    p.add_argument("--no-temporal-attn", action="store_true")
    p.add_argument("--no-spatial-attn", action="store_true")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="CSV", help="dataset manifest (path,label,width,height)")
    p.add_argument("--synth", choices=sorted(events.SYNTH_KINDS), help="synthetic dataset instead of a manifest")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--size", type=int, help="voxel grid height and width")
    p.add_argument("--bins", type=int, help="time bins T")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--threshold", type=float, help="contrast threshold for synthetic streams")
    p.add_argument("--policy", choices=["count", "binary", "bilinear-time"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cs3d", description="CS3D event-camera classifier toolkit")
    parser.add_argument("--version", action="version", version=f"cs3d {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("convert", "frames (directory, .npy or frame,y,x,intensity CSV) to an event file")
    p.add_argument("--input", required=True, metavar="PATH")
    p.add_argument("--threshold", type=float, default=0.15, help="log-intensity contrast threshold")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--format", choices=["csv", "bin"], default="csv")
    p.add_argument("--crop", type=_box, metavar="TOP,LEFT,H,W")
    p.add_argument("--resize", type=_pair, metavar="H,W")
    p.add_argument("--bins", type=int, default=0, help="also dump a voxel grid with this many bins")
    p.add_argument("--policy", choices=["count", "binary", "bilinear-time"], default="count")
    p.set_defaults(func=cmd_convert)

    p = add("synth", "write a synthetic labelled event dataset")
    _data_flags(p)
    p.add_argument("--format", choices=["csv", "bin"], default="csv")
    p.set_defaults(func=cmd_synth)

    p = add("train", "train a model and write history, checkpoint and metrics")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--target-accuracy", type=float, help="stop once held-out accuracy reaches this fraction")
    p.set_defaults(func=cmd_train)

    p = add("eval", "evaluate a checkpoint on the held-out split")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", help="weights to load (default: untrained initialization)")
    p.add_argument("--all", action="store_true", help="evaluate on the whole dataset, not the held-out split")
    p.set_defaults(func=cmd_eval)

    p = add("profile", "parameters, FLOPs and optional energy")
    _model_flags(p)
    p.add_argument("--input-shape", type=_shape_arg, default=(2, 16, 112, 112), metavar="C,T,H,W")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--compare", metavar="A,B,...", help=f"comma list of models from {', '.join(VARIANTS)}")
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--trace", metavar="CSV", help="power trace (t_s,watts) for energy")
    p.add_argument("--device", help="device label for the energy line")
    p.add_argument("--method", choices=["left", "trapezoid"], default="left")
    p.set_defaults(func=cmd_profile)

    p = add("gradcheck", "finite-difference gradient suites")
    p.add_argument("--cases", metavar="A,B,...", help="subset of cases")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on bad usage, 0 on --help / --version
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    out = Path(args.out)
    started = _now()
    try:
        cfg = _load_run_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        resolved, artifacts = args.func(args, cfg, out)
        write_run_manifest(out, args.command, resolved, args.seed, artifacts, started)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"cs3d {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (StageError, ConfigError, OSError) as e:
        print(f"cs3d {args.command}: error: {e}", file=sys.stderr)
        return 1
    failure = getattr(args, "_failure", None)
    if failure:
        print(f"cs3d {args.command}: {failure}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
