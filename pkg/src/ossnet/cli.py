"""Command-line front end: ``python -m ossnet <subcommand> ...``.

Subcommands: phantom, train, infer, eval, bench.  Exit codes are 0 on
success, 1 for usage errors, 2 for bad input data and 3 for numeric
failures.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import shlex
import sys
from pathlib import Path

from .errors import CapabilityError, FormatError, NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ossnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ------------------------------------------------------------------- config


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:
        return None if text.lower() == "none" else int(text)
    return text


def build_configs(values: dict[str, str]):
    """Split flat settings into (TrainConfig, OssNetConfig); unknown keys raise UsageError."""
    from .model import OssNetConfig
    from .train import TrainConfig

    values = dict(values)
    preset = values.pop("preset", "C")
    train_defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    model_defaults = dataclasses.asdict(OssNetConfig.preset(preset))
    unknown = sorted(set(values) - set(train_defaults) - set(model_defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        tkw = {k: _coerce(v, train_defaults[k]) for k, v in values.items() if k in train_defaults}
        mkw = {k: _coerce(v, model_defaults[k]) for k, v in values.items() if k in model_defaults}
        return TrainConfig(**tkw), OssNetConfig.preset(preset, **mkw)
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from exc


def _settings(args) -> dict[str, str]:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text()))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return values


def _write_provenance(out_dir: Path, argv, effective: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cmd = "python -m ossnet " + " ".join(shlex.quote(a) for a in argv)
    (out_dir / "reproduce.sh").write_text("#!/bin/sh\n" + cmd + "\n")
    lines = [f"{k} = {v}" for k, v in sorted(effective.items())]
    (out_dir / "effective.cfg").write_text("\n".join(lines) + "\n")


def _flat(config) -> dict[str, str]:
    out = {}
    for k, v in dataclasses.asdict(config).items():
        out[k] = " ".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
    return out


# ----------------------------------------------------------------- dataset


def load_dataset(folder):
    """Pairs ``v<i>.osv`` / ``m<i>.osv`` in index order."""
    from .volume import load_mask, load_volume

    folder = Path(folder)
    vols = sorted(folder.glob("v*.osv"), key=lambda p: int(p.stem[1:]))
    if not vols:
        raise FileNotFoundError(f"no v*.osv volumes in {folder}")
    pairs = []
    for v in vols:
        m = folder / f"m{v.stem[1:]}.osv"
        if not m.exists():
            raise FileNotFoundError(f"missing mask {m} for {v}")
        pairs.append((load_volume(v), load_mask(m)))
    return pairs


# -------------------------------------------------------------- subcommands


def cmd_phantom(args, argv) -> int:
    from .volume import phantom_dataset, save_volume

    if args.count < 1:
        raise UsageError("--count must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    radii = args.radius_range
    if radii is None:
        # Defaults are tuned for 64^3; keep the blob-to-volume proportion elsewhere.
        scale = args.resolution / 64.0
        radii = (5.0 * scale, 12.0 * scale)
    try:
        pairs = phantom_dataset(args.count, args.resolution, args.seed, channels=args.channels,
                                blob_radius_range=tuple(radii))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for i, (vol, mask) in enumerate(pairs):
        save_volume(vol, out / f"v{i}.osv")
        save_volume(mask, out / f"m{i}.osv")
    _write_provenance(out, argv, {"count": args.count, "resolution": args.resolution,
                                  "seed": args.seed, "channels": args.channels,
                                  "blob_radius_range": " ".join(f"{r:g}" for r in radii)})
    print(f"wrote {args.count} volume/mask pairs to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .train import train

    tcfg, mcfg = build_configs(_settings(args))
    data = load_dataset(args.data)
    val = None
    if args.val_count:
        if args.val_count >= len(data):
            raise UsageError("--val-count must leave at least one training volume")
        data, val = data[:-args.val_count], data[-args.val_count:]
    out = Path(args.out)
    _write_provenance(out, argv, {**_flat(tcfg), **_flat(mcfg), "data": args.data,
                                  "val_count": args.val_count})
    result = train(tcfg, mcfg, data, val, out_dir=out)
    print(f"best epoch {result.best_epoch} dice {result.best_dice:.4f}; "
          f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_infer(args, argv) -> int:
    from .extract import ModelOracle, dense_extract, mise_extract, seeded_extract
    from .model import load_checkpoint
    from .volume import load_volume, save_volume

    params = load_checkpoint(args.ckpt)
    volume = load_volume(args.volume)
    target = args.target_res or volume.shape[0]
    init = args.init_res or max(1, target // 4)
    oracle = ModelOracle(params, volume)
    if args.mode == "dense":
        mask, report = dense_extract(oracle, target, args.threshold, args.max_batch,
                                     return_report=True)
    elif args.mode == "mise":
        mask, report = mise_extract(oracle, init, target, args.threshold, args.max_batch)
    else:
        mask, report = seeded_extract(params, volume, init, target, args.threshold,
                                      args.max_batch, oracle=oracle)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(mask, out)
    record = dict(report.to_dict(), command="python -m ossnet " + " ".join(map(shlex.quote, argv)))
    Path(str(out) + ".json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    print(report.to_text())
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .metrics import compare
    from .volume import load_mask

    pred, label = load_mask(args.pred), load_mask(args.label)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    report = compare(label, pred)
    print(json.dumps(report.to_dict(), sort_keys=True) if args.json else str(report))
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    from . import bench
    from .model import OssNetConfig, load_checkpoint

    out = Path(args.out) if args.out else None
    if args.kind == "memory":
        cfg = load_checkpoint(args.ckpt).config if args.ckpt else OssNetConfig.preset("C")
        result = bench.memory_sweep(cfg, [2 ** e for e in range(6, 13)])
    else:
        if not args.ckpt or not args.data:
            raise UsageError(f"bench {args.kind} needs --ckpt and --data")
        params = load_checkpoint(args.ckpt)
        pairs = load_dataset(args.data)[:args.limit]
        volumes = [v for v, _ in pairs]
        if args.kind == "batch":
            result = bench.sweep_max_batch(params, volumes, [2 ** e for e in (6, 8, 10, 12, 14)],
                                           args.init_res, args.target_res)
        else:
            result = bench.compare_inference(params, volumes, [m for _, m in pairs],
                                             args.init_res, args.target_res, args.max_batch)
    print(result.table())
    if result.summary:
        print(json.dumps({k: v for k, v in result.summary.items() if k != "table"}, sort_keys=True))
    if out is not None:
        _write_provenance(out, argv, {"kind": args.kind})
        (out / f"bench_{args.kind}.json").write_text(result.to_json() + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ossnet", description="Occupancy-network segmentation on voxel volumes.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate synthetic volume/mask pairs")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--channels", type=int, default=2)
    s.add_argument("--radius-range", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="blob radius range in voxels (default scales 5..12 from 64^3)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train a model on a phantom folder")
    s.add_argument("--config", help="flat key=value config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--data", required=True)
    s.add_argument("--val-count", type=int, default=0,
                   help="hold out the last N volumes for validation")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("infer", help="extract a segmentation mask from a volume")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--mode", choices=("dense", "mise", "seeded"), default="mise")
    s.add_argument("--target-res", type=int, default=None)
    s.add_argument("--init-res", type=int, default=None)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--max-batch", type=int, default=2 ** 14)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="compare a predicted mask with a label mask")
    s.add_argument("--pred", required=True)
    s.add_argument("--label", required=True)
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("bench", help="run a measurement sweep")
    s.add_argument("kind", choices=("batch", "inference", "memory"))
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--limit", type=int, default=5, help="number of volumes to use")
    s.add_argument("--init-res", type=int, default=None)
    s.add_argument("--target-res", type=int, default=None)
    s.add_argument("--max-batch", type=int, default=2 ** 14)
    s.add_argument("--out")
    return p


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "bench": cmd_bench}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = make_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(make_parser().format_help())
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        limiter = contextlib.nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.threads)
        with limiter:
            return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except CapabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
