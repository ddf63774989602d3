"""Command-line entry point: ``hals <command> [options]``.

Every command accepts ``--print-config`` to show its effective settings as
``key=value`` lines and writes a ``manifest.cfg`` beside its outputs.
Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, beamstats, metrics, trainer, verify
from .config import format_kv, parse_kv, read_kv, write_kv
from .rangeimg import (ChannelMode, RangeImage, SensorModel, convert_mode, load_range_image, project,
                       save_range_image, sensor_from_dict, sensor_to_dict, unproject)
from .synthscan import (DEFAULT_SENSOR, DEFAULT_SENSOR_HEIGHT, ScanJob, random_scene, raycast_scan,
                        read_velodyne_bin, write_velodyne_bin)

log = logging.getLogger("hals")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
MANIFEST = "manifest.cfg"
SENSOR_FILE = "sensor.cfg"


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def worker_count() -> int:
    raw = os.environ.get("HALS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HALS_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _require(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _sensor_arg(path) -> SensorModel:
    return DEFAULT_SENSOR if path is None else sensor_from_dict(read_kv(path))


def manifest_path(out: Path) -> Path:
    return out / MANIFEST if out.is_dir() else out.with_name(out.stem + "." + MANIFEST)


def write_manifest(out: Path, command: str, config: dict, inputs, outputs, started: float) -> Path:
    d = {"command": command, "tool_version": __version__, "argv": " ".join(sys.argv[1:]),
         "seed": config.get("seed", ""),
         "inputs": ",".join(str(p) for p in inputs), "outputs": ",".join(str(p) for p in outputs),
         "wall_clock_s": round(time.time() - started, 3)}
    d.update({f"config.{k}": v for k, v in config.items()})
    path = manifest_path(out)
    write_kv(path, d, f"hals {command} run manifest")
    return path


def _scan_files(directory: Path, suffix=".hals"):
    return sorted(p for p in directory.glob(f"*{suffix}") if p.is_file())


# -- gen-data ------------------------------------------------------------------

def _gen_config(args) -> dict:
    cfg = {"scenes": args.scenes, "seed": args.seed, "difficulty": args.difficulty,
           "mode": ChannelMode.parse(args.mode).name.lower(), "sensor_height": DEFAULT_SENSOR_HEIGHT}
    cfg.update({f"sensor.{k}": v for k, v in sensor_to_dict(_sensor_arg(args.sensor)).items()})
    return cfg


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index]).integers(2 ** 31))


def cmd_gen_data(args) -> int:
    _require(args, "out")
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    started = time.time()
    sensor = _sensor_arg(args.sensor)
    mode = ChannelMode.parse(args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kv(out / SENSOR_FILE, sensor_to_dict(sensor), "sensor model")
    written = []
    for i in range(args.scenes):
        scene = random_scene(scene_seed(args.seed, i), args.difficulty)
        img = raycast_scan(ScanJob(scene, sensor, (0.0, 0.0, DEFAULT_SENSOR_HEIGHT)), mode)
        path = out / f"scan_{i:05d}.hals"
        save_range_image(path, img)
        written.append(path.name)
    write_manifest(out, "gen-data", _gen_config(args), [args.sensor or "default"], written, started)
    log.info("wrote %d scans to %s", len(written), out)
    return EXIT_OK


# -- stats ---------------------------------------------------------------------

def load_scans(directory: Path, sensor: SensorModel | None = None):
    """Range images from ``*.hals`` files, else ``*.bin`` clouds projected with the sensor."""
    if not directory.is_dir():
        raise FileNotFoundError(f"no such data directory: {directory}")
    if sensor is None and (directory / SENSOR_FILE).exists():
        sensor = sensor_from_dict(read_kv(directory / SENSOR_FILE))
    files = _scan_files(directory)
    if files:
        return [load_range_image(f) for f in files], files, sensor
    bins = _scan_files(directory, ".bin")
    if not bins:
        raise FileNotFoundError(f"no .hals or .bin scans in {directory}")
    if sensor is None:
        raise UsageError("projecting .bin scans needs --sensor or a sensor.cfg in the data directory")
    return [project(read_velodyne_bin(f), sensor) for f in bins], bins, sensor


def cmd_stats(args) -> int:
    _require(args, "data", "out")
    started = time.time()
    sensor = None if args.sensor is None else _sensor_arg(args.sensor)
    images, files, sensor = load_scans(Path(args.data), sensor)
    for im, f in zip(images, files):
        if sensor is not None and im.shape != (sensor.height, sensor.width):
            raise ValueError(f"{f.name}: image {im.shape} does not match sensor {sensor.height}x{sensor.width}")
    stats = beamstats.per_beam_stats(images, sensor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stats.write_csv(out)
    cfg = {"data": args.data, "frames": stats.frame_count,
           "empty_bin_fraction": beamstats.empty_bin_fraction(images)}
    write_manifest(out, "stats", cfg, [args.data], [out.name], started)
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _train_config(args) -> trainer.TrainConfig:
    d = {}
    if args.config:
        d.update(read_kv(args.config))
    for item in args.set or ():
        d.update(parse_kv(item))
    if args.data:
        d["data_dir"] = args.data
    try:
        return trainer.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.print_config:
        print(format_kv(cfg.to_dict()), end="")
        return EXIT_OK
    _require(args, "out")
    if not cfg.data_dir:
        raise UsageError("training needs data_dir in the config or --data")
    started = time.time()
    out = Path(args.out)
    resume = trainer.load_checkpoint(out) if args.resume else None
    result = trainer.train(cfg, trainer.Dataset.load(cfg.data_dir), out, resume)
    last = result.curve[-1] if result.curve else {}
    cfg_d = cfg.to_dict()
    cfg_d.update({f"final.{k}": v for k, v in last.items()})
    write_manifest(out, "train", cfg_d, [cfg.data_dir] + ([args.config] if args.config else []),
                   [trainer.PARAMS_FILE, trainer.OPTIM_FILE, trainer.SIDECAR_FILE, trainer.LOSS_CSV], started)
    return EXIT_OK


# -- upsample ------------------------------------------------------------------

def _lr_input(path: Path, lr_sensor: SensorModel) -> RangeImage:
    if path.suffix == ".bin":
        return project(read_velodyne_bin(path), lr_sensor, ChannelMode.POLAR)
    img = load_range_image(path)
    if img.shape != (lr_sensor.height, lr_sensor.width):
        raise ValueError(f"input {path.name} is {img.height}x{img.width} but the checkpoint expects "
                         f"LR scans of {lr_sensor.height}x{lr_sensor.width}")
    return img


def cmd_upsample(args) -> int:
    _require(args, "ckpt", "input", "out")
    started = time.time()
    ck = trainer.load_checkpoint(args.ckpt)
    rate = ck.generator.cfg.rate
    if args.rate is not None and args.rate != rate:
        raise ValueError(f"--rate {args.rate} does not match the checkpoint rate {rate}")
    lr_sensor = ck.sensor.downsampled(rate)
    inp = Path(args.input)
    lr_img = _lr_input(inp, lr_sensor)
    hr = trainer.upsample(ck.generator, lr_img, lr_sensor, ck.normalizer, args.drop_threshold)
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix in (".hals", ".bin") else out
    stem.parent.mkdir(parents=True, exist_ok=True)
    img_path, cloud_path = stem.with_suffix(".hals"), stem.with_suffix(".bin")
    save_range_image(img_path, hr)
    write_velodyne_bin(cloud_path, unproject(hr, ck.sensor, args.drop_threshold))
    cfg = {"ckpt": args.ckpt, "rate": rate, "drop_threshold": args.drop_threshold,
           "in_height": lr_img.height, "out_height": hr.height, "width": hr.width}
    write_manifest(img_path, "upsample", cfg, [args.ckpt, inp], [img_path.name, cloud_path.name], started)
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def _eval_one(job):
    name, pred_path, gt_path, sensor, voxel, seed = job
    pred, gt = load_range_image(pred_path), load_range_image(gt_path)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
    return name, metrics.evaluate_pair(pred, gt, sensor, voxel_size=voxel, seed=seed)


def cmd_eval(args) -> int:
    _require(args, "pred", "gt", "out")
    started = time.time()
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"no such directory: {d}")
    if args.sensor:
        sensor = _sensor_arg(args.sensor)
    elif (gt_dir / SENSOR_FILE).exists():
        sensor = sensor_from_dict(read_kv(gt_dir / SENSOR_FILE))
    else:
        raise UsageError("eval needs --sensor or a sensor.cfg in the ground-truth directory")
    gt_files = {p.name: p for p in _scan_files(gt_dir)}
    pairs = [(p.name, p, gt_files[p.name]) for p in _scan_files(pred_dir) if p.name in gt_files]
    if not pairs:
        raise FileNotFoundError(f"no matching .hals files between {pred_dir} and {gt_dir}")
    jobs = [(n, p, g, sensor, args.voxel, args.seed) for n, p, g in pairs]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_eval_one, jobs))
    else:
        rows = [_eval_one(j) for j in jobs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    agg = metrics.write_report_csv(out, rows)
    cfg = {"voxel": args.voxel, "seed": args.seed, "workers": workers,
           "emd_convention": metrics.EMD_CONVENTION, "cd_convention": metrics.CHAMFER_CONVENTION}
    cfg.update({f"mean.{k}": v for k, v in agg.items()})
    write_manifest(out, "eval", cfg, [pred_dir, gt_dir], [out.name], started)
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    started = time.time()
    levels = verify.LEVELS if args.level == "all" else (args.level,)
    worst = verify.run(levels, range(args.seed, args.seed + args.seeds), args.tol)
    failed = [k for k, v in worst.items() if not v < args.tol]
    for k, v in worst.items():
        print(f"{'FAIL' if k in failed else 'ok  '} {k:28s} max_rel_err={v:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg = {"level": args.level, "seeds": args.seeds, "seed": args.seed, "tol": args.tol}
        cfg.update({f"err.{k}": v for k, v in worst.items()})
        write_manifest(out, "gradcheck", cfg, [], [], started)
    if failed:
        raise VerificationError(f"{len(failed)} gradient check(s) at or above {args.tol}: {', '.join(failed)}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hals", description="Height-aware lidar super-resolution toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--print-config", action="store_true", help="print effective settings and exit")
        sp.set_defaults(func=func)
        return sp

    g = add("gen-data", cmd_gen_data, "ray-cast synthetic HR scans")
    g.add_argument("--scenes", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sensor", help="sensor key=value file (default: built-in 32x256 sensor)")
    g.add_argument("--difficulty", type=float, default=1.0)
    g.add_argument("--mode", default="polar", choices=[m.name.lower() for m in ChannelMode])
    g.add_argument("--out")

    s = add("stats", cmd_stats, "per-beam range statistics")
    s.add_argument("--data")
    s.add_argument("--sensor")
    s.add_argument("--out")

    t = add("train", cmd_train, "train the generator")
    t.add_argument("--config", help="key=value training config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    t.add_argument("--data", help="dataset directory (overrides data_dir)")
    t.add_argument("--out")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    u = add("upsample", cmd_upsample, "upsample one LR scan with a checkpoint")
    u.add_argument("--ckpt")
    u.add_argument("--in", dest="input")
    u.add_argument("--rate", type=int)
    u.add_argument("--drop-threshold", type=float, default=trainer.DEFAULT_DROP_THRESHOLD)
    u.add_argument("--out")

    e = add("eval", cmd_eval, "score predictions against ground truth")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--sensor")
    e.add_argument("--voxel", type=float, default=metrics.DEFAULT_VOXEL)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")

    c = add("gradcheck", cmd_gradcheck, "finite-difference check of every gradient")
    c.add_argument("--level", default="all", choices=verify.LEVELS + ("all",))
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=verify.TOLERANCE)
    c.add_argument("--out", help="directory for the run manifest")
    return p


def _print_config(args) -> None:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "print_config", "verbose", "command")}
    if args.command == "gen-data":
        d.update(_gen_config(args))
    print(format_kv(d), end="")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        if args.print_config and args.command != "train":
            _print_config(args)
            return EXIT_OK
        return args.func(args)
    except UsageError as e:
        print(f"hals {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as e:
        print(f"hals {args.command}: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, ValueError, KeyError, FloatingPointError) as e:
        print(f"hals {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
