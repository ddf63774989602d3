"""Self-supervised training: downsample HR scans, reconstruct them, repeat."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import as_bool, as_optional_float, as_optional_int, read_kv, write_kv
from .halsgen import GeneratorConfig, HeightAwareGenerator
from .losses import Normalizer, total_loss
from .rangeimg import (ChannelMode, RangeImage, SensorModel, convert_mode, load_range_image,
                       sensor_from_dict, sensor_to_dict, DEFAULT_DROP_THRESHOLD)

log = logging.getLogger(__name__)

PARAMS_FILE = "params.halp"
OPTIM_FILE = "optim.halp"
SIDECAR_FILE = "checkpoint.cfg"
LOSS_CSV = "loss.csv"


@dataclass
class TrainConfig:
    rate: int = 4
    batch_size: int = 32
    lr: float = 1e-4
    decay_factor: float = 0.5
    decay_period: int = 40
    epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    vnl_k: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    mask_empty: bool = False
    features: int = 64
    blocks: int = 16
    split: int = 4
    slope: float = 0.2
    input_skip: bool = False
    checkpoint_every: int = 1
    data_dir: str = ""

    def __post_init__(self):
        if self.rate < 2:
            raise ValueError(f"rate must be >= 2, got {self.rate}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_period < 1 or self.batch_size < 1:
            raise ValueError("decay period and batch size must be >= 1")

    def generator_config(self, in_channels: int = 2) -> GeneratorConfig:
        return GeneratorConfig(in_channels=in_channels, features=self.features, blocks=self.blocks,
                               split=self.split, rate=self.rate, slope=self.slope,
                               input_skip=self.input_skip)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in ("max_steps", "vnl_k"):
                v = as_optional_int(v)
            elif f.name == "clip_norm":
                v = as_optional_float(v)
            elif f.name in ("mask_empty", "input_skip"):
                v = as_bool(v)
            elif f.type in ("int", int):
                v = int(v)
            elif f.type in ("float", float):
                v = float(v)
            kw[f.name] = v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**kw)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_period)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params[name].data``."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        dtype = p.data.dtype
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = (beta1 * m + (1 - beta1) * g).astype(dtype)
        v = (beta2 * v + (1 - beta2) * g * g).astype(dtype)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(dtype)
    return state


def clip_gradients(params, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
    if norm > max_norm:
        k = max_norm / norm
        for p in params:
            p.grad = (p.grad * k).astype(p.grad.dtype)
    return norm


# -- data --------------------------------------------------------------------

@dataclass
class Dataset:
    """HR polar scans stacked as (N, 2, H, W) metres plus occupancy."""

    polar: np.ndarray
    occupancy: np.ndarray
    sensor: SensorModel

    @classmethod
    def from_images(cls, images: list[RangeImage], sensor: SensorModel) -> "Dataset":
        if not images:
            raise ValueError("dataset is empty")
        for im in images:
            if im.shape != (sensor.height, sensor.width):
                raise ValueError(f"image {im.shape} does not match sensor {sensor.height}x{sensor.width}")
        pol = [convert_mode(im, sensor, ChannelMode.POLAR) for im in images]
        return cls(np.stack([p.channels for p in pol]), np.stack([p.occupancy for p in pol]), sensor)

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        sensor = sensor_from_dict(read_kv(directory / "sensor.cfg"))
        files = sorted(directory.glob("*.hals"))
        return cls.from_images([load_range_image(f) for f in files], sensor)

    def __len__(self):
        return len(self.polar)

    def fit_normalizer(self) -> Normalizer:
        z = self.polar[:, 1][self.occupancy]
        lo, hi = float(z.min()), float(z.max())
        if hi - lo < 1e-6:
            hi = lo + 1.0
        return Normalizer(self.sensor.max_range, lo, hi)


def make_lr_input(hr_norm: np.ndarray, rate: int) -> np.ndarray:
    """Rows {0, rate, 2*rate, ...} of a (B, C, H, W) batch."""
    if hr_norm.shape[-2] % rate:
        raise ValueError(f"H={hr_norm.shape[-2]} not divisible by rate {rate}")
    return np.ascontiguousarray(hr_norm[..., ::rate, :])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory, gen: HeightAwareGenerator, state: AdamState, cfg: TrainConfig,
                    normalizer: Normalizer, sensor: SensorModel, epoch: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dc.save_tensors(directory / PARAMS_FILE, gen.named_arrays())
    optim = {f"m/{k}": v for k, v in state.m.items()}
    optim.update({f"v/{k}": v for k, v in state.v.items()})
    dc.save_tensors(directory / OPTIM_FILE, optim)
    side = {"step": state.step, "epoch": epoch}
    side.update({f"train.{k}": v for k, v in cfg.to_dict().items()})
    side.update({f"gen.{k}": v for k, v in gen.cfg.to_dict().items()})
    side.update({f"sensor.{k}": v for k, v in sensor_to_dict(sensor).items()})
    side.update(normalizer.to_dict())
    write_kv(directory / SIDECAR_FILE, side, "hals checkpoint")


@dataclass
class Checkpoint:
    generator: HeightAwareGenerator
    state: AdamState
    train_cfg: TrainConfig
    normalizer: Normalizer
    sensor: SensorModel
    epoch: int


def _prefixed(d, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in d.items() if k.startswith(prefix)}


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    side = read_kv(directory / SIDECAR_FILE)
    gcfg = GeneratorConfig.from_dict(_prefixed(side, "gen."))
    gen = HeightAwareGenerator(gcfg, seed=0)
    gen.load_arrays(dc.load_tensors(directory / PARAMS_FILE))
    state = AdamState(step=int(side["step"]))
    optim_path = directory / OPTIM_FILE
    if optim_path.exists():
        optim = dc.load_tensors(optim_path)
        state.m = _prefixed(optim, "m/")
        state.v = _prefixed(optim, "v/")
    return Checkpoint(gen, state, TrainConfig.from_dict(_prefixed(side, "train.")),
                      Normalizer.from_dict(side), sensor_from_dict(_prefixed(side, "sensor.")),
                      int(side["epoch"]))


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    generator: HeightAwareGenerator
    normalizer: Normalizer
    state: AdamState
    curve: list[dict]


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, step, 17]).integers(2 ** 31))


def train(cfg: TrainConfig, dataset: Dataset | None = None, out_dir=None,
          resume: Checkpoint | None = None, epoch_callback=None) -> TrainResult:
    """Run the training loop; returns the trained generator and loss curve.

    Shapes are validated before the first step. Each epoch shuffles with a
    generator seeded by (seed, epoch), so a run resumed from an epoch
    checkpoint replays the uninterrupted run exactly.
    """
    if dataset is None:
        dataset = Dataset.load(cfg.data_dir)
    sensor = dataset.sensor
    n = len(dataset)
    if sensor.height % cfg.rate:
        raise ValueError(f"sensor height {sensor.height} not divisible by rate {cfg.rate}")
    if n < cfg.batch_size:
        raise ValueError(f"dataset has {n} scans, fewer than batch size {cfg.batch_size}")

    if resume is None:
        gen = HeightAwareGenerator(cfg.generator_config(2), seed=cfg.seed)
        normalizer = dataset.fit_normalizer()
        state = AdamState()
        start_epoch = 0
    else:
        gen, normalizer, state = resume.generator, resume.normalizer, resume.state
        if gen.cfg.rate != cfg.rate:
            raise ValueError(f"checkpoint rate {gen.cfg.rate} != config rate {cfg.rate}")
        start_epoch = resume.epoch + 1
    hr_all = normalizer.normalize(dataset.polar, dataset.occupancy).astype(np.float32)

    out = Path(out_dir) if out_dir is not None else None
    curve = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        curve_fh = open(out / LOSS_CSV, "a" if resume else "w", newline="")
        writer = csv.writer(curve_fh)
        if resume is None:
            writer.writerow(["step", "epoch", "l1", "vnl", "total", "lr"])
    else:
        curve_fh = writer = None

    params = gen.params
    per_epoch = n // cfg.batch_size
    last_epoch = start_epoch - 1
    try:
        for epoch in range(start_epoch, cfg.epochs):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            last_epoch = epoch
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            t0 = time.perf_counter()
            for bi in range(per_epoch):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    break
                idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                hr = hr_all[idx]
                lr_in = make_lr_input(hr, cfg.rate)
                output = gen.forward(lr_in)
                terms = total_loss(output.q_fused, hr, sensor, cfg.vnl_k,
                                   _step_seed(cfg.seed, state.step), normalizer, cfg.mask_empty)
                loss_val = float(terms.total.data)
                if not np.isfinite(loss_val):
                    raise FloatingPointError(f"non-finite loss at step {state.step + 1}")
                dc.zero_grads(params.values())
                terms.total.backward()
                if cfg.clip_norm is not None:
                    clip_gradients(params.values(), cfg.clip_norm)
                adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                row = {"step": state.step, "epoch": epoch, "l1": float(terms.l1.data),
                       "vnl": float(terms.vnl.data), "total": loss_val, "lr": lr}
                curve.append(row)
                if writer is not None:
                    writer.writerow([row[k] for k in ("step", "epoch", "l1", "vnl", "total", "lr")])
            log.debug("epoch %d done in %.2fs", epoch, time.perf_counter() - t0)
            if out is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1):
                curve_fh.flush()
                save_checkpoint(out, gen, state, cfg, normalizer, sensor, epoch)
            if epoch_callback is not None:
                epoch_callback(epoch, gen, state)
    finally:
        if curve_fh is not None:
            curve_fh.close()
    if out is not None and last_epoch >= start_epoch:
        save_checkpoint(out, gen, state, cfg, normalizer, sensor, last_epoch)
    return TrainResult(gen, normalizer, state, curve)


# -- inference ----------------------------------------------------------------

def upsample(gen: HeightAwareGenerator, lr_image: RangeImage, lr_sensor: SensorModel,
             normalizer: Normalizer, drop_threshold: float = DEFAULT_DROP_THRESHOLD) -> RangeImage:
    """Run the generator on one LR scan; returns the polar HR image in metres."""
    polar = convert_mode(lr_image, lr_sensor, ChannelMode.POLAR)
    x = normalizer.normalize(polar.channels[None], polar.occupancy[None]).astype(gen.params["encoder.w"].dtype)
    out = gen.forward(x).q_fused.data[0].astype(np.float64)
    return RangeImage.from_dense(normalizer.denormalize(out), ChannelMode.POLAR, drop_threshold)
