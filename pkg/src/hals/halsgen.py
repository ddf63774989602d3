"""Height-aware two-branch generator.

Layout: 1x1 point encoder -> shared stack of dilated residual blocks. The
shallow branch taps the stack after ``split`` blocks, the deep branch at the
end. Each branch upsamples rows by ``rate`` and regresses ``C`` range
channels plus one mask logit. The two logits are softmax-normalised into
per-pixel confidence masks that blend the branch predictions.

With ``input_skip`` the measured rows (every ``rate``-th output row) are
copied from the input and each generated row is a residual over the
measured row above it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor

HEAD_INIT_SCALE = 0.1
# the 1x1 fuse closing each residual block gets the same damping; without it
# activations grow ~1.75x per block and a fresh 16-block stack reaches ~1e3
RESIDUAL_INIT_SCALE = 0.1


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 2
    features: int = 64
    blocks: int = 16
    split: int = 4
    rate: int = 4
    slope: float = 0.2
    dilations: tuple[int, ...] = (1, 2, 3)
    input_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not 1 <= self.split < self.blocks:
            raise ValueError(f"split must satisfy 1 <= split < blocks, got {self.split}/{self.blocks}")
        if self.rate < 2:
            raise ValueError(f"upsampling rate must be >= 2, got {self.rate}")
        if self.features % self.rate:
            raise ValueError(f"features ({self.features}) must be divisible by rate ({self.rate})")
        if self.in_channels < 1 or not self.dilations or min(self.dilations) < 1:
            raise ValueError("invalid channel count or dilation set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = ",".join(str(x) for x in self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        dil = d.get("dilations", "1,2,3")
        if isinstance(dil, str):
            dil = tuple(int(x) for x in dil.split(","))
        return cls(in_channels=int(d.get("in_channels", 2)), features=int(d.get("features", 64)),
                   blocks=int(d.get("blocks", 16)), split=int(d.get("split", 4)),
                   rate=int(d.get("rate", 4)), slope=float(d.get("slope", 0.2)), dilations=dil,
                   input_skip=str(d.get("input_skip", False)).lower() in ("1", "true", "yes"))


@dataclass
class GeneratorOutput:
    q_shallow: Tensor
    q_deep: Tensor
    m_shallow: Tensor
    m_deep: Tensor
    q_fused: Tensor
    logit_shallow: Tensor = field(repr=False, default=None)
    logit_deep: Tensor = field(repr=False, default=None)


def fuse(q_shallow: Tensor, logit_shallow: Tensor, q_deep: Tensor, logit_deep: Tensor):
    """Confidence-weighted blend of the two branch predictions."""
    m_s, m_d = dc.softmax_pair(logit_shallow, logit_deep)
    fused = dc.add(dc.mul(q_shallow, m_s), dc.mul(q_deep, m_d))
    return fused, m_s, m_d


def _conv_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    F, C, s = cfg.features, cfg.in_channels, cfg.rate
    shapes = {"encoder.w": (F, C, 1, 1), "encoder.b": (F,)}
    n_dil = len(cfg.dilations)
    for i in range(cfg.blocks):
        for j in range(n_dil):
            shapes[f"block{i}.dil{j}.w"] = (F, F, 3, 3)
            shapes[f"block{i}.dil{j}.b"] = (F,)
        shapes[f"block{i}.fuse.w"] = (F, n_dil * F, 1, 1)
        shapes[f"block{i}.fuse.b"] = (F,)
    for br in ("shallow", "deep"):
        shapes[f"{br}.up.w"] = (F * s, F, 3, 3)
        shapes[f"{br}.up.b"] = (F * s,)
        shapes[f"{br}.head1.w"] = (F, F, 3, 3)
        shapes[f"{br}.head1.b"] = (F,)
        shapes[f"{br}.head2.w"] = (C + 1, F, 1, 1)
        shapes[f"{br}.head2.b"] = (C + 1,)
    return shapes


def init_parameters(cfg: GeneratorConfig, seed: int = 0, dtype=np.float32) -> dict[str, Parameter]:
    """Uniform(+-sqrt(6/fan_in)) weights, zero biases, heads and residual fuses scaled by 0.1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _conv_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
            if ".head" in name:
                arr *= HEAD_INIT_SCALE
            elif ".fuse" in name:
                arr *= RESIDUAL_INIT_SCALE
        params[name] = Parameter(arr.astype(dtype), name=name)
    return params


class HeightAwareGenerator:
    def __init__(self, cfg: GeneratorConfig, params: dict[str, Parameter] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        missing = set(_conv_shapes(cfg)) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:4]}")

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = arrays[k].astype(p.dtype).copy()

    def astype(self, dtype) -> "HeightAwareGenerator":
        params = {k: Parameter(p.data.astype(dtype), name=k) for k, p in self.params.items()}
        return HeightAwareGenerator(self.cfg, params)

    def _conv(self, x, name, dilation=1):
        return dc.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], dilation)

    def drb_block(self, x: Tensor, i: int) -> Tensor:
        """Parallel dilated 3x3 convs -> concat -> 1x1 fuse -> + identity."""
        if x.shape[1] != self.cfg.features:
            raise ValueError(f"block expects {self.cfg.features} channels, got {x.shape[1]}")
        a = self.cfg.slope
        branches = [dc.leaky_relu(self._conv(x, f"block{i}.dil{j}", d), a)
                    for j, d in enumerate(self.cfg.dilations)]
        fused = dc.pointwise_mlp(dc.concat_channels(branches),
                                 self.params[f"block{i}.fuse.w"], self.params[f"block{i}.fuse.b"])
        return dc.add(x, fused)

    def _branch(self, x: Tensor, name: str, skip: Tensor | None) -> tuple[Tensor, Tensor]:
        a = self.cfg.slope
        up = dc.leaky_relu(dc.vertical_pixel_shuffle(self._conv(x, f"{name}.up"), self.cfg.rate), a)
        h = dc.leaky_relu(self._conv(up, f"{name}.head1"), a)
        out = dc.pointwise_mlp(h, self.params[f"{name}.head2.w"], self.params[f"{name}.head2.b"])
        C = self.cfg.in_channels
        q = dc.slice_channels(out, 0, C)
        if skip is not None:
            q = dc.add(dc.mul(q, Tensor(self._generated_rows(q.shape[2], q.dtype))), skip)
        return q, dc.slice_channels(out, C, C + 1)

    def _generated_rows(self, height: int, dtype) -> np.ndarray:
        mask = np.ones((1, 1, height, 1), dtype=dtype)
        mask[:, :, ::self.cfg.rate] = 0
        return mask

    def encode(self, x: Tensor) -> Tensor:
        return dc.leaky_relu(dc.pointwise_mlp(x, self.params["encoder.w"], self.params["encoder.b"]),
                             self.cfg.slope)

    def forward(self, q_lr) -> GeneratorOutput:
        x = q_lr if isinstance(q_lr, Tensor) else Tensor(np.asarray(q_lr))
        if x.data.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        skip = dc.gather_rows(x, skip_rows(x.shape[2], self.cfg.rate)) if self.cfg.input_skip else None
        h = self.encode(x)
        for i in range(self.cfg.split):
            h = self.drb_block(h, i)
        q_s, l_s = self._branch(h, "shallow", skip)
        for i in range(self.cfg.split, self.cfg.blocks):
            h = self.drb_block(h, i)
        q_d, l_d = self._branch(h, "deep", skip)
        fused, m_s, m_d = fuse(q_s, l_s, q_d, l_d)
        return GeneratorOutput(q_s, q_d, m_s, m_d, fused, l_s, l_d)

    __call__ = forward


def skip_rows(lr_height: int, rate: int) -> np.ndarray:
    """Input row feeding each output row of the input skip."""
    return np.repeat(np.arange(lr_height), rate)


def receptive_radius(n_blocks: int, dilations=(1, 2, 3)) -> int:
    """Half-width of the receptive field of ``n_blocks`` stacked blocks (3x3 kernels)."""
    return n_blocks * max(dilations)
