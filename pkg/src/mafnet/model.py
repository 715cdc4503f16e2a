"""Two-stream counting network: convolutional backbones with MAF modules and the MMA regression head."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import MafModuleParams, init_maf_module, maf_module
from .tensor import DimensionError, Tensor

# encoder stages that can host a MAF module, in attachment order (1-based)
_MAF_STAGES = (2, 3, 4, 5)
# stages whose outputs feed the regression head: 1/8, 1/16, 1/32
_HEAD_STAGES = (3, 4, 5)


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    stage_conv_counts: tuple[int, ...] = (1, 1, 2, 2, 2)

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_conv_counts = tuple(self.stage_conv_counts)
        if len(self.stage_channels) != 5 or len(self.stage_conv_counts) != 5:
            raise ValueError("backbone needs exactly 5 stages")
        if min(self.stage_channels) < 1 or min(self.stage_conv_counts) < 1:
            raise ValueError("stage channels and conv counts must be positive")


@dataclass
class EncoderConfig:
    num_maf_modules: int = 3
    patch_sizes: tuple[int, ...] = (2, 1, 1)
    maf_depths: tuple[int, ...] = (2, 2, 2)
    dim: int = 64
    num_heads: int = 4
    use_positional_embedding: bool = False
    embed_gain: float = 0.1

    def __post_init__(self):
        self.patch_sizes = tuple(self.patch_sizes)
        self.maf_depths = tuple(self.maf_depths)
        if not 0 <= self.num_maf_modules <= 4:
            raise ValueError("num_maf_modules must be in 0..4")
        if len(self.patch_sizes) != self.num_maf_modules or len(self.maf_depths) != self.num_maf_modules:
            raise ValueError("patch_sizes and maf_depths need one entry per MAF module")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")

    @property
    def maf_stages(self) -> tuple[int, ...]:
        return _MAF_STAGES[len(_MAF_STAGES) - self.num_maf_modules:]


@dataclass
class MmaConfig:
    width: int = 32
    dilation_rates: tuple[int, ...] = (1, 2, 3)
    # Shrinks the initial 1x1 output projection so early predictions sit near
    # the target scale; otherwise the first optimiser steps push every cell
    # below zero and the final ReLU never recovers.
    out_gain: float = 0.1

    def __post_init__(self):
        self.dilation_rates = tuple(self.dilation_rates)
        if self.dilation_rates != (1, 2, 3):
            raise ValueError("the regression head uses dilation rates (1, 2, 3)")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mma: MmaConfig = field(default_factory=MmaConfig)

    @classmethod
    def toy(cls) -> ModelConfig:
        return cls()

    @classmethod
    def paper(cls) -> ModelConfig:
        return cls(
            backbone=BackboneConfig((64, 128, 256, 512, 512), (2, 2, 4, 4, 4)),
            encoder=EncoderConfig(dim=768, num_heads=8),
            mma=MmaConfig(width=128),
        )

    @classmethod
    def preset(cls, name: str) -> ModelConfig:
        presets = {"toy": cls.toy, "paper": cls.paper, "paper-scale": cls.paper}
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose toy or paper")
        return presets[name]()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(
            backbone=BackboneConfig(**d.get("backbone", {})),
            encoder=EncoderConfig(**d.get("encoder", {})),
            mma=MmaConfig(**d.get("mma", {})),
        )


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor


@dataclass
class MmaParams:
    proj: list[ConvParams]
    dilated: list[ConvParams]
    skip: ConvParams
    fuse: ConvParams
    out: ConvParams


@dataclass
class ModelParams:
    rgb_backbone: list[list[ConvParams]]
    thermal_backbone: list[list[ConvParams]]
    maf_modules: list[MafModuleParams]
    mma: MmaParams


@dataclass
class FeaturePair:
    rgb: Tensor
    thermal: Tensor


def _conv_params(rng, cin: int, cout: int, k: int, dtype, name: str, gain: float = 1.0) -> ConvParams:
    std = gain * math.sqrt(2.0 / (cin * k * k))
    w = Tensor(np.asarray(rng.normal(0.0, std, size=(cout, cin, k, k)), dtype=dtype), requires_grad=True,
               name=f"{name}.weight")
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
    return ConvParams(w, b)


def _init_backbone(rng, cfg: BackboneConfig, in_channels: int, dtype, prefix: str) -> list[list[ConvParams]]:
    stages = []
    cin = in_channels
    for s, (cout, count) in enumerate(zip(cfg.stage_channels, cfg.stage_conv_counts), start=1):
        convs = []
        for i in range(count):
            convs.append(_conv_params(rng, cin, cout, 3, dtype, f"{prefix}.stage{s}.conv{i}"))
            cin = cout
        stages.append(convs)
    return stages


class _ShapeOnly:
    """Stand-in generator returning zero-stride views, for counting parameters without allocating them."""

    def normal(self, loc, scale, size):
        return np.broadcast_to(np.zeros((), dtype=np.float32), size)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, shapes_only: bool = False) -> ModelParams:
    """Seeded initialisation; parameters are drawn in a fixed order."""
    rng = _ShapeOnly() if shapes_only else np.random.default_rng(seed)
    bb, enc, mma = cfg.backbone, cfg.encoder, cfg.mma
    rgb = _init_backbone(rng, bb, 3, dtype, "rgb")
    thermal = _init_backbone(rng, bb, 1, dtype, "thermal")
    mafs = []
    for i, (stage, p, depth) in enumerate(zip(enc.maf_stages, enc.patch_sizes, enc.maf_depths)):
        mafs.append(init_maf_module(
            rng, bb.stage_channels[stage - 1], p, enc.dim, enc.num_heads, depth,
            use_positional_embedding=enc.use_positional_embedding,
            max_tokens=_max_tokens(stage, p) if enc.use_positional_embedding else 0,
            embed_gain=enc.embed_gain, dtype=dtype, prefix=f"maf{i}"))
    m = mma.width
    head = MmaParams(
        proj=[_conv_params(rng, 2 * bb.stage_channels[s - 1], m, 3, dtype, f"mma.proj{j}")
              for j, s in enumerate(_HEAD_STAGES)],
        dilated=[_conv_params(rng, m, m, 3, dtype, f"mma.dilated{r}") for r in mma.dilation_rates],
        skip=_conv_params(rng, m, 3 * m, 1, dtype, "mma.skip"),
        fuse=_conv_params(rng, 3 * m, m, 3, dtype, "mma.fuse"),
        out=_conv_params(rng, m, 1, 1, dtype, "mma.out", mma.out_gain),
    )
    return ModelParams(rgb, thermal, mafs, head)


# learned position tables are sized for inputs up to this many pixels per side
MAX_POSITIONAL_SIDE = 512


def _max_tokens(stage: int, patch: int) -> int:
    side = MAX_POSITIONAL_SIDE // 2 ** stage // patch
    return max(side * side, 1)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk a parameter tree (dataclasses, lists) yielding (dotted name, tensor)."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (Tensor, list)) or dataclasses.is_dataclass(val):
                yield from named_tensors(val, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from named_tensors(v, f"{prefix}.{i}" if prefix else str(i))


def parameters(params) -> list[Tensor]:
    return [t for _, t in named_tensors(params)]


def map_tensors(obj, fn):
    """Rebuild a parameter tree with ``fn`` applied to every tensor."""
    if isinstance(obj, Tensor):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (Tensor, list)) or dataclasses.is_dataclass(val):
                changes[f.name] = map_tensors(val, fn)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [map_tensors(v, fn) for v in obj]
    return obj


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return map_tensors(params, lambda t: t.astype(dtype))


def parameter_count(params) -> int:
    return sum(t.size for t in parameters(params))


def _conv_relu(x: Tensor, c: ConvParams, padding: int = 1, dilation: int = 1) -> Tensor:
    return T.relu(T.conv2d(x, c.weight, c.bias, padding=padding, dilation=dilation))


def _run_stage(x: Tensor, convs: list[ConvParams]) -> Tensor:
    for c in convs:
        x = _conv_relu(x, c)
    return T.maxpool2d(x)


def check_input_size(height: int, width: int):
    if height % 64 or width % 64:
        raise DimensionError(f"input {height}x{width} must have both sides divisible by 64")


def _batch(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def encoder_forward(rgb: Tensor, thermal: Tensor, p: ModelParams, cfg: ModelConfig,
                    record: list | None = None) -> list[FeaturePair]:
    """Run both backbones with MAF fusion; returns the 1/8, 1/16, 1/32 feature pairs.

    Inputs are ``[3, H, W]``/``[1, H, W]`` or batched ``[B, 3, H, W]``/``[B, 1, H, W]``.
    """
    r, t = _batch(rgb), _batch(thermal)
    if r.shape[0] != t.shape[0] or r.shape[2:] != t.shape[2:]:
        raise DimensionError(f"rgb {rgb.shape} and thermal {thermal.shape} are not a registered pair")
    if r.shape[1] != 3 or t.shape[1] != 1:
        raise DimensionError("expected 3-channel rgb and 1-channel thermal input")
    check_input_size(*r.shape[2:])
    maf_at = dict(zip(cfg.encoder.maf_stages, p.maf_modules))
    pairs = []
    for stage in range(1, 6):
        r = _run_stage(r, p.rgb_backbone[stage - 1])
        t = _run_stage(t, p.thermal_backbone[stage - 1])
        if stage in maf_at:
            rec = None
            if record is not None:
                rec = []
                record.append({"stage": stage, "blocks": rec})
            r, t = maf_module(r, t, maf_at[stage], rec)
        if stage in _HEAD_STAGES:
            pairs.append(FeaturePair(r, t))
    return pairs


def mma_forward(pairs: list[FeaturePair], p: ModelParams) -> Tensor:
    """Aggregate three scales of paired features into a ``[B, 1, H/8, W/8]`` density map."""
    if len(pairs) != 3:
        raise DimensionError(f"regression head needs 3 feature pairs, got {len(pairs)}")
    head = p.mma
    fine = pairs[0].rgb.shape
    for i, pair in enumerate(pairs):
        if pair.rgb.shape != pair.thermal.shape:
            raise DimensionError(f"pair {i}: rgb {pair.rgb.shape} vs thermal {pair.thermal.shape}")
        expect = (fine[2] // 2 ** i, fine[3] // 2 ** i)
        if pair.rgb.shape[2:] != expect:
            raise DimensionError(f"pair {i} has spatial size {pair.rgb.shape[2:]}, expected {expect}")
    h, w = fine[2], fine[3]
    total = None
    for pair, proj in zip(pairs, head.proj):
        x = _conv_relu(T.concat([pair.rgb, pair.thermal], axis=1), proj)
        if x.shape[2:] != (h, w):
            x = T.upsample_bilinear(x, h, w)
        total = x if total is None else total + x
    branches = [_conv_relu(total, c, padding=r, dilation=r) for c, r in zip(head.dilated, (1, 2, 3))]
    skip = T.conv2d(total, head.skip.weight, head.skip.bias)
    x = T.concat(branches, axis=1) + skip
    x = _conv_relu(x, head.fuse)
    x = T.conv2d(x, head.out.weight, head.out.bias)
    return T.relu(x)


def model_forward(rgb: Tensor, thermal: Tensor, p: ModelParams, cfg: ModelConfig,
                  record: list | None = None) -> Tensor:
    return mma_forward(encoder_forward(rgb, thermal, p, cfg, record), p)


def predicted_count(density: Tensor) -> np.ndarray:
    """Per-sample integral of a ``[B, 1, h, w]`` density map."""
    d = density.data
    return d.reshape(d.shape[0], -1).astype(np.float64).sum(axis=1)


def describe(cfg: ModelConfig, seed: int = 0) -> dict:
    """Parameter names, shapes and counts for a configuration."""
    params = init_params(cfg, seed, shapes_only=True)
    shapes = {name: list(t.shape) for name, t in named_tensors(params)}
    groups: dict[str, int] = {}
    for name, t in named_tensors(params):
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + t.size
    return {
        "config": cfg.to_dict(),
        "total_parameters": parameter_count(params),
        "group_parameters": groups,
        "parameters": shapes,
    }
