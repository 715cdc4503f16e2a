"""Patch embedding, multi-head attention and the multi-attention fusion (MAF) module.

Embeddings are ``[N, D]`` token matrices, or ``[B, N, D]`` for a batch. Feature
maps are ``[C, H, W]`` or ``[B, C, H, W]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


def _normal(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype, name: str) -> Tensor:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(np.asarray(rng.normal(0.0, std, size=shape), dtype=dtype), requires_grad=True, name=name)


def _scaled(t: Tensor, gain: float) -> Tensor:
    if gain != 1.0:
        t.data = (t.data * t.data.dtype.type(gain)).astype(t.dtype)
    return t


@dataclass
class PatchEmbedConfig:
    patch_size: int
    channels: int
    dim: int
    E: Tensor
    E_back: Tensor
    use_positional_embedding: bool = False
    pos: Tensor | None = None

    def __post_init__(self):
        flat = self.patch_size ** 2 * self.channels
        if self.E.shape != (flat, self.dim) or self.E_back.shape != (self.dim, flat):
            raise DimensionError(
                f"patch embedding expects E[{flat},{self.dim}] and E_back[{self.dim},{flat}], "
                f"got {self.E.shape} and {self.E_back.shape}")
        if self.use_positional_embedding and (self.pos is None or self.pos.shape[1] != self.dim):
            raise DimensionError("positional embedding enabled but no [N_max, D] table given")


@dataclass
class AttentionHeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @property
    def d(self) -> int:
        return self.wq.shape[1]


@dataclass
class MultiHeadParams:
    heads: list[AttentionHeadParams]
    wo: Tensor

    def __post_init__(self):
        d = self.heads[0].d
        dim = self.heads[0].wq.shape[0]
        for h in self.heads:
            for w in (h.wq, h.wk, h.wv):
                if w.shape != (dim, d):
                    raise DimensionError(f"all heads must have [D={dim}, d={d}] projections, got {w.shape}")
        if self.wo.shape != (len(self.heads) * d, dim):
            raise DimensionError(f"W_O must be [{len(self.heads) * d}, {dim}], got {self.wo.shape}")

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def dim(self) -> int:
        return self.wo.shape[1]


@dataclass
class MafBlockParams:
    ima_r: MultiHeadParams
    ima_t: MultiHeadParams
    cma_r: MultiHeadParams
    cma_t: MultiHeadParams


@dataclass
class MafModuleParams:
    embed: PatchEmbedConfig
    blocks: list[MafBlockParams] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.blocks)


def init_multi_head(rng, dim: int, num_heads: int, dtype=np.float32, prefix: str = "mha") -> MultiHeadParams:
    if dim % num_heads:
        raise DimensionError(f"embedding dim {dim} not divisible by {num_heads} heads")
    d = dim // num_heads
    heads = [
        AttentionHeadParams(
            wq=_normal(rng, (dim, d), dim, d, dtype, f"{prefix}.head{h}.wq"),
            wk=_normal(rng, (dim, d), dim, d, dtype, f"{prefix}.head{h}.wk"),
            wv=_normal(rng, (dim, d), dim, d, dtype, f"{prefix}.head{h}.wv"),
        )
        for h in range(num_heads)
    ]
    wo = _normal(rng, (num_heads * d, dim), num_heads * d, dim, dtype, f"{prefix}.wo")
    return MultiHeadParams(heads, wo)


def init_maf_module(rng, channels: int, patch_size: int, dim: int, num_heads: int, depth: int = 2,
                    use_positional_embedding: bool = False, max_tokens: int = 0,
                    embed_gain: float = 1.0, dtype=np.float32, prefix: str = "maf") -> MafModuleParams:
    """Random MAF module parameters.

    ``embed_gain`` scales the initial patch projection. Each block multiplies
    two residual branches, so token magnitudes are raised to the power 2**depth
    per module; starting below 1 keeps that map contracting.
    """
    if depth < 1:
        raise ValueError("a MAF module needs at least one block")
    flat = patch_size ** 2 * channels
    pos = None
    if use_positional_embedding:
        if max_tokens < 1:
            raise ValueError("max_tokens must be given when positional embedding is on")
        pos = _normal(rng, (max_tokens, dim), max_tokens, dim, dtype, f"{prefix}.embed.pos")
    embed = PatchEmbedConfig(
        patch_size=patch_size, channels=channels, dim=dim,
        E=_scaled(_normal(rng, (flat, dim), flat, dim, dtype, f"{prefix}.embed.E"), embed_gain),
        E_back=_normal(rng, (dim, flat), dim, flat, dtype, f"{prefix}.embed.E_back"),
        use_positional_embedding=use_positional_embedding, pos=pos,
    )
    blocks = []
    for b in range(depth):
        p = f"{prefix}.block{b}"
        blocks.append(MafBlockParams(
            ima_r=init_multi_head(rng, dim, num_heads, dtype, f"{p}.ima_r"),
            ima_t=init_multi_head(rng, dim, num_heads, dtype, f"{p}.ima_t"),
            cma_r=init_multi_head(rng, dim, num_heads, dtype, f"{p}.cma_r"),
            cma_t=init_multi_head(rng, dim, num_heads, dtype, f"{p}.cma_t"),
        ))
    return MafModuleParams(embed, blocks)


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def patch_embed(f: Tensor, cfg: PatchEmbedConfig) -> Tensor:
    """Split a feature map into P×P patches and project each to D dims.

    Patches are enumerated row-major over the patch grid; inside a patch the
    channel index varies fastest, then the column, then the row.
    """
    x, single = _batched(f, 3)
    b, c, h, w = x.shape
    p = cfg.patch_size
    if c != cfg.channels:
        raise DimensionError(f"patch_embed: feature map has {c} channels, config expects {cfg.channels}")
    if h % p or w % p:
        raise DimensionError(f"patch_embed: H={h}, W={w} not divisible by P={p}")
    gh, gw = h // p, w // p
    n = gh * gw
    x = T.reshape(x, (b, c, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))
    x = T.reshape(x, (b * n, p * p * c))
    z = T.reshape(T.matmul(x, cfg.E), (b, n, cfg.dim))
    if cfg.use_positional_embedding:
        if n > cfg.pos.shape[0]:
            raise DimensionError(f"positional table has {cfg.pos.shape[0]} rows, need {n}")
        pos = T.slice(cfg.pos, (slice(0, n),))
        z = z + T.reshape(T.concat([pos] * b, axis=0), (b, n, cfg.dim))
    return T.reshape(z, (n, cfg.dim)) if single else z


def patch_unembed(z: Tensor, cfg: PatchEmbedConfig, height: int, width: int) -> Tensor:
    """Project tokens back through E_back and reassemble the [C, H, W] map.

    Exact inverse of the patch partition used by :func:`patch_embed`.
    """
    z, single = _batched(z, 2)
    b, n, dim = z.shape
    p, c = cfg.patch_size, cfg.channels
    gh, gw = height // p, width // p
    if gh * gw != n:
        raise DimensionError(f"{n} tokens cannot tile a {height}x{width} map with P={p}")
    x = T.matmul(T.reshape(z, (b * n, dim)), cfg.E_back)
    x = T.reshape(x, (b, gh, gw, p, p, c))
    x = T.transpose(x, (0, 5, 1, 3, 2, 4))
    x = T.reshape(x, (b, c, height, width))
    return T.reshape(x, (c, height, width)) if single else x


def _project(z: Tensor, w: Tensor) -> Tensor:
    lead = z.shape[:-1]
    out = T.matmul(T.reshape(z, (-1, z.shape[-1])), w)
    return T.reshape(out, lead + (w.shape[1],))


def multi_head_attention(zq: Tensor, zkv: Tensor, p: MultiHeadParams,
                         record: list | None = None) -> Tensor:
    """Scaled dot-product attention over ``p.num_heads`` heads, no residual.

    Queries come from ``zq``; keys and values from ``zkv``. When ``record`` is
    a list, the post-softmax weight arrays of each head are appended to it.
    """
    if zq.shape[-1] != p.dim or zkv.shape[-1] != p.dim:
        raise DimensionError(f"attention dim {p.dim} does not match inputs {zq.shape}, {zkv.shape}")
    if zq.ndim != zkv.ndim or zq.shape[:-2] != zkv.shape[:-2]:
        raise DimensionError(f"query/key batch extents differ: {zq.shape} vs {zkv.shape}")
    outs = []
    for head in p.heads:
        q = _project(zq, head.wq)
        k = _project(zkv, head.wk)
        v = _project(zkv, head.wv)
        kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        scores = T.matmul(q, kt) * (1.0 / math.sqrt(head.d))
        attn = T.softmax(scores, axis=-1)
        if record is not None:
            record.append(attn.data)
        outs.append(T.matmul(attn, v))
    y = T.concat(outs, axis=-1) if len(outs) > 1 else outs[0]
    return _project(y, p.wo)


def ima(z: Tensor, p: MultiHeadParams, record: list | None = None) -> Tensor:
    return multi_head_attention(z, z, p, record) + z


def cma(z_self: Tensor, z_other: Tensor, p: MultiHeadParams, record: list | None = None) -> Tensor:
    """Cross-modality attention: query from the other stream, key/value and residual from this one."""
    if z_self.shape != z_other.shape:
        raise DimensionError(f"cma: token shapes differ across modalities {z_self.shape} vs {z_other.shape}")
    return multi_head_attention(z_other, z_self, p, record) + z_self


def maf_block(z_r: Tensor, z_t: Tensor, p: MafBlockParams,
              record: dict | None = None) -> tuple[Tensor, Tensor]:
    if z_r.shape != z_t.shape:
        raise DimensionError(f"maf_block: modality shapes differ {z_r.shape} vs {z_t.shape}")
    rec = {k: None for k in ("ima_r", "ima_t", "cma_r", "cma_t")}
    if record is not None:
        for k in rec:
            rec[k] = record.setdefault(k, [])
    zi_r = ima(z_r, p.ima_r, rec["ima_r"])
    zi_t = ima(z_t, p.ima_t, rec["ima_t"])
    zc_r = cma(z_r, z_t, p.cma_r, rec["cma_r"])
    zc_t = cma(z_t, z_r, p.cma_t, rec["cma_t"])
    return zi_r * zc_r, zi_t * zc_t


def maf_module(f_r: Tensor, f_t: Tensor, p: MafModuleParams,
               record: list | None = None) -> tuple[Tensor, Tensor]:
    """Fuse a pair of feature maps; outputs keep the input shapes.

    ``record``, when given, receives one dict per block mapping branch name
    (ima_r, ima_t, cma_r, cma_t) to the list of per-head attention arrays.
    """
    if f_r.shape != f_t.shape:
        raise DimensionError(f"maf_module: paired maps differ {f_r.shape} vs {f_t.shape}")
    h, w = f_r.shape[-2:]
    z_r = patch_embed(f_r, p.embed)
    z_t = patch_embed(f_t, p.embed)
    for block in p.blocks:
        block_rec = None
        if record is not None:
            block_rec = {}
            record.append(block_rec)
        z_r, z_t = maf_block(z_r, z_t, block, block_rec)
    out_r = patch_unembed(z_r, p.embed, h, w) + f_r
    out_t = patch_unembed(z_t, p.embed, h, w) + f_t
    return out_r, out_t
