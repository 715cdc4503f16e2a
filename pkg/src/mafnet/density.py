"""Ground-truth density maps and counting metrics (MAE, RMSE, GAME).

Count arithmetic is exact: float maps are decomposed into integers on a
common binary scale, region sums and differences are taken in integers, and
only the final value is rounded. This makes GAME(0) identical to the absolute
count error and GAME monotone in the grid level without any tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor


class AnnotationError(ValueError):
    pass


@dataclass
class DensityConfig:
    kernel_size: int = 7
    sigma: float = 2.0
    renormalize_at_border: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.renormalize_at_border:
            raise ValueError("border renormalisation is always on")


@dataclass
class CountMetrics:
    mae: float
    rmse: float
    game: dict[int, float] = field(default_factory=dict)


def round_half_up(v: float) -> int:
    """Nearest integer, ties toward +inf."""
    return math.floor(v + 0.5)


def gaussian_kernel(cfg: DensityConfig) -> np.ndarray:
    r = cfg.kernel_size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    return np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * cfg.sigma ** 2))


def generate_density(points: Sequence[Sequence[float]], height: int, width: int,
                     cfg: DensityConfig | None = None) -> np.ndarray:
    """Full-resolution float64 density map; each point contributes mass 1.

    Points are (x, y) = (column, row). The kernel is centred on the nearest
    pixel, clipped at the borders and renormalised over the surviving taps.
    """
    cfg = cfg or DensityConfig()
    kern = gaussian_kernel(cfg)
    r = cfg.kernel_size // 2
    out = np.zeros((height, width), dtype=np.float64)
    for i, (x, y) in enumerate(points):
        if not (0 <= x < width and 0 <= y < height):
            raise AnnotationError(f"point {i} at ({x}, {y}) outside {width}x{height} image")
        cx = min(round_half_up(x), width - 1)
        cy = min(round_half_up(y), height - 1)
        r0, r1 = max(cy - r, 0), min(cy + r + 1, height)
        c0, c1 = max(cx - r, 0), min(cx + r + 1, width)
        patch = kern[r0 - (cy - r):r1 - (cy - r), c0 - (cx - r):c1 - (cx - r)]
        out[r0:r1, c0:c1] += patch / patch.sum()
    return out


def downsample_density(d: np.ndarray, factor: int = 8) -> np.ndarray:
    """Non-overlapping factor×factor block sums.

    Block offsets are accumulated in a fixed row-major order, so the result
    only depends on the input values.
    """
    h, w = d.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"density map {h}x{w} not divisible by {factor}")
    out = np.zeros(d.shape[:-2] + (h // factor, w // factor), dtype=d.dtype)
    for i in range(factor):
        for j in range(factor):
            out += d[..., i::factor, j::factor]
    return out


def blockwise_total(d: np.ndarray, factor: int) -> float:
    """Total of ``d`` accumulated block by block in the order used by :func:`downsample_density`,
    then over blocks row-major. Equals ``sequential_total(downsample_density(d, factor))`` bitwise."""
    return sequential_total(downsample_density(d, factor))


def sequential_total(d: np.ndarray) -> float:
    acc = 0.0
    for v in np.asarray(d, dtype=np.float64).reshape(-1):
        acc += float(v)
    return acc


# ---------------------------------------------------------------- exact sums


def _as_scaled_ints(*maps: np.ndarray) -> tuple[list[np.ndarray], int]:
    """Represent float maps as integer arrays times 2**exp (exactly)."""
    arrs = [np.asarray(m, dtype=np.float64) for m in maps]
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise ValueError("density maps must be finite")
    mant, ex = [], []
    for a in arrs:
        m, e = np.frexp(a)
        mant.append((m * 2.0 ** 53).astype(np.int64))
        ex.append(e.astype(np.int64) - 53)
    nz = [e[m != 0] for m, e in zip(mant, ex)]
    emin = int(min((x.min() for x in nz if x.size), default=0))
    out = []
    for m, e in zip(mant, ex):
        ints = np.empty(m.shape, dtype=object)
        flat_m, flat_e, flat_o = m.reshape(-1), e.reshape(-1), ints.reshape(-1)
        for k in range(flat_m.size):
            mk = int(flat_m[k])
            flat_o[k] = mk << int(flat_e[k] - emin) if mk else 0
        out.append(ints)
    return out, emin


def exact_count(d: np.ndarray) -> Fraction:
    (ints,), emin = _as_scaled_ints(d)
    return Fraction(int(ints.sum())) * Fraction(2) ** emin


def integral(d) -> float:
    """Correctly rounded sum of a density map."""
    arr = d.data if isinstance(d, Tensor) else d
    return math.fsum(np.asarray(arr, dtype=np.float64).reshape(-1))


def _grid_edges(extent: int, level: int) -> list[int]:
    n = 2 ** level
    return [(j * extent) // n for j in range(n + 1)]


def game_exact(pred: np.ndarray, gt: np.ndarray, level: int) -> Fraction:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"game: prediction {pred.shape} vs ground truth {gt.shape}")
    pred2 = pred.reshape(pred.shape[-2:]) if pred.ndim > 2 else pred
    gt2 = gt.reshape(gt.shape[-2:]) if gt.ndim > 2 else gt
    h, w = pred2.shape
    if not 0 <= level or 2 ** level > min(h, w):
        raise ContractError(f"GAME level {level} too fine for a {h}x{w} map")
    (pi, gi), emin = _as_scaled_ints(pred2, gt2)
    rows, cols = _grid_edges(h, level), _grid_edges(w, level)
    total = 0
    for a in range(len(rows) - 1):
        for b in range(len(cols) - 1):
            region = (slice(rows[a], rows[a + 1]), slice(cols[b], cols[b + 1]))
            total += abs(int(pi[region].sum()) - int(gi[region].sum()))
    return Fraction(total) * Fraction(2) ** emin


def game(pred, gt, level: int) -> float:
    """Grid absolute count error of one image at ``level`` (4**level regions)."""
    p = pred.data if isinstance(pred, Tensor) else pred
    g = gt.data if isinstance(gt, Tensor) else gt
    return float(game_exact(p, g, level))


def mae_rmse(pred_counts: Sequence, gt_counts: Sequence) -> tuple[float, float]:
    """Mean absolute and root-mean-square count errors.

    Counts may be floats or exact ``Fraction`` values; the sums are exact.
    """
    if len(pred_counts) != len(gt_counts):
        raise ContractError(f"{len(pred_counts)} predictions vs {len(gt_counts)} ground truths")
    if not pred_counts:
        raise ContractError("mae_rmse needs at least one image")
    n = len(pred_counts)
    diffs = [Fraction(p) - Fraction(g) for p, g in zip(pred_counts, gt_counts)]
    mae = sum((abs(d) for d in diffs), Fraction(0)) / n
    mse = sum((d * d for d in diffs), Fraction(0)) / n
    return float(mae), math.sqrt(mse)


def evaluate_maps(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                  levels: Sequence[int] = (0, 1, 2, 3)) -> tuple[CountMetrics, list[tuple[float, float]]]:
    """Dataset metrics over paired maps; also returns per-image (pred, gt) counts."""
    if len(preds) != len(gts) or not preds:
        raise ContractError("need equally many (>= 1) predicted and ground-truth maps")
    pc = [exact_count(p) for p in preds]
    gc = [exact_count(g) for g in gts]
    mae, rmse = mae_rmse(pc, gc)
    n = len(preds)
    games = {}
    smallest = min(min(np.shape(p)[-2:]) for p in preds)
    for lv in levels:
        if 2 ** lv > smallest:
            continue
        games[lv] = float(sum((game_exact(p, g, lv) for p, g in zip(preds, gts)), Fraction(0)) / n)
    return CountMetrics(mae, rmse, games), [(float(p), float(g)) for p, g in zip(pc, gc)]


def mse_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Sum of squared per-cell errors, averaged over the batch (first) axis."""
    if pred.shape != gt.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {gt.shape}")
    diff = pred - gt
    return T.sum(diff * diff) * (1.0 / pred.shape[0])
