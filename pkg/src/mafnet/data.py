"""Paired RGB-T datasets: loading, augmentation and a synthetic scene generator.

Dataset layout::

    root/rgb/<id>.ppm       8-bit P6
    root/thermal/<id>.pgm   8-bit P5 (a P6 file is accepted and channel-averaged)
    root/ann/<id>.json      {"points": [[x, y], ...], "illumination": "bright" | "dark"}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fileio import FormatError, read_netpbm, write_pgm, write_ppm
from .tensor import interp_matrix

log = logging.getLogger(__name__)

ILLUMINATIONS = ("bright", "dark", "unknown")


class DataError(Exception):
    """Problem with a dataset file; message names the sample id and cause."""


@dataclass
class AnnotatedPair:
    id: str
    rgb: np.ndarray  # float32 [3, H, W] in [-1, 1]
    thermal: np.ndarray  # float32 [1, H, W] in [-1, 1]
    points: np.ndarray  # float64 [K, 2] of (x, y)
    illumination: str = "unknown"

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class AugmentConfig:
    crop_size: int = 256
    hflip_prob: float = 0.5
    rescale_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        self.rescale_range = tuple(self.rescale_range)
        if self.crop_size < 64 or self.crop_size % 64:
            raise ValueError(f"crop_size must be a positive multiple of 64, got {self.crop_size}")
        lo, hi = self.rescale_range
        if not 0 < lo <= hi:
            raise ValueError(f"rescale_range must satisfy 0 < min <= max, got {self.rescale_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")


@dataclass
class SynthConfig:
    pairs: int = 8
    size: int = 64
    count_range: tuple[int, int] = (3, 12)
    darkness_prob: float = 0.5
    crossover_prob: float = 0.2
    seed: int = 0
    head_radius: float = 2.0

    def __post_init__(self):
        self.count_range = tuple(self.count_range)
        if self.pairs < 0:
            raise ValueError("pairs must be >= 0")
        if self.size < 64 or self.size % 64:
            raise ValueError(f"size must be a positive multiple of 64, got {self.size}")
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad count_range {self.count_range}")
        for name in ("darkness_prob", "crossover_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def normalize(img_u8: np.ndarray) -> np.ndarray:
    return ((img_u8.astype(np.float32) / 255.0 - 0.5) / 0.5).astype(np.float32)


# ---------------------------------------------------------------- loading


def _load_points(path: Path, sample_id: str) -> tuple[np.ndarray, str]:
    try:
        ann = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{sample_id}: unreadable annotation ({e})") from e
    if not isinstance(ann, dict) or "points" not in ann:
        raise DataError(f"{sample_id}: annotation lacks a 'points' list")
    pts = ann["points"]
    try:
        arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2) if pts else np.zeros((0, 2))
    except (TypeError, ValueError) as e:
        raise DataError(f"{sample_id}: points must be [x, y] pairs") from e
    illum = ann.get("illumination", "unknown")
    if illum not in ILLUMINATIONS:
        raise DataError(f"{sample_id}: illumination {illum!r} not one of {ILLUMINATIONS}")
    return arr, illum


def load_images(rgb_path, thermal_path, label: str = "") -> tuple[np.ndarray, np.ndarray]:
    """Read a PPM/PGM pair as normalised ``[3, H, W]`` and ``[1, H, W]`` float32 arrays.

    A 3-channel thermal image is reduced to one channel by averaging.
    """
    label = label or str(rgb_path)
    try:
        rgb = read_netpbm(rgb_path)
        th = read_netpbm(thermal_path)
    except FormatError as e:
        raise DataError(f"{label}: malformed image ({e})") from e
    except OSError as e:
        raise DataError(f"{label}: cannot read image ({e})") from e
    if rgb.ndim != 3:
        raise DataError(f"{label}: rgb image is not a 3-channel PPM")
    if th.ndim == 3:
        th = np.round(th.astype(np.float64).mean(axis=2)).astype(np.uint8)
    if rgb.shape[:2] != th.shape:
        raise DataError(f"{label}: rgb {rgb.shape[:2]} and thermal {th.shape} sizes differ")
    return normalize(rgb.transpose(2, 0, 1)), normalize(th[None])


def load_pair(root, sample_id: str) -> AnnotatedPair:
    root = Path(root)
    rgb_path = root / "rgb" / f"{sample_id}.ppm"
    th_path = root / "thermal" / f"{sample_id}.pgm"
    ann_path = root / "ann" / f"{sample_id}.json"
    for p in (rgb_path, th_path, ann_path):
        if not p.is_file():
            raise DataError(f"{sample_id}: missing {p.parent.name}/{p.name}")
    rgb, th = load_images(rgb_path, th_path, sample_id)
    points, illum = _load_points(ann_path, sample_id)
    h, w = th.shape[1:]
    for i, (x, y) in enumerate(points):
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"{sample_id}: point {i} ({x}, {y}) outside {w}x{h}")
    return AnnotatedPair(
        id=sample_id,
        rgb=rgb,
        thermal=th,
        points=points,
        illumination=illum,
    )


def load_dataset(root) -> list[AnnotatedPair]:
    """Load every sample under ``root``, ordered by id."""
    root = Path(root)
    ids: set[str] = set()
    for sub, ext in (("rgb", ".ppm"), ("thermal", ".pgm"), ("ann", ".json")):
        d = root / sub
        if d.is_dir():
            ids.update(p.stem for p in d.iterdir() if p.suffix == ext)
    return [load_pair(root, i) for i in sorted(ids)]


def filter_split(pairs: list[AnnotatedPair], split: str) -> list[AnnotatedPair]:
    if split == "all":
        return list(pairs)
    if split not in ("bright", "dark"):
        raise ValueError(f"unknown split {split!r}")
    return [p for p in pairs if p.illumination == split]


# ---------------------------------------------------------------- augmentation


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator keyed by (seed, epoch, sample index), independent of processing order."""
    return np.random.default_rng([seed, epoch, index])


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample ``[C, h, w]`` with the half-pixel-centre convention."""
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    ah = interp_matrix(h, height, np.float64)
    aw = interp_matrix(w, width, np.float64)
    out = (ah @ img.astype(np.float64)) @ aw.T
    return out.astype(img.dtype)


def crop_pair(pair: AnnotatedPair, top: int, left: int, size: int) -> AnnotatedPair:
    pts = pair.points - np.array([left, top], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < size) & (pts[:, 1] >= 0) & (pts[:, 1] < size)
    return replace(
        pair,
        rgb=pair.rgb[:, top:top + size, left:left + size].copy(),
        thermal=pair.thermal[:, top:top + size, left:left + size].copy(),
        points=pts[keep].reshape(-1, 2),
    )


def hflip_pair(pair: AnnotatedPair) -> AnnotatedPair:
    pts = pair.points.copy()
    # x in (W-1, W) belongs to the last column, which lands on column 0
    pts[:, 0] = np.maximum(pair.width - 1 - pts[:, 0], 0.0)
    return replace(pair, rgb=pair.rgb[:, :, ::-1].copy(), thermal=pair.thermal[:, :, ::-1].copy(),
                   points=pts)


def augment(pair: AnnotatedPair, cfg: AugmentConfig, rng: np.random.Generator,
            max_attempts: int = 10) -> AnnotatedPair:
    """Rescale, random crop and horizontal flip applied identically to both images and the points."""
    lo, hi = cfg.rescale_range
    for attempt in range(max_attempts):
        u = float(rng.uniform(lo, hi)) if hi > lo else lo
        nh, nw = int(round(pair.height * u)), int(round(pair.width * u))
        if nh >= cfg.crop_size and nw >= cfg.crop_size:
            break
        log.warning("sample %s: rescale %.3f gives %dx%d < crop %d, resampling",
                    pair.id, u, nh, nw, cfg.crop_size)
    else:
        raise DataError(f"{pair.id}: image {pair.height}x{pair.width} too small for crop {cfg.crop_size}")
    if u != 1.0:
        pts = pair.points * u
        keep = (pts[:, 0] < nw) & (pts[:, 1] < nh)
        pair = replace(pair, rgb=resize_bilinear(pair.rgb, nh, nw),
                       thermal=resize_bilinear(pair.thermal, nh, nw), points=pts[keep].reshape(-1, 2))
    top = int(rng.integers(0, nh - cfg.crop_size + 1))
    left = int(rng.integers(0, nw - cfg.crop_size + 1))
    pair = crop_pair(pair, top, left, cfg.crop_size)
    if rng.uniform() < cfg.hflip_prob:
        pair = hflip_pair(pair)
    return pair


def pad_to_multiple(pair: AnnotatedPair, multiple: int = 64) -> tuple[AnnotatedPair, tuple[int, int]]:
    """Reflect-pad bottom/right so both sides divide ``multiple``; points are unchanged."""
    ph = (-pair.height) % multiple
    pw = (-pair.width) % multiple
    if not ph and not pw:
        return pair, (0, 0)
    mode = "reflect" if ph < pair.height and pw < pair.width else "symmetric"
    pad = ((0, 0), (0, ph), (0, pw))
    return replace(pair, rgb=np.pad(pair.rgb, pad, mode=mode),
                   thermal=np.pad(pair.thermal, pad, mode=mode)), (ph, pw)


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthScene:
    rgb: np.ndarray  # uint8 [H, W, 3]
    thermal: np.ndarray  # uint8 [H, W]
    points: np.ndarray
    dark: bool
    crossover: bool
    extras: dict = field(default_factory=dict)


def _smooth_noise(rng, size: int, cells: int, channels: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(channels, cells, cells))
    return resize_bilinear(coarse, size, size)


def render_scene(rng: np.random.Generator, cfg: SynthConfig, points: np.ndarray,
                 dark: bool, crossover: bool) -> SynthScene:
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    # textured background
    base = rng.uniform(60, 140, size=3)
    texture = _smooth_noise(rng, s, 8, 3) * 60.0 - 30.0
    rgb = base[:, None, None] + texture
    for x, y in points:
        color = rng.uniform(180, 255, size=3)
        disc = ((xx - x) ** 2 + (yy - y) ** 2) <= cfg.head_radius ** 2
        rgb[:, disc] = color[:, None]
    rgb += rng.normal(0.0, 6.0, size=rgb.shape)
    if dark:
        rgb *= 0.1
    # thermal: warm blobs over a cool background
    amp = 150.0 * (0.08 if crossover else 1.0)
    th = 40.0 + _smooth_noise(rng, s, 4, 1)[0] * 20.0
    for x, y in points:
        th += amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * 1.5 ** 2))
    th += rng.normal(0.0, 3.0, size=th.shape)
    rgb8 = np.clip(np.round(rgb), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    th8 = np.clip(np.round(th), 0, 255).astype(np.uint8)
    return SynthScene(rgb8, th8, points, dark, crossover)


def synth_scene(cfg: SynthConfig, index: int) -> SynthScene:
    rng = np.random.default_rng([cfg.seed, index])
    lo, hi = cfg.count_range
    k = int(rng.integers(lo, hi + 1))
    points = rng.uniform(0.0, cfg.size, size=(k, 2))
    # keep drawn coordinates strictly inside the image
    points = np.minimum(points, np.nextafter(cfg.size, 0))
    dark = bool(rng.uniform() < cfg.darkness_prob)
    crossover = bool(rng.uniform() < cfg.crossover_prob)
    return render_scene(rng, cfg, points, dark, crossover)


def synthesize(cfg: SynthConfig, out) -> list[str]:
    """Write ``cfg.pairs`` synthetic RGB-T samples under ``out``; returns the ids."""
    out = Path(out)
    try:
        for sub in ("rgb", "thermal", "ann"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    ids = []
    width = max(5, len(str(max(cfg.pairs - 1, 0))))
    for i in range(cfg.pairs):
        sid = f"{i:0{width}d}"
        scene = synth_scene(cfg, i)
        write_ppm(out / "rgb" / f"{sid}.ppm", scene.rgb)
        write_pgm(out / "thermal" / f"{sid}.pgm", scene.thermal)
        ann = {
            "points": [[float(x), float(y)] for x, y in scene.points],
            "illumination": "dark" if scene.dark else "bright",
        }
        (out / "ann" / f"{sid}.json").write_text(json.dumps(ann))
        ids.append(sid)
    return ids
