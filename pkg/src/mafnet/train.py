"""AdamW with linear warmup, the training loop, checkpoints and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (AnnotatedPair, AugmentConfig, DataError, augment, augment_rng, filter_split, load_dataset,
                   pad_to_multiple)
from .density import DensityConfig, downsample_density, evaluate_maps, generate_density, mse_loss
from .fileio import load_tensor, save_tensor
from .model import ModelConfig, ModelParams, init_params, map_tensors, model_forward, named_tensors
from .tensor import Tensor

log = logging.getLogger(__name__)

OUTPUT_STRIDE = 8


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class NumericAbort(ArithmeticError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_max: float = 5e-5


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], s: OptimizerState, lr: float):
    """One decoupled-weight-decay Adam update, in place on ``params[name].data``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient for parameter {name}")
    s.t += 1
    b1, b2 = s.beta1, s.beta2
    c1 = 1.0 - b1 ** s.t
    c2 = 1.0 - b2 ** s.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = s.m.get(name)
        v = s.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        s.m[name], s.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        m_hat = m / c1
        v_hat = v / c2
        step = m_hat / (np.sqrt(v_hat) + s.eps) + s.weight_decay * p.data
        p.data = (p.data - lr * step).astype(p.dtype)


@dataclass
class Schedule:
    max_iters: int = 300
    warmup_iters: int | None = None
    lr_max: float = 5e-5

    def __post_init__(self):
        if self.warmup_iters is None:
            self.warmup_iters = int(round(0.1 * self.max_iters))
        if not 0 <= self.warmup_iters <= self.max_iters:
            raise ValueError(f"warmup {self.warmup_iters} outside [0, {self.max_iters}]")


def lr_at(t: int, sched: Schedule) -> float:
    if sched.warmup_iters == 0:
        return sched.lr_max
    return sched.lr_max * min(1.0, t / sched.warmup_iters)


# ---------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    preset: str = "toy"
    batch_size: int = 4
    seed: int = 0
    max_iters: int = 300
    warmup_iters: int | None = None
    lr_max: float = 5e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    checkpoint_every: int = 0
    split: str = "all"
    data_root: str | None = None
    checkpoint_dir: str | None = None
    # modality ablation: feed zeros instead of the image
    zero_rgb: bool = False
    zero_thermal: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.split not in ("all", "bright", "dark"):
            raise ConfigError(f"split must be all, bright or dark, got {self.split!r}")

    def schedule(self) -> Schedule:
        return Schedule(self.max_iters, self.warmup_iters, self.lr_max)


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(crop_size=64))

    def to_dict(self) -> dict:
        d = {"run": dataclasses.asdict(self.run), "augment": dataclasses.asdict(self.augment)}
        d.update(self.model.to_dict())
        return d


_SECTIONS = ("run", "backbone", "encoder", "mma", "augment")


def _build(cls, base, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return dataclasses.replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from e


def config_from_dict(d: dict) -> ExperimentConfig:
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    run = _build(RunConfig, None, d.get("run", {}), "run")
    try:
        model = ModelConfig.preset(run.preset)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    model = ModelConfig(
        backbone=_build(type(model.backbone), model.backbone, d.get("backbone", {}), "backbone"),
        encoder=_build(type(model.encoder), model.encoder, d.get("encoder", {}), "encoder"),
        mma=_build(type(model.mma), model.mma, d.get("mma", {}), "mma"),
    )
    default_crop = 64 if run.preset == "toy" else 256
    aug = _build(AugmentConfig, AugmentConfig(crop_size=default_crop, seed=run.seed),
                 d.get("augment", {}), "augment")
    return ExperimentConfig(run, model, aug)


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(d)


# ---------------------------------------------------------------- checkpoints


def named_parameters(params: ModelParams) -> dict[str, Tensor]:
    return dict(named_tensors(params))


def save_checkpoint(directory, params: ModelParams, cfg: ExperimentConfig, iteration: int):
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in named_tensors(params):
        fname = f"tensors/{name}.maft"
        save_tensor(directory / fname, np.asarray(t.data, dtype=np.float32))
        entries.append({"name": name, "shape": list(t.shape), "file": fname})
    manifest = {
        "format": "mafnet-checkpoint",
        "version": 1,
        "config": cfg.to_dict(),
        "seed": cfg.run.seed,
        "iteration": iteration,
        "parameters": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[ModelParams, ExperimentConfig, dict]:
    """Load and validate a checkpoint; every tensor shape must match the manifest and config."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{directory}: unreadable manifest ({e})") from e
    cfg_dict = manifest.get("config", {})
    try:
        cfg = config_from_dict(cfg_dict)
    except ConfigError as e:
        raise CheckpointError(f"{directory}: manifest config rejected: {e}") from e
    params = init_params(cfg.model, shapes_only=True)
    expected = {name: t.shape for name, t in named_tensors(params)}
    listed = {e["name"]: e for e in manifest.get("parameters", [])}
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise CheckpointError(f"{directory}: parameter set differs from config (missing {missing[:3]}, "
                              f"unexpected {extra[:3]})")
    arrays = {}
    for name, shape in expected.items():
        entry = listed[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"{directory}: {name} manifest shape {entry['shape']} != config {list(shape)}")
        arr = load_tensor(directory / entry["file"])
        if arr.shape != shape:
            raise CheckpointError(f"{directory}: {name} file shape {list(arr.shape)} != manifest {list(shape)}")
        arrays[name] = arr

    lookup = {id(t): name for name, t in named_tensors(params)}
    loaded = map_tensors(params, lambda t: Tensor(arrays[lookup[id(t)]].copy(), requires_grad=True,
                                                   name=t.name))
    return loaded, cfg, manifest


# ---------------------------------------------------------------- training


def density_target(pair: AnnotatedPair, dcfg: DensityConfig | None = None) -> np.ndarray:
    full = generate_density(pair.points, pair.height, pair.width, dcfg)
    return downsample_density(full, OUTPUT_STRIDE)


def make_batch(pairs: list[AnnotatedPair], run: RunConfig) -> tuple[Tensor, Tensor, Tensor]:
    rgb = np.stack([p.rgb for p in pairs]).astype(np.float32)
    th = np.stack([p.thermal for p in pairs]).astype(np.float32)
    if run.zero_rgb:
        rgb = np.zeros_like(rgb)
    if run.zero_thermal:
        th = np.zeros_like(th)
    gt = np.stack([density_target(p)[None] for p in pairs]).astype(np.float32)
    return Tensor(rgb), Tensor(th), Tensor(gt)


def _sample_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _write_loss_log(path: Path, rows: list[tuple[int, float, float]]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "lr", "loss"])
    for it, lr, loss in rows:
        w.writerow([it, repr(lr), repr(loss)])
    path.write_text(buf.getvalue())


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[tuple[int, float, float]]
    iterations: int


def train(cfg: ExperimentConfig, data: list[AnnotatedPair] | None = None, out=None,
          progress=None) -> TrainResult:
    """Seeded training over the mean-squared density error.

    ``data`` defaults to ``load_dataset(cfg.run.data_root)``; ``out`` (or
    ``cfg.run.checkpoint_dir``) receives the checkpoint and ``loss_log.csv``.
    """
    run = cfg.run
    if data is None:
        if run.data_root is None:
            raise ConfigError("no dataset given")
        data = load_dataset(run.data_root)
    data = filter_split(data, run.split)
    if not data:
        raise DataError(f"empty split {run.split!r}")
    out = Path(out) if out is not None else (Path(run.checkpoint_dir) if run.checkpoint_dir else None)
    params = init_params(cfg.model, run.seed)
    named = named_parameters(params)
    state = OptimizerState(beta1=run.beta1, beta2=run.beta2, eps=run.eps,
                           weight_decay=run.weight_decay, lr_max=run.lr_max)
    sched = run.schedule()
    n = len(data)
    bs = min(run.batch_size, n)
    losses: list[tuple[int, float, float]] = []
    for it in range(run.max_iters):
        batch = []
        for j in range(bs):
            k = it * bs + j
            epoch, pos = divmod(k, n)
            idx = int(_sample_order(n, run.seed, epoch)[pos])
            pair = data[idx]
            if run.augment:
                pair = augment(pair, cfg.augment, augment_rng(cfg.augment.seed, epoch, idx))
            batch.append(pair)
        rgb, th, gt = make_batch(batch, run)
        pred = model_forward(rgb, th, params, cfg.model)
        loss = mse_loss(pred, gt)
        lval = loss.item()
        lr = lr_at(it + 1, sched)
        if not math.isfinite(lval):
            if out is not None:
                save_checkpoint(out, params, cfg, it)
                _write_loss_log(out / "loss_log.csv", losses)
            raise NumericAbort(f"non-finite loss at iteration {it}", it)
        grads = T.backward(loss, list(named.values()))
        try:
            adamw_step(named, {k: grads[p] for k, p in named.items()}, state, lr)
        except NumericAbort as e:
            if out is not None:
                save_checkpoint(out, params, cfg, it)
                _write_loss_log(out / "loss_log.csv", losses)
            raise NumericAbort(f"iteration {it}: {e}", it) from e
        losses.append((it, lr, lval))
        if progress is not None:
            progress(it, lr, lval)
        if out is not None and run.checkpoint_every and (it + 1) % run.checkpoint_every == 0:
            save_checkpoint(out / f"iter_{it + 1:06d}", params, cfg, it + 1)
    if out is not None:
        save_checkpoint(out, params, cfg, run.max_iters)
        _write_loss_log(out / "loss_log.csv", losses)
    return TrainResult(params, losses, run.max_iters)


# ---------------------------------------------------------------- inference


def predict_density(params: ModelParams, cfg: ModelConfig, rgb: np.ndarray, thermal: np.ndarray,
                    record: list | None = None) -> np.ndarray:
    """Density map ``[h, w]`` at 1/8 resolution for one normalised pair."""
    with T.no_grad():
        d = model_forward(Tensor(rgb[None].astype(np.float32)), Tensor(thermal[None].astype(np.float32)),
                          params, cfg, record)
    return d.data[0, 0]


def dataset_loss(params: ModelParams, cfg: ExperimentConfig, data: list[AnnotatedPair]) -> float:
    """Mean-squared density error over ``data`` without augmentation."""
    with T.no_grad():
        rgb, th, gt = make_batch(data, cfg.run)
        return mse_loss(model_forward(rgb, th, params, cfg.model), gt).item()


def evaluate_pairs(params: ModelParams, cfg: ExperimentConfig, pairs: list[AnnotatedPair]) -> dict:
    if not pairs:
        raise DataError("empty split")
    preds, gts, pads = [], [], []
    for pair in pairs:
        padded, pad = pad_to_multiple(pair, 64)
        rgb = np.zeros_like(padded.rgb) if cfg.run.zero_rgb else padded.rgb
        th = np.zeros_like(padded.thermal) if cfg.run.zero_thermal else padded.thermal
        preds.append(predict_density(params, cfg.model, rgb, th).astype(np.float64))
        gts.append(density_target(padded))
        pads.append(pad)
    metrics, counts = evaluate_maps(preds, gts)
    report = {"mae": metrics.mae, "rmse": metrics.rmse, "n_images": len(pairs)}
    for lv in range(4):
        report[f"game{lv}"] = metrics.game.get(lv)
    report["images"] = [
        {"id": p.id, "pred_count": pc, "gt_count": gc, "pad": list(pad)}
        for p, (pc, gc), pad in zip(pairs, counts, pads)
    ]
    return report


def evaluate(ckpt, data_root, split: str = "all") -> dict:
    params, cfg, _ = load_checkpoint(ckpt)
    pairs = filter_split(load_dataset(data_root), split)
    if not pairs:
        raise DataError(f"empty split {split!r}")
    report = evaluate_pairs(params, cfg, pairs)
    report["split"] = split
    return report


def attention_maps(params: ModelParams, cfg: ModelConfig, rgb: np.ndarray,
                   thermal: np.ndarray) -> list[dict]:
    """Post-softmax attention of every MAF module, block, branch and head for one pair."""
    record: list = []
    predict_density(params, cfg, rgb, thermal, record)
    maps = []
    for m, mod in enumerate(record):
        for b, block in enumerate(mod["blocks"]):
            for branch in ("ima_r", "ima_t", "cma_r", "cma_t"):
                for h, attn in enumerate(block[branch]):
                    maps.append({"module": m, "stage": mod["stage"], "block": b, "branch": branch,
                                 "head": h, "weights": np.asarray(attn[0], dtype=np.float32)})
    return maps
