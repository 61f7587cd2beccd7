"""Two-stage training, last-layer retraining variants and baselines."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np

from .errors import ConfigError, NumericalError, SamplingError
from .groups import GroupedDataset, balanced_subsample, group_uniform_batches, shuffled_batches
from .losses import ce_from_logits_grad, combined_loss_grad, gdro_loss
from .model import ClassifierModel, ModelSpec

logger = logging.getLogger(__name__)

STAGE2_VARIANTS = ("LLR_all", "LLR_b", "FT_b")
TRAJECTORY_COLUMNS = ("epoch", "ce", "supcon", "total")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.5
    tau: float = 1.0
    epochs: int = 20
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    supcon_variant: str = "negatives"
    supcon_reduction: str = "sum"
    hidden: int = 64
    feature_dim: int = 32

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.tau <= 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise ConfigError("tau, learning_rate and batch_size must be positive")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("epochs and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GDROConfig:
    eta: float = 0.01
    initial_weights: Optional[Dict[str, float]] = None  # group string -> weight; uniform if None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    rows: List[dict] = field(default_factory=list)

    def add(self, epoch: int, ce: float, supcon: float, total: float):
        self.rows.append({"epoch": epoch, "ce": ce, "supcon": supcon, "total": total})

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(float(v)) if k != "epoch" else v for k, v in r.items()})
        return path


def new_model(ds: GroupedDataset, cfg: TrainConfig, seed: Optional[int] = None) -> ClassifierModel:
    shape = ds.images().shape[1:]
    spec = ModelSpec(int(np.prod(shape)), len(ds.classes), cfg.hidden, cfg.feature_dim)
    return ClassifierModel(spec, cfg.seed if seed is None else seed)


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


# divergence is caught by the finite-loss checks below, so raw overflow warnings are noise
@np.errstate(over="ignore", invalid="ignore")
def _fit(model: ClassifierModel, x, y, batches: Iterator[np.ndarray], n_steps_epoch: int,
         cfg: TrainConfig, traj: Trajectory, beta: Optional[float] = None) -> ClassifierModel:
    beta = cfg.beta if beta is None else beta
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        for _ in range(n_steps_epoch):
            ix = next(batches)
            logits, feats, cache = model.forward(x[ix])
            out = combined_loss_grad(logits, feats, y[ix], beta, cfg.tau, cfg.supcon_variant, cfg.supcon_reduction)
            if not np.isfinite(out["total"]):
                traj.add(epoch, out["ce"], out["supcon"], out["total"])
                raise NumericalError(f"loss diverged at epoch {epoch}", trajectory=traj.rows)
            model.sgd_step(model.backward(cache, out["d_logits"], out["d_features"]),
                           cfg.learning_rate, cfg.weight_decay)
            sums += (out["ce"], out["supcon"], out["total"])
        traj.add(epoch, *(sums / n_steps_epoch))
    return model


def _epoch_stream(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    rng = np.random.default_rng(seed)
    while True:
        yield from shuffled_batches(n, batch_size, rng)


def stage1_pretrain(model: ClassifierModel, synth: GroupedDataset, cfg: TrainConfig,
                    trajectory: Optional[Trajectory] = None) -> ClassifierModel:
    """Train encoder and head on the balanced synthetic set with group-uniform batches."""
    model = model.copy()
    model.unfreeze("encoder")
    traj = trajectory if trajectory is not None else Trajectory()
    batches = group_uniform_batches(synth, cfg.batch_size, cfg.seed)
    return _fit(model, synth.images(), synth.class_indices(), batches,
                _steps_per_epoch(len(synth), cfg.batch_size), cfg, traj)


def stage2_finetune(model: ClassifierModel, real: GroupedDataset, variant: str, cfg: TrainConfig,
                    trajectory: Optional[Trajectory] = None) -> ClassifierModel:
    """Adapt a pretrained model to the real training split.

    ``LLR_all`` retrains the head on all real data with class-uniform
    batches; ``LLR_b`` retrains the head on a group-balanced subsample;
    ``FT_b`` trains the whole network on that subsample. The input model is
    left untouched.
    """
    if variant not in STAGE2_VARIANTS:
        raise ConfigError(f"unknown stage-2 variant {variant!r}")
    model = model.copy()
    traj = trajectory if trajectory is not None else Trajectory()
    if variant == "LLR_all":
        data = real
        batches = group_uniform_batches(real, cfg.batch_size, cfg.seed, mode="class")
    else:
        data = balanced_subsample(real, cfg.seed)
        batches = _epoch_stream(len(data), cfg.batch_size, cfg.seed)
    if variant == "FT_b":
        model.unfreeze("encoder")
    else:
        model.freeze("encoder")
    return _fit(model, data.images(), data.class_indices(), batches,
                _steps_per_epoch(len(data), cfg.batch_size), cfg, traj)


def erm_baseline(real: GroupedDataset, cfg: TrainConfig, trajectory: Optional[Trajectory] = None) -> ClassifierModel:
    """Cross-entropy on shuffled minibatches of the biased split, no balancing."""
    model = new_model(real, cfg)
    traj = trajectory if trajectory is not None else Trajectory()
    batches = _epoch_stream(len(real), cfg.batch_size, cfg.seed)
    return _fit(model, real.images(), real.class_indices(), batches,
                _steps_per_epoch(len(real), cfg.batch_size), cfg, traj, beta=1.0)


def _initial_q(ds: GroupedDataset, gcfg: GDROConfig) -> Dict[int, float]:
    groups = ds.all_groups()
    if gcfg.initial_weights is None:
        return {i: 1.0 / len(groups) for i in range(len(groups))}
    q = np.array([gcfg.initial_weights.get(str(g), 0.0) for g in groups], dtype=np.float64)
    if q.sum() <= 0 or np.any(q < 0):
        raise ConfigError("initial GDRO weights must be a non-negative, non-zero vector")
    return {i: float(v) for i, v in enumerate(q / q.sum())}


@np.errstate(over="ignore", invalid="ignore")
def _fit_gdro(model: ClassifierModel, ds: GroupedDataset, cfg: TrainConfig, gcfg: GDROConfig,
              traj: Trajectory) -> ClassifierModel:
    x, y, gid = ds.images(), ds.class_indices(), ds.group_indices()
    q = _initial_q(ds, gcfg)
    batches = _epoch_stream(len(ds), cfg.batch_size, cfg.seed)
    steps = _steps_per_epoch(len(ds), cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for _ in range(steps):
            ix = next(batches)
            logits, feats, cache = model.forward(x[ix])
            losses, grads = {}, {}
            for g in np.unique(gid[ix]):
                sel = gid[ix] == g
                losses[int(g)], grads[int(g)] = ce_from_logits_grad(logits[sel], y[ix][sel])
            # groups absent from the batch contribute zero loss this step
            full = {g: losses.get(g, 0.0) for g in q}
            loss, q = gdro_loss(full, q, gcfg.eta)
            if not np.isfinite(loss):
                raise NumericalError(f"GDRO loss diverged at epoch {epoch}", trajectory=traj.rows)
            d_logits = np.zeros_like(logits)
            for g, d in grads.items():
                d_logits[gid[ix] == g] = q[g] * d
            model.sgd_step(model.backward(cache, d_logits), cfg.learning_rate, cfg.weight_decay)
            total += loss
        traj.add(epoch, total / steps, 0.0, total / steps)
    model.gdro_weights = {str(g): q[i] for i, g in enumerate(ds.all_groups())}
    return model


def gdro_baseline(real: GroupedDataset, cfg: TrainConfig, gcfg: GDROConfig = GDROConfig(),
                  trajectory: Optional[Trajectory] = None) -> ClassifierModel:
    """Group-robust training from scratch on the real split."""
    traj = trajectory if trajectory is not None else Trajectory()
    return _fit_gdro(new_model(real, cfg), real, cfg, gcfg, traj)


def gdro_finetune(model: ClassifierModel, real: GroupedDataset, cfg: TrainConfig,
                  gcfg: GDROConfig = GDROConfig(), freeze_encoder: bool = False,
                  trajectory: Optional[Trajectory] = None) -> ClassifierModel:
    """Finetune a pretrained model on real data with the group-robust objective."""
    model = model.copy()
    if freeze_encoder:
        model.freeze("encoder")
    else:
        model.unfreeze("encoder")
    traj = trajectory if trajectory is not None else Trajectory()
    return _fit_gdro(model, real, cfg, gcfg, traj)


def combine_real_synthetic(real: GroupedDataset, synth: GroupedDataset, balanced: bool, seed: int) -> GroupedDataset:
    """Single-stage training sets mixing real and synthetic images.

    ``balanced=False`` concatenates everything. ``balanced=True`` takes, per
    group, ``T = min_g(real_g + synth_g)`` items: real images first (up to
    ``T``, sampled at random) and synthetic images for the rest.
    """
    if not balanced:
        return real.derive(list(real.items) + list(synth.items))
    rng = np.random.default_rng(seed)
    r_idx, s_idx = real.group_index(), synth.group_index()
    groups = real.all_groups()
    missing = [g for g in groups if len(r_idx.get(g, [])) + len(s_idx.get(g, [])) == 0]
    if missing:
        raise SamplingError(f"no images at all for {[str(g) for g in missing]}")
    t = min(len(r_idx.get(g, [])) + len(s_idx.get(g, [])) for g in groups)
    items = []
    for g in groups:
        rix = np.asarray(r_idx.get(g, []), dtype=np.int64)
        n_real = min(len(rix), t)
        items += [real.items[i] for i in sorted(rng.choice(rix, size=n_real, replace=False))] if n_real else []
        six = np.asarray(s_idx.get(g, []), dtype=np.int64)
        items += [synth.items[i] for i in sorted(rng.choice(six, size=t - n_real, replace=False))] if t > n_real else []
    return real.derive(items)


def single_stage(real: GroupedDataset, synth: GroupedDataset, cfg: TrainConfig, balanced: bool,
                 trajectory: Optional[Trajectory] = None) -> ClassifierModel:
    """One training run on mixed real and synthetic data, combined loss, shuffled batches."""
    data = combine_real_synthetic(real, synth, balanced, cfg.seed)
    model = new_model(data, cfg)
    traj = trajectory if trajectory is not None else Trajectory()
    batches = _epoch_stream(len(data), cfg.batch_size, cfg.seed)
    return _fit(model, data.images(), data.class_indices(), batches,
                _steps_per_epoch(len(data), cfg.batch_size), cfg, traj)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
