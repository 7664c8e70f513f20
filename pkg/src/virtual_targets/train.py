"""Fit a :class:`CnfModel` to trajectory data by minimizing the mean negative log-likelihood.

Every trajectory contributes one training point per time step.  Points are
expressed in normalized coordinates: positions, time and psi all live in
[-1, 1].  Gaussian noise is added to the position channels of every batch
(fresh draw each time) so the learned density has no singularity at the shared
start point of all trajectories.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import AdamState, adam_step
from .core import NormalizationParams, TrajectoryDataset
from .errors import ConfigurationError, ContractViolation, TrainingError
from .flow import CnfModel, base_log_density

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1000
    lr: float = 0.003
    train_fraction: float = 0.8
    noise_std: float = 0.01  # normalized units, position channels only
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("need epochs >= 0, batch_size >= 1 and lr > 0")


@dataclass(frozen=True)
class TrainingPoints:
    """Normalized positions ``x`` ``(n, d)`` and conditioning ``cond`` = ``[t, psi]`` ``(n, 1 + n_psi)``."""

    x: np.ndarray
    cond: np.ndarray

    def __post_init__(self) -> None:
        if self.x.ndim != 2 or self.cond.ndim != 2 or len(self.x) != len(self.cond):
            raise ContractViolation(f"mismatched point arrays {self.x.shape} and {self.cond.shape}")

    def __len__(self) -> int:
        return len(self.x)

    def take(self, index: np.ndarray) -> "TrainingPoints":
        return TrainingPoints(self.x[index], self.cond[index])


@dataclass
class TrainReport:
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 means the initial model was kept
    wall_time: float = 0.0
    test_nll: float | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_nll)


def build_training_points(dataset: TrajectoryDataset, norm: NormalizationParams) -> TrainingPoints:
    """One point per (trajectory, time step), trajectory-major."""
    if norm.d != dataset.d or norm.n_psi != dataset.n_psi:
        raise ContractViolation("normalization does not match the dataset's d / n_psi")
    xs, conds = [], []
    for traj, psi in zip(dataset.trajectories, dataset.params):
        n = len(traj)
        xs.append(norm.normalize_position(traj.positions))
        t = norm.normalize_time(traj.times)[:, None]
        conds.append(np.hstack([t, np.broadcast_to(norm.normalize_psi(psi), (n, dataset.n_psi))]))
    return TrainingPoints(np.concatenate(xs), np.concatenate(conds))


def subsample_points(points: TrainingPoints, fraction: float, seed: int) -> TrainingPoints:
    """Keep a uniform random ``fraction`` of the rows (original order preserved)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"subsample fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return points
    n_keep = max(1, int(round(fraction * len(points))))
    keep = np.sort(np.random.default_rng([seed, 1]).choice(len(points), size=n_keep, replace=False))
    return points.take(keep)


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, seed-deterministic train/validation index sets."""
    if n < 2:
        raise ConfigurationError("need at least two points to split into train and validation")
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def evaluate_nll(model: CnfModel, points: TrainingPoints, chunk: int = 20000) -> float:
    """Mean negative log-likelihood of noise-free points."""
    total = 0.0
    for start in range(0, len(points), chunk):
        x, cond = points.x[start : start + chunk], points.cond[start : start + chunk]
        z, logdet = model.forward_graph(x, cond)
        total -= float(np.sum(base_log_density(z.data) + logdet.data))
    return total / len(points)


def train(
    points: TrainingPoints,
    config: TrainConfig,
    model_init: CnfModel,
    test_points: TrainingPoints | None = None,
    on_epoch: Callable[[int, CnfModel, TrainReport], None] | None = None,
) -> tuple[CnfModel, TrainReport]:
    """Adam on mini-batches; returns the model with the lowest validation NLL.

    ``model_init`` is not modified.  ``on_epoch(epoch, model, report)`` is
    called after every epoch with the current (not best) model.
    """
    if len(points) == 0:
        raise ConfigurationError("no training points")
    if points.x.shape[1] != model_init.d or points.cond.shape[1] != model_init.n_cond:
        raise ContractViolation("training points do not match the model's d / n_psi")
    started = time.perf_counter()
    train_idx, val_idx = split_indices(len(points), config.train_fraction, config.seed)
    train_set, val_set = points.take(train_idx), points.take(val_idx)

    model = model_init.copy()
    params = model.parameter_tensors()  # share memory with the model's arrays
    arrays = [p.data for p in params]
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 2])
    report = TrainReport()
    best_val = evaluate_nll(model, val_set)
    best = model.copy()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            x = train_set.x[idx]
            if config.noise_std > 0:
                x = x + rng.normal(0.0, config.noise_std, x.shape)
            for p in params:
                p.zero_grad()
            loss = model.nll(x, train_set.cond[idx], params)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(arrays, [p.grad for p in params], state)
            loss_sum += value * len(idx)

        report.train_nll.append(loss_sum / len(train_set))
        val = evaluate_nll(model, val_set)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        report.val_nll.append(val)
        if val < best_val:
            best_val, report.best_epoch = val, epoch
            best = model.copy()
        log.info("epoch %d  train %.4f  val %.4f", epoch, report.train_nll[-1], val)
        if on_epoch is not None:
            on_epoch(epoch, model, report)

    report.wall_time = time.perf_counter() - started
    if test_points is not None:
        report.test_nll = evaluate_nll(best, test_points)
    return best, report
