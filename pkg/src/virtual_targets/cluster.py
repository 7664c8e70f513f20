"""Time-series k-means: sample trajectories in, virtual-target trajectories out."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NormalizationParams, Trajectory
from .errors import ConfigurationError, ContractViolation
from .predict import SampleTensor


@dataclass(frozen=True)
class ClusterConfig:
    n_virtual: int
    tolerance: float = 1e-4  # relative inertia decrease that stops Lloyd iterations
    max_iter: int = 300
    seed: int = 0
    restarts: int = 10

    def __post_init__(self) -> None:
        if self.n_virtual < 1 or self.tolerance <= 0 or self.max_iter < 1 or self.restarts < 1:
            raise ConfigurationError("need n_virtual >= 1, tolerance > 0, max_iter >= 1 and restarts >= 1")


@dataclass(frozen=True)
class Flattened:
    """Rows ``y = [x_1, ..., x_nt]`` with the (target, sample) index each came from."""

    y: np.ndarray
    target_ids: np.ndarray
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class KMeansResult:
    means: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)  # inertia after each assignment, best restart
    n_iter: int = 0

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.means))


@dataclass(frozen=True)
class VirtualTargetSet:
    trajectories: tuple[Trajectory, ...]
    counts: np.ndarray
    inertia: float

    def __len__(self) -> int:
        return len(self.trajectories)


def flatten(tensor: SampleTensor) -> Flattened:
    """Concatenate each sample trajectory's positions; incomplete trajectories are skipped."""
    n_r, n_s, n_t = tensor.shape
    keep = tensor.trajectory_valid
    ids_r, ids_s = np.nonzero(keep)  # row-major: target-major, sample-minor
    y = tensor.samples[keep].reshape(len(ids_r), n_t * tensor.samples.shape[3])
    return Flattened(y, ids_r, ids_s)


def _sq_distances(y: np.ndarray, means: np.ndarray) -> np.ndarray:
    diff = y[:, None, :] - means[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    means = [y[rng.integers(len(y))]]
    d2 = _sq_distances(y, np.array(means))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        i = rng.integers(len(y)) if total <= 0 else rng.choice(len(y), p=d2 / total)
        means.append(y[i])
        d2 = np.minimum(d2, _sq_distances(y, y[i][None])[:, 0])
    return np.array(means, dtype=np.float64)


def _fill_empty(y: np.ndarray, labels: np.ndarray, point_d2: np.ndarray, means: np.ndarray) -> None:
    """Give each empty cluster the point worst served by a cluster that can spare it."""
    for c in range(len(means)):
        counts = np.bincount(labels, minlength=len(means))
        if counts[c]:
            continue
        spare = counts[labels] > 1
        far = int(np.argmax(np.where(spare, point_d2, -1.0)))
        labels[far] = c
        means[c] = y[far]
        point_d2[far] = 0.0


def _hartigan(y: np.ndarray, labels: np.ndarray, means: np.ndarray, tolerance: float, max_moves: int) -> list[float]:
    """Single-point transfers that lower the inertia, best move first.

    Lloyd stops at partitions where some point would still gain from moving once
    the two affected means are updated; this pass removes those.  Any partition
    it ends on is also a Lloyd fixed point.  Stops when the best move lowers the
    inertia by less than ``tolerance`` (relative).  Returns the inertia after each move.
    """
    k = len(means)
    rows = np.arange(len(y))
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    d2 = _sq_distances(y, means)
    total = float(d2[rows, labels].sum())
    history: list[float] = []
    for _ in range(max_moves):
        n_own = counts[labels]
        # removing a point from a cluster of n lowers its cost by n/(n-1) * d^2; singletons stay
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(n_own > 1, n_own / (n_own - 1) * d2[rows, labels], -np.inf)
        delta = counts / (counts + 1) * d2 - gain[:, None]
        delta[rows, labels] = np.inf
        i, c = np.unravel_index(np.argmin(delta), delta.shape)
        if not delta[i, c] < -tolerance * total:
            break
        a = labels[i]
        means[a] = (means[a] * counts[a] - y[i]) / (counts[a] - 1)
        means[c] = (means[c] * counts[c] + y[i]) / (counts[c] + 1)
        counts[a] -= 1
        counts[c] += 1
        labels[i] = c
        d2[:, [a, c]] = _sq_distances(y, means[[a, c]])
        total += float(delta[i, c])
        history.append(total)
    return history


def _lloyd(y: np.ndarray, means: np.ndarray, config: ClusterConfig) -> KMeansResult:
    k = len(means)
    history: list[float] = []
    labels = np.zeros(len(y), dtype=np.intp)
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        d2 = _sq_distances(y, means)
        labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(len(y)), labels]
        _fill_empty(y, labels, point_d2, means)
        inertia = float(point_d2.sum())
        history.append(inertia)
        if len(history) > 1:
            prev = history[-2]
            if prev <= 0 or (prev - inertia) / prev < config.tolerance:
                break
        for c in range(k):
            means[c] = y[labels == c].mean(axis=0)
    for c in range(k):
        means[c] = y[labels == c].mean(axis=0)
    history.extend(_hartigan(y, labels, means, config.tolerance, max_moves=10 * len(y)))
    # final means are the centroids of the final partition
    for c in range(k):
        means[c] = y[labels == c].mean(axis=0)
    d2 = _sq_distances(y, means)
    inertia = float(d2[np.arange(len(y)), labels].sum())
    return KMeansResult(means, labels, inertia, history, n_iter)


def kmeans(y: np.ndarray, config: ClusterConfig) -> KMeansResult:
    """Best of ``config.restarts`` k-means++ seeded Lloyd runs."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ContractViolation(f"expected a 2-D array of flattened trajectories, got shape {y.shape}")
    if len(y) < config.n_virtual:
        raise ConfigurationError(f"{len(y)} sample trajectories cannot form {config.n_virtual} clusters")
    if not np.all(np.isfinite(y)):
        raise ContractViolation("flattened trajectories contain non-finite values")
    best: KMeansResult | None = None
    for r in range(config.restarts):
        rng = np.random.default_rng([config.seed, r])
        result = _lloyd(y, _kmeans_pp(y, config.n_virtual, rng), config)
        if best is None or result.inertia < best.inertia:
            best = result
    assert best is not None
    return best


def unflatten(means: np.ndarray, d: int) -> np.ndarray:
    """``(n_v, n_t * d)`` to ``(n_v, n_t, d)``."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[1] % d:
        raise ContractViolation(f"cannot reshape means of shape {means.shape} into steps of dimension {d}")
    return means.reshape(len(means), -1, d)


def unflatten_and_renormalize(
    means: np.ndarray,
    times: np.ndarray,
    norm: NormalizationParams,
    counts: np.ndarray | None = None,
    inertia: float = 0.0,
) -> VirtualTargetSet:
    paths = unflatten(means, norm.d)
    times = np.asarray(times, dtype=np.float64)
    if paths.shape[1] != len(times):
        raise ContractViolation(f"means have {paths.shape[1]} steps but {len(times)} times were given")
    trajectories = tuple(Trajectory(times, norm.denormalize_position(p)) for p in paths)
    counts = np.zeros(len(paths), dtype=int) if counts is None else np.asarray(counts)
    return VirtualTargetSet(trajectories, counts, float(inertia))


def virtual_targets(
    tensor: SampleTensor, norm: NormalizationParams, config: ClusterConfig
) -> tuple[VirtualTargetSet, Flattened, KMeansResult]:
    """Flatten, cluster and map the means back to world coordinates."""
    flat = flatten(tensor)
    result = kmeans(flat.y, config)
    return unflatten_and_renormalize(result.means, tensor.times, norm, result.counts, result.inertia), flat, result
