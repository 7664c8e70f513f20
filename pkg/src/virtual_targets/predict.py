"""Sampling future positions of real targets and evaluating density grids.

The model lives in its own frame: the target starts at ``model.frame_origin``
flying along the forward axis.  A real target's pose is applied in world units
(rotate about the frame origin, then translate to the target position) and the
result is expressed in the model's normalized coordinates.  Doing the pose
change in world units keeps it a rigid motion even when the normalization uses
a different scale per axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import NormalizationParams, Pose, rotation_matrix, transform_sample
from .errors import ConfigurationError, ContractViolation
from .flow import CnfModel

TIME_SLACK = 1e-9  # seconds; absorbs rounding at the ends of the trained range
GRID_CHUNK = 50_000  # grid nodes per flow evaluation, bounds peak memory


@dataclass(frozen=True)
class TargetState:
    """A real target: world pose plus its dynamics parameters (world units)."""

    pose: Pose
    psi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi", np.atleast_1d(np.asarray(self.psi, dtype=np.float64)))


@dataclass(frozen=True)
class PredictionRequest:
    targets: tuple[TargetState, ...]
    times: np.ndarray  # seconds
    n_samples: int
    seed: int = 0
    share_samples: bool = False  # targets with equal psi reuse one set of raw samples
    independent_latent: bool = False  # fresh z per time step instead of one z per trajectory

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "times", np.atleast_1d(np.asarray(self.times, dtype=np.float64)))
        if not self.targets or self.n_samples < 1 or len(self.times) < 1:
            raise ConfigurationError("need at least one target, one sample and one time step")


@dataclass(frozen=True)
class SampleTensor:
    """``samples[i, j, k]`` is sample ``j`` of target ``i`` at ``times[k]``.

    ``samples`` is in normalized world coordinates, ``raw`` holds the model
    outputs before the pose change.  ``point_valid`` marks entries that
    survived outlier removal.
    """

    samples: np.ndarray
    raw: np.ndarray
    times: np.ndarray
    point_valid: np.ndarray
    seed: int
    model_id: str = ""

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.samples.shape[:3]

    @property
    def trajectory_valid(self) -> np.ndarray:
        """``(n_r, n_s)``: True where every time step of the trajectory is valid."""
        return self.point_valid.all(axis=2)


def _norm_or_identity(model: CnfModel) -> NormalizationParams:
    if model.norm is not None:
        return model.norm
    n = model.d + 1 + model.n_psi
    return NormalizationParams(np.zeros(n), np.ones(n), model.d)


def _frame_origin(model: CnfModel) -> np.ndarray:
    return np.zeros(model.d) if model.frame_origin is None else model.frame_origin


def check_times(model: CnfModel, times: Any) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if model.norm is None:
        return times
    lo, hi = model.norm.time_range
    bad = (times < lo - TIME_SLACK) | (times > hi + TIME_SLACK) | ~np.isfinite(times)
    if bad.any():
        raise ContractViolation(
            f"time {times[bad][0]:g} s is outside the trained range [{lo:g}, {hi:g}] s; extrapolation is refused"
        )
    return times


def model_to_world(model: CnfModel, raw: np.ndarray, pose: Pose) -> np.ndarray:
    """Normalized model-frame outputs to normalized world coordinates for ``pose``."""
    norm = _norm_or_identity(model)
    s = norm.denormalize_position(raw) - _frame_origin(model)
    return norm.normalize_position(transform_sample(s, pose))


def world_to_model(model: CnfModel, u: np.ndarray, pose: Pose) -> np.ndarray:
    """Inverse of :func:`model_to_world`."""
    norm = _norm_or_identity(model)
    w = norm.denormalize_position(u) - pose.position
    s = w @ rotation_matrix(pose.heading, model.d) + _frame_origin(model)  # R^T applied to row vectors
    return norm.normalize_position(s)


def _raw_samples(model: CnfModel, z: np.ndarray, t_norm: np.ndarray, psi_norm: np.ndarray) -> np.ndarray:
    """``z`` is ``(n_s, d)`` (shared over time) or ``(n_s, n_t, d)``; returns ``(n_s, n_t, d)``."""
    n_t = len(t_norm)
    if z.ndim == 2:
        z = np.broadcast_to(z[:, None, :], (len(z), n_t, model.d))
    n_s = z.shape[0]
    flat = z.reshape(-1, model.d)
    t = np.tile(t_norm, n_s)
    return model.inverse(flat, t, psi_norm).reshape(n_s, n_t, model.d)


def draw_samples(model: CnfModel, request: PredictionRequest, model_id: str = "") -> SampleTensor:
    """Draw ``x[i, j, k] = f^-1(z[i, j], t_k, psi_i)`` and move it into target ``i``'s pose.

    Latents of target ``i`` come from ``default_rng([seed, i])`` so each target's
    samples do not depend on the other targets in the request.
    """
    times = check_times(model, request.times)
    norm = _norm_or_identity(model)
    t_norm = norm.normalize_time(times)
    n_r, n_s, n_t, d = len(request.targets), request.n_samples, len(times), model.d
    raw = np.empty((n_r, n_s, n_t, d))
    samples = np.empty_like(raw)
    cache: dict[bytes, np.ndarray] = {}
    for i, target in enumerate(request.targets):
        if target.pose.position.shape != (d,):
            raise ContractViolation(f"target {i}: position must have {d} components")
        psi = target.psi if model.n_psi else np.zeros(0)
        if psi.shape != (model.n_psi,):
            raise ContractViolation(f"target {i}: expected {model.n_psi} dynamics parameters, got {psi.shape}")
        key = psi.tobytes()
        if request.share_samples and key in cache:
            raw[i] = cache[key]
        else:
            rng = np.random.default_rng([request.seed, i])
            shape = (n_s, n_t, d) if request.independent_latent else (n_s, d)
            raw[i] = _raw_samples(model, rng.standard_normal(shape), t_norm, norm.normalize_psi(psi))
            cache[key] = raw[i]
        samples[i] = model_to_world(model, raw[i], target.pose)
    valid = np.ones((n_r, n_s, n_t), dtype=bool)
    return SampleTensor(samples, raw, times, valid, request.seed, model_id)


def outlier_mask(raw: Any, noise_std: float) -> np.ndarray:
    """True where a point has a component outside ``[-1 - 3 sigma, 1 + 3 sigma]``."""
    raw = np.asarray(raw, dtype=np.float64)
    bound = 1.0 + 3.0 * noise_std
    return np.any(np.abs(raw) > bound, axis=-1)


def remove_outliers(tensor: SampleTensor, noise_std: float) -> tuple[SampleTensor, int]:
    """Invalidate points whose raw model output leaves the training domain.

    Returns the updated tensor and the number of newly removed points.
    """
    if noise_std < 0:
        raise ConfigurationError("noise_std must be non-negative")
    outliers = outlier_mask(tensor.raw, noise_std)
    valid = tensor.point_valid & ~outliers
    removed = int(np.count_nonzero(tensor.point_valid & outliers))
    return SampleTensor(tensor.samples, tensor.raw, tensor.times, valid, tensor.seed, tensor.model_id), removed


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    resolution: tuple[int, int] = (200, 200)

    def __post_init__(self) -> None:
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        if not (x1 > x0 and y1 > y0) or min(self.resolution) < 1:
            raise ConfigurationError("grid ranges must be increasing and resolution positive")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinates along each axis."""
        out = []
        for (lo, hi), n in zip((self.x_range, self.y_range), self.resolution):
            step = (hi - lo) / n
            out.append(lo + step * (np.arange(n) + 0.5))
        return out[0], out[1]

    @property
    def cell_area(self) -> float:
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return (x1 - x0) / self.resolution[0] * (y1 - y0) / self.resolution[1]


@dataclass(frozen=True)
class PdfGrid:
    """``values[ix, iy]`` is the density at ``(xs[ix], ys[iy])``."""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    t: float
    psi: np.ndarray
    units: str  # "normalized" or "world"
    cell_area: float

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the grid density (Riemann sums)."""
        gx, gy = np.meshgrid(self.xs, self.ys, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        w = self.values.ravel() / self.values.sum()
        mean = w @ pts
        centred = pts - mean
        return mean, (centred * w[:, None]).T @ centred


def evaluate_pdf_grid(
    model: CnfModel,
    t: float,
    psi: Sequence[float] | None,
    pose: Pose,
    grid: GridSpec,
    units: str = "normalized",
) -> PdfGrid:
    """Density of the target position at time ``t`` on a regular 2D grid.

    Grid coordinates are normalized world coordinates or metres (``units``);
    values are densities per unit area of those coordinates.
    """
    if model.d != 2:
        raise ContractViolation("density grids are only available for d = 2")
    if units not in ("normalized", "world"):
        raise ConfigurationError(f"units must be 'normalized' or 'world', got {units!r}")
    t = float(check_times(model, t)[0])
    norm = _norm_or_identity(model)
    psi_arr = np.zeros(0) if psi is None else np.atleast_1d(np.asarray(psi, dtype=np.float64))
    xs, ys = grid.axes()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel()], axis=1)
    u = nodes if units == "normalized" else norm.normalize_position(nodes)
    # rotation has unit determinant and the per-axis scales cancel, so the
    # density per normalized area equals the model density at the raw point
    raw = world_to_model(model, u, pose)
    t_norm = norm.normalize_time(t)
    psi_norm = norm.normalize_psi(psi_arr) if model.n_psi else None
    log_p = np.concatenate(
        [model.log_density(raw[i : i + GRID_CHUNK], t_norm, psi_norm) for i in range(0, len(raw), GRID_CHUNK)]
    )
    if units == "world":
        log_p = log_p - np.sum(np.log(norm.half_range[:2]))
    values = np.exp(log_p).reshape(gx.shape)
    return PdfGrid(xs, ys, values, t, psi_arr, units, grid.cell_area)
