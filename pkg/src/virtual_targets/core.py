"""Domain types, min-max normalization and pose geometry.

Frames
------
2D positions are ``(east, north)``; 3D positions are North-East-Down.  In both
cases the model frame has the target at the origin flying along the *forward*
axis (north).

The heading ``chi`` stored in a :class:`Pose` is the angle for which
``rotation_matrix(chi)`` turns the model's forward axis onto the direction of
travel.  Use :func:`heading_from_velocity` to obtain it from a velocity vector
instead of reasoning about signs by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation


def _as_float_array(values: Any, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ContractViolation(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped positions of one target, ``positions[k]`` at ``times[k]``."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        times = _as_float_array(self.times, 1, "times")
        positions = _as_float_array(self.positions, 2, "positions")
        if len(times) < 1 or len(times) != len(positions):
            raise ContractViolation(
                f"times ({len(times)}) and positions ({len(positions)}) must have equal, non-zero length"
            )
        if positions.shape[1] not in (2, 3):
            raise ContractViolation(f"position dimension must be 2 or 3, got {positions.shape[1]}")
        if np.any(np.diff(times) <= 0):
            raise ContractViolation("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class TrajectoryDataset:
    """Trajectories plus one dynamics-parameter vector (psi) per trajectory."""

    d: int
    n_psi: int
    trajectories: tuple[Trajectory, ...]
    params: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        trajectories = tuple(self.trajectories)
        params = np.array(self.params, dtype=np.float64).reshape(len(trajectories), self.n_psi)
        for i, traj in enumerate(trajectories):
            if traj.d != self.d:
                raise ContractViolation(f"trajectory {i} has dimension {traj.d}, dataset declares {self.d}")
        if not np.all(np.isfinite(params)):
            raise ContractViolation("dynamics parameters contain non-finite values")
        params.setflags(write=False)
        object.__setattr__(self, "trajectories", trajectories)
        object.__setattr__(self, "params", params)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_points(self) -> int:
        return sum(len(t) for t in self.trajectories)


@dataclass(frozen=True)
class NormalizationParams:
    """Per-channel affine map ``u -> (u - center) / half_range``.

    Channels are laid out as ``[position (d), time (1), psi (n_psi)]``.
    """

    center: np.ndarray
    half_range: np.ndarray
    d: int

    def __post_init__(self) -> None:
        center = _as_float_array(self.center, 1, "center")
        half_range = _as_float_array(self.half_range, 1, "half_range")
        if center.shape != half_range.shape:
            raise ContractViolation("center and half_range must have the same length")
        if np.any(half_range <= 0):
            raise ContractViolation("half_range must be positive in every channel")
        if not 0 < self.d < len(center):
            raise ContractViolation(f"invalid position dimension {self.d} for {len(center)} channels")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_range", half_range)

    @property
    def n_channels(self) -> int:
        return len(self.center)

    @property
    def n_psi(self) -> int:
        return self.n_channels - self.d - 1

    def normalize(self, u: Any) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        self._check(u)
        return (u - self.center) / self.half_range

    def denormalize(self, u: Any) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        self._check(u)
        return u * self.half_range + self.center

    def _check(self, u: np.ndarray) -> None:
        if u.shape[-1:] != (self.n_channels,):
            raise ContractViolation(f"expected {self.n_channels} channels, got shape {u.shape}")

    # Channel-group helpers. They broadcast over leading axes.
    def normalize_position(self, p: Any) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.center[: self.d]) / self.half_range[: self.d]

    def denormalize_position(self, p: Any) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) * self.half_range[: self.d] + self.center[: self.d]

    def normalize_time(self, t: Any) -> np.ndarray:
        return (np.asarray(t, dtype=np.float64) - self.center[self.d]) / self.half_range[self.d]

    def denormalize_time(self, t: Any) -> np.ndarray:
        return np.asarray(t, dtype=np.float64) * self.half_range[self.d] + self.center[self.d]

    def normalize_psi(self, psi: Any) -> np.ndarray:
        s = slice(self.d + 1, None)
        return (np.asarray(psi, dtype=np.float64) - self.center[s]) / self.half_range[s]

    @property
    def time_range(self) -> tuple[float, float]:
        c, h = self.center[self.d], self.half_range[self.d]
        return float(c - h), float(c + h)

    def to_dict(self) -> dict[str, Any]:
        return {"d": self.d, "center": self.center.tolist(), "half_range": self.half_range.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NormalizationParams":
        return cls(center=np.array(data["center"]), half_range=np.array(data["half_range"]), d=int(data["d"]))


def fit_normalization(dataset: TrajectoryDataset) -> NormalizationParams:
    """Fit min-max normalization so every observed channel spans exactly [-1, 1].

    Channels with zero observed range keep their constant value as center and
    get ``half_range = 1``.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot fit normalization on an empty dataset")
    positions = np.concatenate([t.positions for t in dataset.trajectories])
    times = np.concatenate([t.times for t in dataset.trajectories])
    lo = np.concatenate([positions.min(axis=0), [times.min()], dataset.params.min(axis=0)])
    hi = np.concatenate([positions.max(axis=0), [times.max()], dataset.params.max(axis=0)])
    half = (hi - lo) / 2.0
    center = lo + half
    degenerate = half <= 0
    half[degenerate] = 1.0
    center[degenerate] = lo[degenerate]
    return NormalizationParams(center=center, half_range=half, d=dataset.d)


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return float(angle - 2.0 * math.pi * math.ceil((angle - math.pi) / (2.0 * math.pi)))


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    heading: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _as_float_array(self.position, 1, "position"))
        if not math.isfinite(self.heading):
            raise ContractViolation("heading must be finite")
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @classmethod
    def from_velocity(cls, position: Sequence[float], velocity: Sequence[float]) -> "Pose":
        return cls(np.asarray(position, dtype=np.float64), heading_from_velocity(velocity))


def heading_from_velocity(velocity: Sequence[float]) -> float:
    v = np.asarray(velocity, dtype=np.float64)
    if v.shape == (2,):
        # (east, north): R(chi) @ (0, 1) = (-sin chi, cos chi)
        return wrap_angle(math.atan2(-v[0], v[1]))
    if v.shape == (3,):
        # NED: R(chi) @ (1, 0, 0) = (cos chi, sin chi, 0)
        return wrap_angle(math.atan2(v[1], v[0]))
    raise ContractViolation(f"velocity must have 2 or 3 components, got shape {v.shape}")


def rotation_matrix(chi: float, d: int = 2) -> np.ndarray:
    """``[[cos, -sin], [sin, cos]]``; in 3D the third (down) axis is left untouched."""
    c, s = math.cos(chi), math.sin(chi)
    if d == 2:
        return np.array([[c, -s], [s, c]])
    if d == 3:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ContractViolation(f"rotation only defined for d in (2, 3), got {d}")


def transform_sample(x: Any, pose: Pose) -> np.ndarray:
    """Rotate by the pose heading, then translate to the pose position.

    ``x`` may be a single position or an array of positions (last axis = d).
    """
    x = np.asarray(x, dtype=np.float64)
    d = pose.position.shape[0]
    if x.shape[-1] != d:
        raise ContractViolation(f"sample dimension {x.shape[-1]} does not match pose dimension {d}")
    return x @ rotation_matrix(pose.heading, d).T + pose.position
