"""Monte Carlo generators for the training and test trajectories.

Three target classes are provided:

* simple targets chaining random straight/left/right maneuvers at constant speed,
* targets committing to one fixed maneuver for the whole flight,
* ballistic targets with quadratic drag and Gaussian acceleration noise.

Every trajectory draws from its own generator seeded with ``(seed, index)`` so
results do not depend on how many trajectories are generated or in which order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import Trajectory, TrajectoryDataset
from .errors import ConfigurationError, SimulationError


class Maneuver(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    STRAIGHT = "straight"


# Index order used when a maneuver kind is drawn from the RNG.
MANEUVER_ORDER = (Maneuver.LEFT, Maneuver.RIGHT, Maneuver.STRAIGHT)


@dataclass(frozen=True)
class SimpleTargetConfig:
    duration: float = 100.0
    dt: float = 0.1
    speed: float = 200.0
    maneuver_duration_range: tuple[float, float] = (5.0, 50.0)
    lateral_accel_range: tuple[float, float] = (3.0, 20.0)
    maneuver_kinds: tuple[Maneuver, ...] = MANEUVER_ORDER
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.duration <= 0 or self.dt <= 0 or self.speed <= 0:
            raise ConfigurationError("duration, dt and speed must be positive")
        for name in ("maneuver_duration_range", "lateral_accel_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ConfigurationError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        kinds = tuple(Maneuver(k) for k in self.maneuver_kinds)
        if not kinds:
            raise ConfigurationError("at least one maneuver kind is required")
        object.__setattr__(self, "maneuver_kinds", kinds)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass(frozen=True)
class BallisticConfig:
    duration: float = 100.0
    dt: float = 0.1
    rho: float = 1.225
    bc_range: tuple[float, float] = (200.0, 800.0)
    x0: tuple[float, float, float] = (0.0, 0.0, -1000.0)
    v0: tuple[float, float, float] = (100.0, 0.0, 0.0)
    sigma: tuple[float, float, float] = (1.0, 1.0, 1.0)  # diagonal of the noise covariance
    g: float = 9.81
    rng_seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.bc_range
        if lo <= 0 or hi < lo:
            raise ConfigurationError(f"bc_range must be positive with min <= max, got {self.bc_range}")
        if self.dt <= 0 or self.duration <= 0:
            raise ConfigurationError("duration and dt must be positive")
        if any(s < 0 for s in self.sigma):
            raise ConfigurationError("noise covariance entries must be non-negative")
        if len(self.x0) != 3 or len(self.v0) != 3 or len(self.sigma) != 3:
            raise ConfigurationError("x0, v0 and sigma need three components")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass(frozen=True)
class ManeuverSegment:
    kind: Maneuver
    duration: float
    lateral_accel: float = 0.0


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def draw_segments(rng: np.random.Generator, config: SimpleTargetConfig) -> list[ManeuverSegment]:
    """Draw maneuvers until their total duration covers the trajectory.

    Kind, duration and lateral acceleration are always drawn (even for straight
    flight), so swapping left/right in the kind list yields the mirrored flight.
    """
    segments: list[ManeuverSegment] = []
    total = 0.0
    kinds = config.maneuver_kinds
    while total < config.duration:
        kind = kinds[int(rng.integers(len(kinds)))]
        duration = float(rng.uniform(*config.maneuver_duration_range))
        accel = float(rng.uniform(*config.lateral_accel_range))
        segments.append(ManeuverSegment(kind, duration, 0.0 if kind is Maneuver.STRAIGHT else accel))
        total += duration
    return segments


def trajectory_from_segments(segments: Sequence[ManeuverSegment], config: SimpleTargetConfig) -> Trajectory:
    """Fly a maneuver chain from the origin, northbound, sampling at multiples of dt.

    Turns are evaluated as exact circular arcs. The last segment is cut off at
    the trajectory duration.
    """
    times = np.arange(config.n_steps + 1) * config.dt
    positions = np.empty((len(times), 2))
    v = config.speed
    # compass heading: 0 = north, positive toward east (right turn increases it)
    pos = np.zeros(2)
    heading = 0.0
    seg_start = 0.0
    covered = np.zeros(len(times), dtype=bool)
    for seg in segments:
        seg_end = seg_start + seg.duration
        mask = (times >= seg_start) & (times < seg_end) & ~covered
        if seg is segments[-1] and seg_end >= times[-1] - 1e-9 * config.dt:
            mask |= ~covered & (times >= seg_start)  # absorb rounding at the final sample
        tau = times[mask] - seg_start
        positions[mask] = _fly(pos, heading, seg, v, tau)
        covered |= mask
        pos = _fly(pos, heading, seg, v, np.array([seg.duration]))[0]
        heading = _heading_after(heading, seg, v, seg.duration)
        seg_start = seg_end
        if seg_start > times[-1]:
            break
    if not covered.all():
        raise ConfigurationError("maneuver segments do not cover the trajectory duration")
    return Trajectory(times, positions)


def _turn_rate(seg: ManeuverSegment, speed: float) -> float:
    if seg.kind is Maneuver.STRAIGHT:
        return 0.0
    omega = seg.lateral_accel / speed
    return omega if seg.kind is Maneuver.RIGHT else -omega


def _heading_after(heading: float, seg: ManeuverSegment, speed: float, tau: float) -> float:
    return heading + _turn_rate(seg, speed) * tau


def _fly(pos: np.ndarray, heading: float, seg: ManeuverSegment, speed: float, tau: np.ndarray) -> np.ndarray:
    omega = _turn_rate(seg, speed)
    if omega == 0.0:
        east = pos[0] + speed * tau * math.sin(heading)
        north = pos[1] + speed * tau * math.cos(heading)
    else:
        r = speed / omega  # signed radius
        h = heading + omega * tau
        east = pos[0] + r * (math.cos(heading) - np.cos(h))
        north = pos[1] + r * (np.sin(h) - math.sin(heading))
    return np.column_stack([east, north])


def simulate_simple(config: SimpleTargetConfig, n: int) -> TrajectoryDataset:
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    trajectories = [
        trajectory_from_segments(draw_segments(trajectory_rng(config.rng_seed, i), config), config)
        for i in range(n)
    ]
    return TrajectoryDataset(
        d=2,
        n_psi=0,
        trajectories=tuple(trajectories),
        params=np.zeros((n, 0)),
        meta={"scenario": "simple", "n": n, "config": _config_dict(config)},
    )


def simulate_deterministic_modes(
    config: SimpleTargetConfig, n: int, lateral_accel: float = 3.0
) -> TrajectoryDataset:
    """Each trajectory holds one maneuver (left, right or straight) for the whole flight."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    trajectories = []
    for i in range(n):
        rng = trajectory_rng(config.rng_seed, i)
        kind = MANEUVER_ORDER[int(rng.integers(3))]
        accel = 0.0 if kind is Maneuver.STRAIGHT else lateral_accel
        # one segment longer than the flight: the maneuver never ends
        seg = ManeuverSegment(kind, config.duration + config.dt, accel)
        trajectories.append(trajectory_from_segments([seg], config))
    meta = {"scenario": "deterministic", "n": n, "lateral_accel": lateral_accel, "config": _config_dict(config)}
    return TrajectoryDataset(d=2, n_psi=0, trajectories=tuple(trajectories), params=np.zeros((n, 0)), meta=meta)


def ballistic_step(
    x: np.ndarray, v: np.ndarray, bc: np.ndarray, w: np.ndarray, config: BallisticConfig
) -> tuple[np.ndarray, np.ndarray]:
    """One explicit Euler step; position uses the pre-update velocity.

    ``x``, ``v`` and ``w`` are ``(n, 3)``, ``bc`` is ``(n,)``.
    """
    speed = np.linalg.norm(v, axis=1, keepdims=True)
    drag = -config.rho / (2.0 * bc[:, None]) * speed * v
    gravity = np.array([0.0, 0.0, config.g])
    x_next = x + v * config.dt
    v_next = v + (gravity + drag + w) * config.dt
    return x_next, v_next


def simulate_ballistic(config: BallisticConfig, n: int) -> TrajectoryDataset:
    """Integrate n noisy ballistic flights; the ballistic coefficient is psi."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    n_steps = config.n_steps
    std = np.sqrt(np.asarray(config.sigma, dtype=np.float64))
    bc = np.empty(n)
    noise = np.empty((n, n_steps, 3))
    for i in range(n):
        rng = trajectory_rng(config.rng_seed, i)
        bc[i] = rng.uniform(*config.bc_range)
        noise[i] = rng.standard_normal((n_steps, 3)) * std

    positions = np.empty((n, n_steps + 1, 3))
    x = np.tile(np.asarray(config.x0, dtype=np.float64), (n, 1))
    v = np.tile(np.asarray(config.v0, dtype=np.float64), (n, 1))
    positions[:, 0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            x, v = ballistic_step(x, v, bc, noise[:, k], config)
            positions[:, k + 1] = x
            bad = ~np.isfinite(v).all(axis=1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise SimulationError(f"trajectory {i}: velocity diverged at step {k + 1}")

    times = np.arange(n_steps + 1) * config.dt
    trajectories = tuple(Trajectory(times, positions[i]) for i in range(n))
    meta = {"scenario": "ballistic", "n": n, "config": _config_dict(config)}
    return TrajectoryDataset(d=3, n_psi=1, trajectories=trajectories, params=bc[:, None], meta=meta)


def _config_dict(config) -> dict:
    out = asdict(config)
    if "maneuver_kinds" in out:
        out["maneuver_kinds"] = [Maneuver(k).value for k in out["maneuver_kinds"]]
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
