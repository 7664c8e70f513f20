"""File formats: dataset CSV + sidecar, checkpoints, reports, sample/density/cluster CSVs.

All floats are written with 17 significant digits so a float64 survives the
round trip through text exactly.  JSON is written with sorted keys so equal
content gives equal bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .cluster import VirtualTargetSet
from .core import NormalizationParams, Pose, Trajectory, TrajectoryDataset
from .errors import ContractViolation, DataError
from .flow import CnfModel
from .predict import PdfGrid, SampleTensor, TargetState
from .train import TrainReport

UNITS = {"t": "s", "position": "m"}


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def sidecar_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def dump_json(obj: Any, path: Path | str) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path: Path | str) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def sha256_file(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_rows(path: Path | str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)  # RFC 4180: comma separated, CRLF line ends
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, (int, np.integer, str)) else fmt(v) for v in row])


# -- datasets -------------------------------------------------------------------


def write_dataset(path: Path | str, dataset: TrajectoryDataset, seed: int | None = None) -> None:
    d, n_psi = dataset.d, dataset.n_psi
    header = ["traj_id", "t", *(f"p{i}" for i in range(d)), *(f"psi{i}" for i in range(n_psi))]

    def rows():
        for i, (traj, psi) in enumerate(zip(dataset.trajectories, dataset.params)):
            for t, pos in zip(traj.times, traj.positions):
                yield (i, t, *pos, *psi)

    _write_rows(path, header, rows())
    sidecar = {
        "d": d,
        "n_psi": n_psi,
        "n_trajectories": len(dataset),
        "units": {**UNITS, "psi": "kg/m^2" if n_psi else None},
        "seed": seed,
        "meta": dataset.meta,
    }
    dump_json(sidecar, sidecar_path(path))


def read_dataset(path: Path | str) -> TrajectoryDataset:
    """Parse a dataset CSV; malformed content raises :class:`DataError` naming the line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    meta: dict[str, Any] = {}
    side = sidecar_path(path)
    if side.exists():
        meta = load_json(side).get("meta", {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}:1: empty file")
        d = sum(1 for h in header if h.startswith("p") and not h.startswith("psi"))
        n_psi = sum(1 for h in header if h.startswith("psi"))
        expected = ["traj_id", "t", *(f"p{i}" for i in range(d)), *(f"psi{i}" for i in range(n_psi))]
        if header != expected or d not in (2, 3):
            raise DataError(f"{path}:1: bad header {header!r}")
        groups: list[tuple[list[float], list[list[float]], list[float]]] = []
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                traj_id = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{line}: non-finite value")
            if traj_id == len(groups):
                groups.append(([], [], values[1 + d :]))
            elif traj_id != len(groups) - 1:
                raise DataError(f"{path}:{line}: trajectory ids must be contiguous from 0, got {traj_id}")
            times, positions, psi = groups[traj_id]
            if values[1 + d :] != psi:
                raise DataError(f"{path}:{line}: dynamics parameters change within trajectory {traj_id}")
            if times and values[0] <= times[-1]:
                raise DataError(f"{path}:{line}: times must be strictly increasing")
            times.append(values[0])
            positions.append(values[1 : 1 + d])
    if not groups:
        raise DataError(f"{path}: no data rows")
    trajectories = tuple(Trajectory(np.array(t), np.array(p)) for t, p, _ in groups)
    params = np.array([psi for _, _, psi in groups]).reshape(len(groups), n_psi)
    return TrajectoryDataset(d, n_psi, trajectories, params, meta)


# -- checkpoints and training reports -------------------------------------------


def write_checkpoint(path: Path | str, model: CnfModel, training: dict[str, Any] | None = None) -> None:
    data = model.to_dict()
    if training is not None:
        data["training"] = training
    dump_json(data, path)


def read_checkpoint(path: Path | str) -> tuple[CnfModel, dict[str, Any]]:
    data = load_json(path)
    try:
        return CnfModel.from_dict(data), data.get("training", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid checkpoint ({exc})") from None


def write_report(path: Path | str, report: TrainReport) -> None:
    rows = ((e + 1, tr, va) for e, (tr, va) in enumerate(zip(report.train_nll, report.val_nll)))
    _write_rows(path, ["epoch", "train_nll", "val_nll"], rows)


# -- prediction inputs and outputs ----------------------------------------------


def read_targets(path: Path | str, d: int) -> list[TargetState]:
    """JSON list of ``{"position": [...], "velocity": [...], "psi": [...]}`` in world units."""
    data = load_json(path)
    if not isinstance(data, list) or not data:
        raise DataError(f"{path}: expected a non-empty JSON list of targets")
    targets = []
    for i, entry in enumerate(data):
        try:
            position = [float(v) for v in entry["position"]]
            velocity = [float(v) for v in entry.get("velocity", [0.0, 1.0] if d == 2 else [1.0, 0.0, 0.0])]
            psi = [float(v) for v in entry.get("psi", [])]
            if len(position) != d or len(velocity) != d:
                raise ValueError(f"position and velocity need {d} components")
            if not any(velocity):
                raise ValueError("velocity must be non-zero to define a heading")
            targets.append(TargetState(Pose.from_velocity(position, velocity), np.array(psi)))
        except (KeyError, TypeError, ValueError, ContractViolation) as exc:
            raise DataError(f"{path}: target {i}: {exc}") from None
    return targets


def write_samples(path: Path | str, tensor: SampleTensor, norm: NormalizationParams) -> int:
    """Valid samples in world metres; returns the number of rows written."""
    world = norm.denormalize_position(tensor.samples)
    d = world.shape[3]
    count = 0

    def rows():
        nonlocal count
        for i, j, k in zip(*np.nonzero(tensor.point_valid)):
            count += 1
            yield (int(i), int(j), int(k) + 1, tensor.times[k], *world[i, j, k])

    _write_rows(path, ["target_id", "sample_id", "step", "t", *(f"p{c}" for c in range(d))], rows())
    return count


def write_density(path: Path | str, grid: PdfGrid) -> None:
    rows = ((x, y, grid.values[ix, iy]) for ix, x in enumerate(grid.xs) for iy, y in enumerate(grid.ys))
    _write_rows(path, ["x", "y", "pdf"], rows)


def write_virtual_targets(path: Path | str, vts: VirtualTargetSet) -> None:
    d = vts.trajectories[0].d

    def rows():
        for v, traj in enumerate(vts.trajectories):
            for t, pos in zip(traj.times, traj.positions):
                yield (v, t, *pos)

    _write_rows(path, ["virtual_id", "t", *(f"p{c}" for c in range(d))], rows())


def read_csv_columns(path: Path | str) -> dict[str, np.ndarray]:
    """Generic reader for the numeric CSVs written here (used by tests and plotting)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    arr = np.array(rows).reshape(len(rows), len(header))
    return {name: arr[:, c] for c, name in enumerate(header)}
