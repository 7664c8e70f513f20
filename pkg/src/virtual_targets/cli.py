"""Command-line pipeline: simulate -> train -> sample / density / cluster.

Every subcommand writes its artifacts plus one ``<output>.manifest.json``
recording the arguments, their digest, seeds, wall time, artifact hashes and a
hardware string.  Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.
The ``VT_NUM_THREADS`` environment variable caps BLAS threads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import io
from .cluster import ClusterConfig, virtual_targets
from .core import Pose, fit_normalization
from .errors import ConfigurationError, DataError, VirtualTargetError
from .flow import CnfModel, SplineConfig
from .predict import GridSpec, PredictionRequest, TargetState, draw_samples, evaluate_pdf_grid, remove_outliers
from .sim import BallisticConfig, SimpleTargetConfig, simulate_ballistic, simulate_deterministic_modes, simulate_simple
from .train import TrainConfig, build_training_points, subsample_points, train

log = logging.getLogger("virtual_targets")

THREADS_ENV = "VT_NUM_THREADS"


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError("must be in (0, 1]")
    return value


def _grid(text: str) -> GridSpec:
    parts = _floats(text)
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("grid is xmin,xmax,ymin,ymax,nx,ny")
    try:
        return GridSpec((parts[0], parts[1]), (parts[2], parts[3]), (int(parts[4]), int(parts[5])))
    except VirtualTargetError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="virtual-targets", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a trajectory dataset")
    p.add_argument("scenario", choices=["simple", "deterministic", "ballistic"])
    p.add_argument("--n", type=int, default=10000, help="number of trajectories")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=100.0, help="seconds")
    p.add_argument("--dt", type=float, default=0.1, help="seconds")
    p.add_argument("--lateral-accel", type=float, default=3.0, help="deterministic scenario turn acceleration")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="fit the conditional flow to a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test-data", type=Path, help="independent dataset for the final test NLL")
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--noise-std", type=float, default=0.01)
    p.add_argument("--subsample-points", type=_fraction, default=1.0, help="fraction of (x, t) rows kept")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--tail-bound", type=float, default=3.0)
    p.add_argument("--checkpoint-every", type=int, default=0, help="also write the current model every N epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", type=Path, required=True)
    p.add_argument("--report", type=Path, help="per-epoch CSV (default: <out-model>.report.csv)")

    def prediction_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--targets", type=Path, help="JSON list of {position, velocity, psi}; default one target at the frame origin")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--noise-std", type=float, help="outlier bound is 1 + 3 * this (default: training value)")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--svg", type=Path, help="optional rendering of the same data")

    p = sub.add_parser("sample", help="draw future positions for each target")
    prediction_args(p)
    p.add_argument("--times", type=_floats, required=True, help="comma-separated seconds")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--share-samples", action="store_true", help="targets with equal psi reuse one sample set")
    p.add_argument("--independent-latent", action="store_true", help="new latent per time step (not the default method)")

    p = sub.add_parser("density", help="evaluate the position density on a grid (2D models)")
    prediction_args(p)
    p.add_argument("--t", type=float, required=True, help="seconds")
    p.add_argument("--target-index", type=int, default=0)
    p.add_argument("--grid", type=_grid, default=GridSpec((-1.2, 1.2), (-1.2, 1.2), (200, 200)))
    p.add_argument("--units", choices=["normalized", "world"], default="normalized")

    p = sub.add_parser("cluster", help="virtual-target trajectories via time-series k-means")
    prediction_args(p)
    p.add_argument("--n-virtual", type=int, required=True)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--steps", type=int, default=10, help="time steps k*T/steps, k = 1..steps")
    p.add_argument("--times", type=_floats, help="explicit seconds instead of --steps")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--share-samples", action="store_true")
    return parser


# -- helpers ----------------------------------------------------------------------


def _hardware() -> str:
    return f"{platform.machine()} {platform.processor() or 'unknown-cpu'} x{os.cpu_count()} / {platform.system()} {platform.release()} / numpy {np.__version__}"


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, GridSpec):
        return {"x_range": list(value.x_range), "y_range": list(value.y_range), "resolution": list(value.resolution)}
    return value


def write_manifest(out: Path, args: argparse.Namespace, artifacts: Sequence[Path], started: float, extra: dict | None = None) -> Path:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if not k.startswith("_")}
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    manifest = {
        "subcommand": args.command,
        "config": config,
        "config_sha256": digest,
        "seeds": {"seed": getattr(args, "seed", None)},
        "wall_time_s": time.perf_counter() - started,
        "artifacts": {str(p): io.sha256_file(p) for p in artifacts},
        "hardware": _hardware(),
        **(extra or {}),
    }
    path = out.with_name(out.name + ".manifest.json")
    io.dump_json(manifest, path)
    return path


def _load_targets(args: argparse.Namespace, model: CnfModel) -> list[TargetState]:
    if args.targets is not None:
        return io.read_targets(args.targets, model.d)
    if model.n_psi:
        raise ConfigurationError("--targets is required for models with dynamics parameters")
    origin = np.zeros(model.d) if model.frame_origin is None else model.frame_origin
    forward = [0.0, 1.0] if model.d == 2 else [1.0, 0.0, 0.0]
    return [TargetState(Pose.from_velocity(origin, forward))]


def _noise_std(args: argparse.Namespace, training: dict) -> float:
    return args.noise_std if args.noise_std is not None else float(training.get("noise_std", 0.01))


# -- subcommands ----------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> list[Path]:
    if args.n < 1:
        raise ConfigurationError("--n must be at least 1")
    if args.scenario == "ballistic":
        dataset = simulate_ballistic(BallisticConfig(duration=args.duration, dt=args.dt, rng_seed=args.seed), args.n)
    else:
        config = SimpleTargetConfig(duration=args.duration, dt=args.dt, rng_seed=args.seed)
        if args.scenario == "simple":
            dataset = simulate_simple(config, args.n)
        else:
            dataset = simulate_deterministic_modes(config, args.n, args.lateral_accel)
    io.write_dataset(args.out, dataset, args.seed)
    log.info("wrote %d trajectories to %s", len(dataset), args.out)
    return [args.out, io.sidecar_path(args.out)]


def cmd_train(args: argparse.Namespace) -> list[Path]:
    dataset = io.read_dataset(args.data)
    config = TrainConfig(args.epochs, args.batch_size, args.lr, args.train_fraction, args.noise_std, args.seed)
    norm = fit_normalization(dataset)
    points = subsample_points(build_training_points(dataset, norm), args.subsample_points, args.seed)
    test_points = None
    if args.test_data is not None:
        test = io.read_dataset(args.test_data)
        test_points = subsample_points(build_training_points(test, norm), args.subsample_points, args.seed + 1)
    origin = dataset.trajectories[0].positions[0]
    model = CnfModel.create(
        dataset.d, dataset.n_psi, args.layers, SplineConfig(args.bins, args.tail_bound), seed=args.seed, norm=norm, frame_origin=origin
    )
    training = {"noise_std": args.noise_std, "epochs": args.epochs, "subsample_points": args.subsample_points}

    def on_epoch(epoch, current, report):
        if args.checkpoint_every and epoch % args.checkpoint_every == 0:
            io.write_checkpoint(args.out_model, current, {**training, "epoch": epoch})

    best, report = train(points, config, model, test_points, on_epoch)
    io.write_checkpoint(args.out_model, best, {**training, "best_epoch": report.best_epoch})
    report_path = args.report or args.out_model.with_name(args.out_model.name + ".report.csv")
    io.write_report(report_path, report)
    if report.test_nll is not None:
        log.info("test NLL %.4f", report.test_nll)
    args._extra = {"test_nll": report.test_nll, "best_epoch": report.best_epoch, "n_points": len(points)}
    return [args.out_model, report_path]


def cmd_sample(args: argparse.Namespace) -> list[Path]:
    model, training = io.read_checkpoint(args.model)
    targets = _load_targets(args, model)
    request = PredictionRequest(tuple(targets), np.array(args.times), args.n_samples, args.seed, args.share_samples, args.independent_latent)
    tensor = draw_samples(model, request, io.sha256_file(args.model))
    tensor, removed = remove_outliers(tensor, _noise_std(args, training))
    norm = _model_norm(model)
    io.write_samples(args.out, tensor, norm)
    artifacts = [args.out]
    if args.svg:
        from .plots import samples_svg

        samples_svg(args.svg, norm.denormalize_position(tensor.samples), tensor.point_valid, tensor.times)
        artifacts.append(args.svg)
    args._extra = {"outliers_removed": removed}
    return artifacts


def cmd_density(args: argparse.Namespace) -> list[Path]:
    model, _ = io.read_checkpoint(args.model)
    targets = _load_targets(args, model)
    if not 0 <= args.target_index < len(targets):
        raise ConfigurationError(f"--target-index {args.target_index} out of range for {len(targets)} targets")
    target = targets[args.target_index]
    grid = evaluate_pdf_grid(model, args.t, target.psi if model.n_psi else None, target.pose, args.grid, args.units)
    io.write_density(args.out, grid)
    artifacts = [args.out]
    if args.svg:
        from .plots import density_svg

        density_svg(args.svg, grid.xs, grid.ys, grid.values, grid.units)
        artifacts.append(args.svg)
    args._extra = {"integral": grid.integral()}
    return artifacts


def cmd_cluster(args: argparse.Namespace) -> list[Path]:
    model, training = io.read_checkpoint(args.model)
    targets = _load_targets(args, model)
    norm = _model_norm(model)
    if args.times is not None:
        times = np.array(args.times)
    else:
        if args.steps < 1:
            raise ConfigurationError("--steps must be at least 1")
        t0, t1 = norm.time_range
        times = t0 + (t1 - t0) * np.arange(1, args.steps + 1) / args.steps
    request = PredictionRequest(tuple(targets), times, args.n_samples, args.seed, args.share_samples)
    tensor, removed = remove_outliers(draw_samples(model, request, io.sha256_file(args.model)), _noise_std(args, training))
    config = ClusterConfig(args.n_virtual, args.tolerance, args.max_iter, args.seed, args.restarts)
    vts, flat, result = virtual_targets(tensor, norm, config)
    io.write_virtual_targets(args.out, vts)
    members = [np.bincount(flat.target_ids[result.labels == c], minlength=len(targets)).tolist() for c in range(len(vts))]
    summary = {
        "n_virtual": len(vts),
        "inertia": vts.inertia,
        "counts": vts.counts.tolist(),
        "members_per_target": members,
        "iterations": result.n_iter,
        "outliers_removed": removed,
        "usable_trajectories": len(flat),
        "times": times.tolist(),
    }
    summary_path = args.out.with_name(args.out.name + ".json")
    io.dump_json(summary, summary_path)
    artifacts = [args.out, summary_path]
    if args.svg:
        from .plots import clusters_svg

        paths = norm.denormalize_position(flat.y.reshape(len(flat), len(times), model.d))
        virtual = np.array([t.positions for t in vts.trajectories])
        clusters_svg(args.svg, paths, virtual)
        artifacts.append(args.svg)
    return artifacts


def _model_norm(model: CnfModel):
    if model.norm is None:
        raise DataError("checkpoint has no normalization parameters")
    return model.norm


HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "sample": cmd_sample,
    "density": cmd_density,
    "cluster": cmd_cluster,
}


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(value))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        _limit_threads()
        artifacts = HANDLERS[args.command](args)
        out = args.out_model if args.command == "train" else args.out
        write_manifest(out, args, artifacts, started, getattr(args, "_extra", None))
    except VirtualTargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
