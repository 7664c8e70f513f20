import itertools

import numpy as np
import pytest

from virtual_targets.cluster import (
    ClusterConfig,
    flatten,
    kmeans,
    unflatten,
    unflatten_and_renormalize,
    virtual_targets,
)
from virtual_targets.core import NormalizationParams, Pose
from virtual_targets.errors import ConfigurationError, ContractViolation
from virtual_targets.flow import CnfModel
from virtual_targets.predict import PredictionRequest, SampleTensor, TargetState, draw_samples


def _tensor(samples, valid=None):
    n_r, n_s, n_t, _ = samples.shape
    valid = np.ones((n_r, n_s, n_t), dtype=bool) if valid is None else valid
    return SampleTensor(samples, samples, np.arange(1.0, n_t + 1), valid, seed=0)


def brute_force_inertia(y):
    best = np.inf
    n = len(y)
    for mask in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + mask)
        if labels.all() or not labels.any():
            continue
        cost = sum(((y[labels == c] - y[labels == c].mean(axis=0)) ** 2).sum() for c in (0, 1))
        best = min(best, cost)
    return best


class TestFlatten:
    def test_three_targets(self):
        samples = np.random.default_rng(0).normal(size=(3, 200, 10, 2))
        flat = flatten(_tensor(samples))
        assert flat.y.shape == (600, 20)
        np.testing.assert_array_equal(flat.target_ids, np.repeat([0, 1, 2], 200))
        np.testing.assert_array_equal(flat.sample_ids, np.tile(np.arange(200), 3))

    def test_layout(self):
        samples = np.random.default_rng(1).normal(size=(2, 5, 10, 2))
        flat = flatten(_tensor(samples))
        row = 5 + 3  # target 1, sample 3
        for k in range(10):
            np.testing.assert_array_equal(flat.y[row, 2 * k : 2 * k + 2], samples[1, 3, k])

    def test_drops_incomplete_trajectories(self):
        samples = np.random.default_rng(2).normal(size=(2, 4, 3, 2))
        valid = np.ones((2, 4, 3), dtype=bool)
        valid[0, 1, 2] = False
        valid[1, 3, 0] = False
        flat = flatten(_tensor(samples, valid))
        assert len(flat) == 6
        assert list(zip(flat.target_ids, flat.sample_ids)) == [(0, 0), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2)]


class TestKMeans:
    def test_toy_example(self):
        result = kmeans(np.array([[0.0], [0.1], [1.0], [1.1]]), ClusterConfig(2))
        np.testing.assert_allclose(np.sort(result.means[:, 0]), [0.05, 1.05], atol=1e-12)
        assert result.inertia == pytest.approx(0.01, abs=1e-12)
        assert brute_force_inertia(np.array([[0.0], [0.1], [1.0], [1.1]])) == pytest.approx(0.01)

    def test_one_cluster_per_point(self):
        y = np.random.default_rng(3).normal(size=(7, 4))
        result = kmeans(y, ClusterConfig(7))
        assert result.inertia == 0.0
        np.testing.assert_array_equal(np.sort(result.counts), np.ones(7))

    def test_single_cluster_is_centroid(self):
        y = np.random.default_rng(4).normal(size=(50, 6))
        result = kmeans(y, ClusterConfig(1))
        np.testing.assert_allclose(result.means[0], y.mean(axis=0), atol=1e-14)
        assert result.inertia == pytest.approx(((y - y.mean(axis=0)) ** 2).sum())

    def test_too_few_points(self):
        with pytest.raises(ConfigurationError):
            kmeans(np.zeros((2, 3)), ClusterConfig(3))

    @pytest.mark.parametrize("kwargs", [{"n_virtual": 0}, {"n_virtual": 2, "tolerance": 0.0}, {"n_virtual": 2, "restarts": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigurationError):
            ClusterConfig(**kwargs)

    def test_non_finite_rejected(self):
        with pytest.raises(ContractViolation):
            kmeans(np.array([[0.0], [np.nan], [1.0]]), ClusterConfig(2))

    @pytest.mark.parametrize("seed", range(10))
    def test_history_non_increasing_and_partition(self, seed):
        rng = np.random.default_rng(seed)
        y = np.concatenate([rng.normal(c, 1.0, size=(40, 5)) for c in (-2, 0, 3)])
        result = kmeans(y, ClusterConfig(4, seed=seed, restarts=3))
        assert all(b <= a * (1 + 1e-12) for a, b in zip(result.history, result.history[1:]))
        assert result.inertia <= result.history[-1] * (1 + 1e-12)
        assert result.labels.shape == (120,) and set(result.labels) == set(range(4))
        assert result.counts.sum() == 120 and np.all(result.counts > 0)
        # labels are nearest-mean assignments up to ties
        d2 = ((y[:, None] - result.means[None]) ** 2).sum(-1)
        assert np.all(d2[np.arange(120), result.labels] <= d2.min(axis=1) + 1e-9) or result.n_iter == 300

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(3, 9))
        y = rng.normal(size=(n, int(rng.integers(1, 4))))
        result = kmeans(y, ClusterConfig(2, restarts=20, seed=seed))
        assert result.inertia == pytest.approx(brute_force_inertia(y), rel=1e-10, abs=1e-12)

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(7)
        samples = rng.normal(size=(1, 300, 5, 2)) + np.array([3.0, 0.0]) * rng.choice([-1, 1], (1, 300, 1, 1))
        flip = np.array([-1.0, 1.0])
        a = kmeans(flatten(_tensor(samples)).y, ClusterConfig(2))
        b = kmeans(flatten(_tensor(samples * flip)).y, ClusterConfig(2))
        mirrored = (unflatten(b.means, 2) * flip).reshape(2, -1)
        order_a = np.lexsort(a.means.T[::-1])
        order_b = np.lexsort(mirrored.T[::-1])
        np.testing.assert_allclose(a.means[order_a], mirrored[order_b], atol=1e-12)
        assert a.inertia == pytest.approx(b.inertia, rel=1e-12)

    def test_deterministic(self):
        y = np.random.default_rng(8).normal(size=(200, 6))
        a, b = kmeans(y, ClusterConfig(5, seed=3)), kmeans(y, ClusterConfig(5, seed=3))
        assert a.means.tobytes() == b.means.tobytes() and np.array_equal(a.labels, b.labels)

    def test_duplicate_points_fill_empty_clusters(self):
        y = np.array([[0.0], [0.0], [0.0], [5.0]])
        result = kmeans(y, ClusterConfig(3, restarts=1))
        assert np.all(result.counts > 0)


class TestUnflatten:
    def test_round_trip(self):
        traj = np.random.default_rng(9).normal(size=(4, 10, 3))
        np.testing.assert_array_equal(unflatten(traj.reshape(4, 30), 3), traj)

    def test_bad_length(self):
        with pytest.raises(ContractViolation):
            unflatten(np.zeros((2, 7)), 2)

    def test_zero_maps_to_range_centre(self):
        norm = NormalizationParams(np.array([100.0, -50.0, 50.0]), np.array([10.0, 20.0, 50.0]), d=2)
        vts = unflatten_and_renormalize(np.zeros((1, 6)), np.array([1.0, 2.0, 3.0]), norm, counts=[4], inertia=0.5)
        np.testing.assert_array_equal(vts.trajectories[0].positions, np.tile([100.0, -50.0], (3, 1)))
        np.testing.assert_array_equal(vts.trajectories[0].times, [1.0, 2.0, 3.0])
        assert vts.counts.tolist() == [4] and vts.inertia == 0.5

    def test_time_mismatch(self):
        norm = NormalizationParams(np.zeros(3), np.ones(3), d=2)
        with pytest.raises(ContractViolation):
            unflatten_and_renormalize(np.zeros((1, 6)), np.array([1.0, 2.0]), norm)


def test_pipeline_on_sampled_tensor():
    norm = NormalizationParams(np.array([0.0, 10000.0, 50.0]), np.array([20000.0, 10000.0, 50.0]), d=2)
    model = CnfModel.create(2, 0, seed=2, output_scale=0.05, norm=norm, frame_origin=np.zeros(2))
    targets = (TargetState(Pose(np.zeros(2))), TargetState(Pose(np.array([5000.0, 0.0]), 0.3)))
    tensor = draw_samples(model, PredictionRequest(targets, np.linspace(10, 100, 10), 100, seed=1))
    vts, flat, result = virtual_targets(tensor, norm, ClusterConfig(3))
    assert len(vts) == 3 and len(flat) == 200 and vts.counts.sum() == 200
    for traj, mean in zip(vts.trajectories, unflatten(result.means, 2)):
        np.testing.assert_allclose(traj.positions, norm.denormalize_position(mean))
        np.testing.assert_array_equal(traj.times, tensor.times)
