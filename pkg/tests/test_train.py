import numpy as np
import pytest

from virtual_targets.autodiff import AdamState, adam_step
from virtual_targets.core import fit_normalization
from virtual_targets.errors import ConfigurationError, ContractViolation, TrainingError
from virtual_targets.flow import CnfModel
from virtual_targets.sim import BallisticConfig, SimpleTargetConfig, simulate_ballistic, simulate_simple
from virtual_targets.train import (
    TrainConfig,
    TrainingPoints,
    build_training_points,
    evaluate_nll,
    split_indices,
    subsample_points,
    train,
)


@pytest.fixture(scope="module")
def simple10():
    ds = simulate_simple(SimpleTargetConfig(rng_seed=1), 10)
    return ds, fit_normalization(ds)


def test_defaults_match_training_tables():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.train_fraction, cfg.noise_std) == (1000, 1000, 0.003, 0.8, 0.01)


@pytest.mark.parametrize("kwargs", [{"train_fraction": 1.0}, {"train_fraction": 0.0}, {"noise_std": -0.1}, {"batch_size": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


class TestTrainingPoints:
    def test_count(self, simple10):
        ds, norm = simple10
        assert len(build_training_points(ds, norm)) == 10 * 1001

    def test_start_time_is_minus_one(self, simple10):
        pts = build_training_points(*simple10)
        assert np.all(pts.cond[::1001, 0] == -1.0)

    def test_channels_in_unit_box(self, simple10):
        pts = build_training_points(*simple10)
        assert np.abs(pts.x).max() <= 1 + 1e-12 and np.abs(pts.cond).max() <= 1 + 1e-12

    def test_psi_channel(self):
        ds = simulate_ballistic(BallisticConfig(rng_seed=0), 4)
        norm = fit_normalization(ds)
        pts = build_training_points(ds, norm)
        assert pts.x.shape == (4 * 1001, 3) and pts.cond.shape == (4 * 1001, 2)
        np.testing.assert_allclose(pts.cond[::1001, 1], norm.normalize_psi(ds.params)[:, 0])

    def test_norm_mismatch(self, simple10):
        ballistic = simulate_ballistic(BallisticConfig(), 1)
        with pytest.raises(ContractViolation):
            build_training_points(ballistic, simple10[1])

    def test_subsample(self, simple10):
        pts = build_training_points(*simple10)
        sub = subsample_points(pts, 0.1, seed=3)
        assert len(sub) == 1001
        again = subsample_points(pts, 0.1, seed=3)
        np.testing.assert_array_equal(sub.x, again.x)
        assert subsample_points(pts, 1.0, 0) is pts
        with pytest.raises(ConfigurationError):
            subsample_points(pts, 0.0, 0)


def test_split_is_disjoint_and_deterministic():
    tr, va = split_indices(1000, 0.8, seed=5)
    assert len(tr) == 800 and len(va) == 200
    assert not set(tr) & set(va) and len(set(tr) | set(va)) == 1000
    tr2, va2 = split_indices(1000, 0.8, seed=5)
    np.testing.assert_array_equal(tr, tr2)
    tr3, _ = split_indices(1000, 0.8, seed=6)
    assert not np.array_equal(tr, tr3)


def test_one_small_step_descends(simple10):
    pts = build_training_points(*simple10).take(np.arange(0, 10010, 10))
    model = CnfModel.create(2, 0, seed=0)
    params = model.parameter_tensors()
    loss = model.nll(pts.x, pts.cond, params)
    loss.backward()
    adam_step([p.data for p in params], [p.grad for p in params], AdamState(lr=1e-4))
    assert float(model.nll(pts.x, pts.cond).data) < float(loss.data)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noise_free_two_points_decreases(seed):
    # without noise the optimum is a point mass; at lr 3e-3 Adam overshoots once the
    # density gets sharp, so the small-step regime is used to observe plain descent
    pts = TrainingPoints(np.array([[0.2, -0.4], [0.5, 0.1]]), np.array([[0.0], [0.5]]))
    cfg = TrainConfig(epochs=50, noise_std=0.0, seed=seed, lr=3e-4)
    _, report = train(pts, cfg, CnfModel.create(2, 0, seed=seed))
    assert np.all(np.diff(report.train_nll) < 0)


def test_reproducible(simple10):
    pts = subsample_points(build_training_points(*simple10), 0.2, 0)
    cfg = TrainConfig(epochs=2, batch_size=500, seed=4)
    m1, r1 = train(pts, cfg, CnfModel.create(2, 0, seed=4))
    m2, r2 = train(pts, cfg, CnfModel.create(2, 0, seed=4))
    assert r1.train_nll == r2.train_nll and r1.val_nll == r2.val_nll
    assert all(np.array_equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))


def test_report_and_best_model(simple10):
    pts = subsample_points(build_training_points(*simple10), 0.2, 0)
    init = CnfModel.create(2, 0, seed=2)
    before = [a.copy() for a in init.parameters()]
    best, report = train(pts, TrainConfig(epochs=3, batch_size=500), init, test_points=pts)
    assert report.epochs_run == 3 and len(report.val_nll) == 3
    assert report.val_nll[report.best_epoch - 1] == min(report.val_nll)
    _, val = split_indices(len(pts), 0.8, 0)
    assert evaluate_nll(best, pts.take(val)) == pytest.approx(min(report.val_nll), abs=1e-12)
    assert report.test_nll == pytest.approx(evaluate_nll(best, pts))
    # the initial model is left untouched
    assert all(np.array_equal(a, b) for a, b in zip(before, init.parameters()))


def test_zero_epochs_returns_initial_model(simple10):
    pts = build_training_points(*simple10)
    init = CnfModel.create(2, 0, seed=2)
    best, report = train(pts, TrainConfig(epochs=0), init)
    assert report.epochs_run == 0 and report.best_epoch == 0
    assert all(np.array_equal(a, b) for a, b in zip(best.parameters(), init.parameters()))


def test_nan_loss_reports_context(simple10):
    pts = subsample_points(build_training_points(*simple10), 0.1, 0)
    model = CnfModel.create(2, 0, seed=0)
    model.layers[0].nets[0].biases[-1][0] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(pts, TrainConfig(epochs=1), model)


def test_mismatched_model(simple10):
    with pytest.raises(ContractViolation):
        train(build_training_points(*simple10), TrainConfig(epochs=1), CnfModel.create(3, 1))


def test_trained_ballistic_model_uses_psi():
    ds = simulate_ballistic(BallisticConfig(rng_seed=3), 20)
    norm = fit_normalization(ds)
    pts = subsample_points(build_training_points(ds, norm), 0.1, 0)
    model, _ = train(pts, TrainConfig(epochs=2, seed=0), CnfModel.create(3, 1, seed=0, norm=norm))
    x = np.array([[0.1, 0.0, -0.2]])
    z_low, _ = model.forward(x, 0.5, [-0.8])
    z_high, _ = model.forward(x, 0.5, [0.8])
    assert not np.allclose(z_low, z_high)
