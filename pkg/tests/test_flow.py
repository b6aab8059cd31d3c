"""
Tests for rational-quadratic splines and the coordinate flow
"""

import math
import os
import shutil
import tempfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from app.errors import DataError, TooFewSamplesError
from app.nn import diffnet as dn
from app.nn.diffnet import TrainConfig
from app.nn.flow import (Direction, FlowArch, FlowModel, RQSpline, coords_to_latent, flow_log_likelihood,
                         flow_sample, latent_to_coords, latent_to_coords_logdet, load_flow, mean_nll, rq_spline_apply,
                         save_flow, train_flow)


def random_spline(seed: int, n_bins: int = 6, tail_bound: float = 3.0) -> RQSpline:
    rng = np.random.default_rng(seed)
    return RQSpline(rng.normal(size=(1, n_bins)), rng.normal(size=(1, n_bins)),
                    rng.normal(size=(1, n_bins - 1)), tail_bound)


def perturbed_flow(seed: int, mean=(0.0, 0.0), std=(1.0, 1.0)) -> FlowModel:
    model = FlowModel(FlowArch(n_layers=4, n_bins=6, tail_bound=3.0, hidden=[8]), np.array(mean), np.array(std), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name in model.store.names():
        value = model.store.params[name]
        model.store.set(name, value + rng.normal(0.0, 0.3, size=value.shape))
    return model


def two_clusters(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    centres = np.array([[7.62, 45.03], [7.70, 45.09]])
    return centres[rng.integers(0, 2, n)] + rng.normal(0.0, 0.01, size=(n, 2))


class TestSpline:
    """Test cases for a single spline batch"""

    def test_identity_spline(self):
        """Test zero parameters give the identity map"""
        x = np.linspace(-5.0, 5.0, 41)
        y, logabsdet = rq_spline_apply(x, RQSpline.identity(8))
        assert np.allclose(y, x, atol=1e-12)
        assert np.allclose(logabsdet, 0.0, atol=1e-12)

    def test_inverse_undoes_forward(self):
        """Test forward then inverse returns the input"""
        spline = random_spline(0)
        x = np.linspace(-3.5, 3.5, 101)
        y, forward_logdet = rq_spline_apply(x, spline, Direction.FORWARD)
        back, inverse_logdet = rq_spline_apply(y, spline, Direction.INVERSE)
        assert np.allclose(back, x, atol=1e-10)
        assert np.allclose(forward_logdet + inverse_logdet, 0.0, atol=1e-10)

    def test_identity_outside_tails(self):
        """Test the map outside [-T, T]"""
        y, logabsdet = rq_spline_apply(np.array([-7.0, 9.0]), random_spline(1))
        assert y.tolist() == [-7.0, 9.0]
        assert logabsdet.tolist() == [0.0, 0.0]

    def test_endpoints_are_fixed(self):
        """Test the spline maps [-T, T] onto itself"""
        y, _ = rq_spline_apply(np.array([-3.0, 3.0]), random_spline(2))
        assert np.allclose(y, [-3.0, 3.0], atol=1e-12)

    def test_logdet_matches_slope(self):
        """Test the log-derivative against finite differences"""
        spline = random_spline(3)
        x = np.linspace(-2.9, 2.9, 23)
        h = 1e-6
        up, _ = rq_spline_apply(x + h, spline)
        down, _ = rq_spline_apply(x - h, spline)
        _, logabsdet = rq_spline_apply(x, spline)
        assert np.allclose(logabsdet, np.log((up - down) / (2 * h)), atol=1e-6)

    @given(st.integers(min_value=0, max_value=10_000))
    def test_monotone(self, seed):
        """Test every spline is strictly increasing"""
        y, logabsdet = rq_spline_apply(np.linspace(-3.0, 3.0, 200), random_spline(seed))
        assert np.all(np.diff(y) > 0)
        assert np.all(np.isfinite(logabsdet))


class TestFlowModel:
    """Test cases for the coupling-layer flow"""

    def setup_method(self):
        """Set up test with temporary directory"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Clean up temporary files"""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_fresh_flow_is_standardization(self):
        """Test a new flow only standardizes"""
        model = FlowModel(FlowArch(n_layers=2, hidden=[4]), np.array([1.0, 2.0]), np.array([2.0, 4.0]))
        coords = np.array([[1.0, 2.0], [3.0, 6.0]])
        latent, logdet = coords_to_latent(model, coords)
        assert np.allclose(latent, [[0.0, 0.0], [1.0, 1.0]], atol=1e-12)
        assert np.allclose(logdet, -math.log(8.0), atol=1e-12)

    def test_density_at_mean(self):
        """Test the standard-normal base density"""
        model = FlowModel(FlowArch(n_layers=2, hidden=[4]), np.zeros(2), np.ones(2))
        assert flow_log_likelihood(model, np.zeros((1, 2)))[0] == pytest.approx(math.log(1.0 / (2.0 * math.pi)))

    def test_round_trip(self):
        """Test the inverse map on a non-trivial flow"""
        model = perturbed_flow(0, mean=(7.6, 45.0), std=(0.05, 0.04))
        coords = two_clusters(300, 1)
        latent, _ = coords_to_latent(model, coords)
        assert np.allclose(latent_to_coords(model, latent), coords, atol=1e-9)

    def test_logdet_matches_jacobian(self):
        """Test the total log-determinant against a numerical Jacobian"""
        model = perturbed_flow(4, std=(2.0, 0.5))
        points = np.random.default_rng(2).normal(size=(5, 2))
        _, logdet = coords_to_latent(model, points)
        h = 1e-6
        for point, expected in zip(points, logdet):
            jacobian = np.zeros((2, 2))
            for j in range(2):
                step = np.zeros(2)
                step[j] = h
                up, _ = coords_to_latent(model, (point + step)[None, :])
                down, _ = coords_to_latent(model, (point - step)[None, :])
                jacobian[:, j] = (up[0] - down[0]) / (2 * h)
            assert math.log(abs(np.linalg.det(jacobian))) == pytest.approx(expected, abs=1e-5)

    def test_wide_round_trip_and_inverse_logdet(self):
        """Test bijectivity over a wide box and that the inverse logdet negates the forward one"""
        model = FlowModel(FlowArch(), np.zeros(2), np.array([2.5, 2.5]), seed=11)
        rng = np.random.default_rng(12)
        for name in model.store.names():
            value = model.store.params[name]
            model.store.set(name, value + rng.normal(0.0, 0.1, size=value.shape))
        coords = rng.uniform(-10.0, 10.0, size=(10_000, 2))

        latent, forward_logdet = coords_to_latent(model, coords)
        back, inverse_logdet = latent_to_coords_logdet(model, latent)
        assert np.max(np.abs(back - coords)) < 1e-8
        assert np.max(np.abs(forward_logdet + inverse_logdet)) < 1e-8
        assert np.array_equal(latent_to_coords(model, latent), back)

    def test_parameter_gradients_match_finite_differences(self):
        """Test the NLL gradient for conditioner weights against central differences"""
        model = perturbed_flow(6, mean=(0.5, -0.5), std=(1.5, 0.8))
        coords = np.random.default_rng(7).normal(size=(40, 2))
        model.store.zero_grads()
        dn.backpropagate(mean_nll(model, coords), 1.0)

        def loss() -> float:
            return float(-np.mean(flow_log_likelihood(model, coords)))

        h = 1e-6
        checked = 0
        for name in ["flow.layer0.w0", "flow.layer1.b0", "flow.layer2.w1", "flow.layer3.b1"]:
            analytic = model.store.grads[name]
            original = model.store.params[name].copy()
            for idx in list(np.ndindex(original.shape))[:4]:
                up, down = original.copy(), original.copy()
                up[idx] += h
                down[idx] -= h
                model.store.set(name, up)
                loss_up = loss()
                model.store.set(name, down)
                loss_down = loss()
                model.store.set(name, original)
                assert analytic[idx] == pytest.approx((loss_up - loss_down) / (2 * h), rel=1e-4, abs=1e-6)
                checked += 1
        assert checked == 16

    def test_non_finite_input(self):
        """Test NaN coordinates"""
        model = FlowModel(FlowArch(n_layers=1, hidden=[4]), np.zeros(2), np.ones(2))
        with pytest.raises(DataError):
            coords_to_latent(model, np.array([[np.nan, 0.0]]))

    def test_too_few_rows(self):
        """Test training on 99 rows"""
        with pytest.raises(TooFewSamplesError):
            train_flow(two_clusters(99, 0), TrainConfig(epochs=1))

    def test_train_sample_and_reload(self):
        """Test a short training run, sampling and persistence"""
        arch = FlowArch(n_layers=2, n_bins=4, hidden=[8])
        model = train_flow(two_clusters(200, 3), TrainConfig(epochs=3, batch_size=64, seed=7), arch)
        assert len(model.history) == 3
        assert all(np.isfinite(model.history))

        samples = flow_sample(model, 50, seed=1)
        assert samples.shape == (50, 2)
        assert np.array_equal(samples, flow_sample(model, 50, seed=1))
        assert flow_sample(model, 0, seed=1).shape == (0, 2)

        path = os.path.join(self.temp_dir, "flow.json")
        save_flow(model, path)
        loaded = load_flow(path)
        assert loaded.history == model.history
        assert np.array_equal(flow_sample(loaded, 50, seed=1), samples)

    def test_training_is_deterministic(self):
        """Test the same seed reproduces the trained flow"""
        arch = FlowArch(n_layers=2, n_bins=4, hidden=[8])
        coords = two_clusters(150, 5)
        a = train_flow(coords, TrainConfig(epochs=2, batch_size=50, seed=3), arch)
        b = train_flow(coords, TrainConfig(epochs=2, batch_size=50, seed=3), arch)
        assert a.history == b.history

    @pytest.mark.slow
    def test_gaussian_entropy(self):
        """Test the fitted NLL of a standard normal approaches its entropy"""
        rng = np.random.default_rng(0)
        train, held_out = rng.normal(size=(5000, 2)), rng.normal(size=(5000, 2))
        model = train_flow(train, TrainConfig(epochs=5, seed=0), FlowArch(n_layers=4, hidden=[32, 32]))
        nll = -np.mean(flow_log_likelihood(model, held_out))
        assert nll == pytest.approx(math.log(2.0 * math.pi * math.e), abs=0.05)


if __name__ == "__main__":
    pytest.main([__file__])
