"""
Tests for the three-term VAE
"""

import os
import shutil
import tempfile

import numpy as np
import pytest

from app.core.dataset import ColumnKind, ColumnSpec, GeoTable, encode
from app.errors import ConfigError, ShapeError, TooFewSamplesError
from app.nn.diffnet import TrainConfig
from app.nn.vae import (LossWeights, VaeArch, VaeModel, load_vae, save_vae, train_vae, vae_loss,
                        vae_sample)


def small_model(matrix, seed: int = 0) -> VaeModel:
    return VaeModel(matrix.layout, matrix.coordinate_indices(), 2, [4], LossWeights(), seed=seed)


def zero_params(model: VaeModel):
    for name in model.store.names():
        model.store.set(name, np.zeros_like(model.store.params[name]))


def factor_table(n: int, seed: int, geography_drives_features: bool) -> GeoTable:
    """Coordinates plus four numerics driven by two latent factors"""
    rng = np.random.default_rng(seed)
    lon, lat = rng.normal(size=n), rng.normal(size=n)
    f1, f2 = (lon, lat) if geography_drives_features else (rng.normal(size=n), rng.normal(size=n))
    noise = rng.normal(0.0, 0.05, size=(4, n))
    schema = [ColumnSpec("lon", ColumnKind.LONGITUDE), ColumnSpec("lat", ColumnKind.LATITUDE)]
    schema += [ColumnSpec(f"c{i}", ColumnKind.NUMERIC) for i in range(4)]
    mixes = [f1 + f2, f1, f2, f2 - 0.5 * f1] if geography_drives_features else [f1, f1, f2, f2]
    columns = {"lon": lon, "lat": lat}
    columns.update({f"c{i}": mix + noise[i] for i, mix in enumerate(mixes)})
    return GeoTable.from_columns(schema, columns)


class TestLossWeights:
    """Test cases for loss-weight ordering"""

    def test_default_order(self):
        """Test the defaults"""
        weights = LossWeights()
        assert (weights.alpha_geo, weights.alpha_r, weights.alpha_kl) == (10.0, 1.0, 0.1)

    def test_order_enforced(self):
        """Test geography must outweigh the other terms"""
        with pytest.raises(ConfigError):
            LossWeights(alpha_geo=1.0, alpha_r=2.0, alpha_kl=0.1)
        with pytest.raises(ConfigError):
            LossWeights(alpha_kl=0.0)

    def test_latent_dim(self):
        """Test latent size resolution"""
        assert VaeArch().resolve_latent_dim(9) == 3
        assert VaeArch().resolve_latent_dim(4) == 2
        with pytest.raises(ConfigError):
            VaeArch(latent_dim=9).resolve_latent_dim(9)


class TestVaeLoss:
    """Test cases for the loss terms"""

    def test_zero_network_on_zero_batch(self, mixed_table):
        """Test all terms vanish for a zero network at the origin"""
        matrix = encode(mixed_table)
        model = small_model(matrix)
        zero_params(model)
        breakdown = vae_loss(model, np.zeros((5, matrix.width)), seed=0)
        assert (breakdown.l_geo, breakdown.l_r, breakdown.l_kl, breakdown.total) == (0.0, 0.0, 0.0, 0.0)

    def test_kl_of_unit_mean_shift(self, mixed_table):
        """Test KL(N(e1, I) || N(0, I)) = 0.5"""
        matrix = encode(mixed_table)
        model = small_model(matrix)
        zero_params(model)
        bias = np.zeros(4)
        bias[0] = 1.0
        model.store.set(model.encoder.bias_name(model.encoder.n_layers - 1), bias)
        breakdown = vae_loss(model, np.zeros((3, matrix.width)), seed=0)
        assert breakdown.l_kl == pytest.approx(0.5)
        assert breakdown.total == pytest.approx(0.05)

    def test_reconstruction_split(self, mixed_table):
        """Test coordinate columns land in the geographic term only"""
        matrix = encode(mixed_table)
        model = small_model(matrix)
        zero_params(model)
        bias = np.zeros(matrix.width)
        bias[0], bias[1], bias[4] = 1.0, 2.0, 3.0
        model.store.set(model.decoder.bias_name(model.decoder.n_layers - 1), bias)
        breakdown = vae_loss(model, np.zeros((2, matrix.width)), seed=0)
        assert breakdown.l_geo == pytest.approx(5.0)
        assert breakdown.l_r == pytest.approx(9.0)
        assert breakdown.total == pytest.approx(10.0 * 5.0 + 9.0)

    def test_gradient_matches_finite_differences(self, mixed_table):
        """Test analytic gradients of the total loss"""
        matrix = encode(mixed_table)
        model = small_model(matrix, seed=3)
        batch = matrix.values[:8]
        vae_loss(model, batch, seed=[1, 2])

        h = 1e-6
        for name in model.store.names():
            value = model.store.params[name]
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                original = value[idx]
                value[idx] = original + h
                up = vae_loss(model, batch, seed=[1, 2], accumulate_gradients=False).total
                value[idx] = original - h
                down = vae_loss(model, batch, seed=[1, 2], accumulate_gradients=False).total
                value[idx] = original
                numeric[idx] = (up - down) / (2 * h)
            assert np.allclose(model.store.grads[name], numeric, rtol=1e-4, atol=1e-6), name

    def test_batch_width(self, mixed_table):
        """Test a batch with the wrong number of columns"""
        matrix = encode(mixed_table)
        with pytest.raises(ShapeError):
            vae_loss(small_model(matrix), np.zeros((2, 3)), seed=0)


class TestVaeTraining:
    """Test cases for training, sampling and persistence"""

    def setup_method(self):
        """Set up test with temporary directory"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Clean up temporary files"""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_sample_sizes(self, mixed_table):
        """Test empty samples and the decoder bias"""
        matrix = encode(mixed_table)
        model = small_model(matrix)
        assert vae_sample(model, 0, seed=0).shape == (0, matrix.width)
        zero_params(model)
        bias = np.arange(matrix.width, dtype=float)
        model.store.set(model.decoder.bias_name(model.decoder.n_layers - 1), bias)
        assert np.array_equal(vae_sample(model, 4, seed=9), np.tile(bias, (4, 1)))

    def test_too_few_rows(self, mixed_table):
        """Test training on 99 rows"""
        matrix = encode(mixed_table.take(range(99)))
        with pytest.raises(TooFewSamplesError):
            train_vae(matrix, TrainConfig(epochs=1))

    def test_latent_too_large(self, mixed_table):
        """Test a latent size equal to the column count"""
        matrix = encode(mixed_table)
        with pytest.raises(ConfigError):
            train_vae(matrix, TrainConfig(epochs=1), VaeArch(latent_dim=matrix.width))

    def test_train_and_reload(self, mixed_table):
        """Test a short run records its history and reloads exactly"""
        matrix = encode(mixed_table)
        model = train_vae(matrix, TrainConfig(epochs=3, batch_size=64, seed=2), VaeArch(hidden=[16]))
        assert len(model.history) == 3
        assert len(model.term_history) == 3
        for total, terms in zip(model.history, model.term_history):
            assert terms.total == pytest.approx(total)

        path = os.path.join(self.temp_dir, "vae.json")
        save_vae(model, path)
        loaded = load_vae(path)
        assert loaded.history == model.history
        assert np.array_equal(vae_sample(loaded, 20, seed=4), vae_sample(model, 20, seed=4))

    def test_training_lowers_reconstruction_loss(self):
        """Test the non-geographic term falls well below its value at initialization"""
        matrix = encode(factor_table(1000, 0, geography_drives_features=True))
        config = TrainConfig(epochs=60, batch_size=64, learning_rate=5e-3, seed=1)
        untrained = VaeModel(matrix.layout, matrix.coordinate_indices(), 2, [32], LossWeights(), seed=1)
        before = vae_loss(untrained, matrix.values, seed=0, accumulate_gradients=False)

        model = train_vae(matrix, config, VaeArch(hidden=[32]))
        after = vae_loss(model, matrix.values, seed=0, accumulate_gradients=False)
        assert model.term_history[-1].l_r < model.term_history[0].l_r
        assert after.l_r < 0.25 * before.l_r

    @pytest.mark.slow
    def test_geographic_weight_protects_coordinates(self):
        """Test a larger alpha_geo leaves a smaller geographic error, seed for seed"""
        matrix = encode(factor_table(1000, 2, geography_drives_features=False))
        arch = VaeArch(hidden=[32])
        for seed in range(3):
            config = TrainConfig(epochs=60, batch_size=64, learning_rate=5e-3, seed=seed)
            terms = {}
            for alpha_geo in (1.5, 10.0):
                model = train_vae(matrix, config, arch, LossWeights(alpha_geo=alpha_geo))
                terms[alpha_geo] = vae_loss(model, matrix.values, seed=seed, accumulate_gradients=False)
            assert terms[10.0].l_geo < terms[1.5].l_geo, seed


if __name__ == "__main__":
    pytest.main([__file__])
