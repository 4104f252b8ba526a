import numpy as np
import pytest

from avm_lab.autodiff import DiffTensor
from avm_lab.errors import ConfigError, ContractError
from avm_lab.gradcheck import finite_difference_check
from avm_lab.readout import count_readout_parameters, init_readout, readout_forward


def linear_map(height: int = 8, width: int = 16) -> np.ndarray:
    """Single-channel map equal to 0.5 + 0.2 x at every cell center."""
    x = np.linspace(-1.0, 1.0, width)
    return np.broadcast_to(0.5 + 0.2 * x, (height, width))[..., None].copy()


class TestInit:
    def test_ranges(self):
        readout = init_readout(200, 16, seed=0)
        assert np.all(np.abs(readout.mu.values) <= 0.5)
        np.testing.assert_allclose(readout.sigma().values, 0.25, rtol=1e-12)
        assert np.all(np.abs(readout.weight.values) <= 0.25)
        assert readout.bias is None

    def test_seeded(self):
        first, second = init_readout(5, 8, seed=3), init_readout(5, 8, seed=3)
        np.testing.assert_array_equal(first.mu.values, second.mu.values)
        np.testing.assert_array_equal(first.weight.values, second.weight.values)

    def test_parameter_count(self):
        readout = init_readout(7, 6, seed=0, bias=True)
        total = sum(t.values.size for t in readout.named_parameters().values())
        assert total == count_readout_parameters(7, 6, bias=True)

    def test_rejects_empty_population(self):
        with pytest.raises(ConfigError):
            init_readout(0, 8, seed=0)

    def test_clamp_keeps_positions_in_frame(self):
        readout = init_readout(2, 4, seed=0)
        readout.mu.values[...] = [[1.5, -0.2], [-3.0, 0.9]]
        readout.clamp_()
        np.testing.assert_array_equal(readout.mu.values, [[1.0, -0.2], [-1.0, 0.9]])


class TestEvalMode:
    def test_zero_weights_give_unit_rate(self):
        readout = init_readout(4, 3, seed=1)
        readout.weight.values[...] = 0.0
        fmap = np.random.default_rng(0).standard_normal((8, 16, 3))
        np.testing.assert_array_equal(readout_forward(fmap, readout).values, np.ones(4))

    @pytest.mark.parametrize("c", [-2.0, 0.0, 1.5])
    def test_constant_map_with_one_hot_weight(self, c):
        readout = init_readout(3, 4, seed=2)
        readout.weight.values[...] = 0.0
        readout.weight.values[:, 1] = 1.0
        fmap = np.full((8, 16, 4), c)
        expected = (c if c > 0 else np.expm1(c)) + 1.0
        np.testing.assert_allclose(readout_forward(fmap, readout).values, expected, atol=1e-15)

    def test_strictly_positive(self):
        readout = init_readout(10, 4, seed=3)
        readout.weight.values[...] *= 5.0
        fmap = np.random.default_rng(1).standard_normal((2, 8, 16, 4)) * 3.0
        assert np.all(readout_forward(fmap, readout).values > 0)

    def test_batched_shape(self):
        readout = init_readout(6, 4, seed=4)
        out = readout_forward(np.zeros((3, 8, 16, 4)), readout)
        assert out.shape == (3, 6)

    def test_depth_mismatch(self):
        with pytest.raises(ConfigError):
            readout_forward(np.zeros((8, 16, 5)), init_readout(2, 4, seed=0))

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            readout_forward(np.zeros((8, 16, 4)), init_readout(2, 4, seed=0), mode="sample")


class TestTrainMode:
    def test_needs_generator(self):
        with pytest.raises(ContractError):
            readout_forward(np.zeros((8, 16, 4)), init_readout(2, 4, seed=0), mode="train")

    def test_jittered_mean_close_to_eval(self):
        readout = init_readout(1, 1, seed=0)
        readout.mu.values[...] = [[0.0, 0.1]]
        readout.weight.values[...] = 1.0
        fmap = np.broadcast_to(linear_map(), (10_000, 8, 16, 1))

        evaluated = readout_forward(linear_map(), readout).values[0]
        trained = readout_forward(fmap, readout, mode="train", rng=np.random.default_rng(5)).values
        assert trained.shape == (10_000, 1)
        assert abs(trained.mean() - evaluated) / evaluated < 0.05

    def test_jitter_changes_samples(self):
        readout = init_readout(4, 1, seed=0)
        readout.weight.values[...] = 1.0
        out = readout_forward(np.broadcast_to(linear_map(), (2, 8, 16, 1)), readout, "train", np.random.default_rng(0))
        assert np.any(out.values[0] != out.values[1])


class TestGradients:
    def test_eval_mode(self):
        rng = np.random.default_rng(6)
        readout = init_readout(4, 3, seed=6)
        fmap = DiffTensor(rng.standard_normal((2, 5, 6, 3)), requires_grad=True)
        weights = rng.standard_normal((2, 4))
        params = {"fmap": fmap, **readout.named_parameters()}
        params.pop("readout.sigma_free")

        report = finite_difference_check(
            lambda: (readout_forward(fmap, readout) * weights).sum(), params, floor=1e-5, kink_tolerance=2e-4
        )
        assert report.max_relative_error < 1e-4
        assert report.skipped <= report.coordinates // 2

    def test_train_mode_reaches_sigma(self):
        rng = np.random.default_rng(7)
        readout = init_readout(3, 2, seed=7)
        fmap = DiffTensor(rng.standard_normal((2, 5, 6, 2)))

        def objective():
            return readout_forward(fmap, readout, mode="train", rng=np.random.default_rng(11)).sum()

        report = finite_difference_check(objective, readout.named_parameters(), floor=1e-5, kink_tolerance=2e-4)
        assert report.max_relative_error < 1e-4
        assert report.skipped <= report.coordinates // 2
