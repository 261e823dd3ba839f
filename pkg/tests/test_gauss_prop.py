import math
import sys
import unittest
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from protofaith.domain.errors import ConfigurationError, ShapeMismatchError, UnsupportedLayerError
from protofaith.domain.model import LayerSpec, ModelSpec, PrototypeSet
from protofaith.services import gauss_prop as gp
from protofaith.services.desk import build_desk_model, classifier_weights
from protofaith.services.protopnet import distance_values, latent_map


def linear_model(kernel: np.ndarray, prototype: float) -> ModelSpec:
    """One full-size conv down to a 1x1x1 latent, no nonlinearity anywhere."""
    identity = np.ones((1, 1, 1, 1))
    return ModelSpec(
        (kernel.shape[0], kernel.shape[1], 1),
        (LayerSpec("conv", kernel, np.array([0.1])),),
        (LayerSpec("conv", identity, np.zeros(1)), LayerSpec("conv", identity, np.zeros(1))),
        PrototypeSet(1, 1, np.array([[prototype]])),
        classifier_weights(1, 1),
    )


def pixelwise_model(gains: np.ndarray, prototype: np.ndarray) -> ModelSpec:
    """Three 1x1 conv stages centred on 0.5; latent cell (i, j) reads pixel (i, j) alone."""
    channels = gains.shape[1]
    first = LayerSpec("conv", gains[0].reshape(1, 1, 1, channels), 0.5 - 0.5 * gains[0], activation="relu")
    extractor = tuple(
        LayerSpec("conv", np.diag(gain).reshape(1, 1, channels, channels), 0.5 - 0.5 * gain, activation=tag)
        for gain, tag in zip(gains[1:], ("relu", "relu1"))
    )
    prototypes = PrototypeSet(1, 1, prototype.reshape(1, -1))
    return ModelSpec((3, 3, 1), (first,), extractor, prototypes, classifier_weights(1, 1))


def point(mu: float, sigma: float) -> gp.GaussianTensor:
    return gp.GaussianTensor(np.array([mu]), np.array([sigma * sigma]))


class GaussianTensorTests(unittest.TestCase):
    def test_rejects_negative_variance_and_shape_mismatch(self) -> None:
        with self.assertRaises(ConfigurationError):
            gp.GaussianTensor(np.zeros(2), np.array([0.1, -0.1]))
        with self.assertRaises(ShapeMismatchError):
            gp.GaussianTensor(np.zeros(2), np.zeros(3))

    def test_coalition_encoding(self) -> None:
        x = np.array([2.0, -1.0])
        encoded = gp.gaussian_from_coalition(x, 0.25, 0.0)
        np.testing.assert_allclose(encoded.mean, [0.5, -0.25])
        np.testing.assert_allclose(encoded.variance, [0.75, 0.1875])
        with self.assertRaises(ConfigurationError):
            gp.gaussian_from_coalition(x, 1.5)


class LinearLayerTests(unittest.TestCase):
    def test_affine_weighted_variance(self) -> None:
        out = gp.g_affine(gp.GaussianTensor(np.zeros(2), np.ones(2)), np.array([[2.0, 3.0]]), np.zeros(1))
        self.assertEqual(float(out.mean[0]), 0.0)
        self.assertEqual(float(out.variance[0]), 13.0)

    def test_identity_weights_keep_moments(self) -> None:
        x = gp.GaussianTensor(np.array([0.3, -1.2]), np.array([0.5, 2.0]))
        out = gp.g_affine(x, np.eye(2))
        np.testing.assert_array_equal(out.mean, x.mean)
        np.testing.assert_array_equal(out.variance, x.variance)

    def test_conv_with_zero_variance_is_deterministic(self) -> None:
        rng = np.random.default_rng(0)
        image = rng.normal(size=(4, 4, 2))
        kernel = rng.normal(size=(3, 3, 2, 3))
        out = gp.g_conv2d(gp.GaussianTensor.point(image), kernel, np.ones(3), 2, 1)
        from protofaith.services.numerics import conv2d

        self.assertTrue(np.array_equal(out.mean, conv2d(image, kernel, np.ones(3), 2, 1)))
        self.assertFalse(np.any(out.variance))


class ReluMomentTests(unittest.TestCase):
    def test_relu1_reference_values(self) -> None:
        self.assertAlmostEqual(float(gp.g_relu1(point(0.5, 1e-8)).mean[0]), 0.5, delta=1e-9)
        self.assertAlmostEqual(float(gp.g_relu1(point(0.0, 1.0)).mean[0]), 0.31563, delta=1e-4)
        low = gp.g_relu1(point(-10.0, 1.0))
        self.assertLess(float(low.mean[0]), 1e-15)
        self.assertLess(float(low.variance[0]), 1e-12)
        self.assertLess(float(gp.g_relu1(point(-8.0, 1.0)).mean[0]), 1e-13)

    def test_relu1_zero_variance_limit(self) -> None:
        out = gp.g_relu1(gp.GaussianTensor.point(np.array([-0.5, 0.5, 1.5])))
        np.testing.assert_array_equal(out.mean, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(out.variance, [0.0, 0.0, 0.0])

    def test_relu1_standard_normal_variance(self) -> None:
        # E[g^2] = (Phi(1) - 1/2) - phi(1) + (1 - Phi(1)) for g = relu1(N(0, 1))
        phi1 = math.exp(-0.5) / math.sqrt(2 * math.pi)
        cdf1 = 0.5 * math.erfc(-1 / math.sqrt(2))
        mean = (1 / math.sqrt(2 * math.pi) - phi1) + (1 - cdf1)
        second = (cdf1 - 0.5) - phi1 + (1 - cdf1)
        out = gp.g_relu1(point(0.0, 1.0))
        self.assertAlmostEqual(float(out.mean[0]), mean, places=12)
        self.assertAlmostEqual(float(out.variance[0]), second - mean * mean, places=12)

    def test_relu1_bounds_and_monotone_mean(self) -> None:
        mus = np.linspace(-4, 4, 81)
        for sigma in (0.05, 0.5, 1.0, 3.0):
            out = gp.g_relu1(gp.GaussianTensor(mus, np.full(mus.shape, sigma * sigma)))
            self.assertTrue(np.all((out.mean >= 0) & (out.mean <= 1)))
            self.assertTrue(np.all((out.variance >= 0) & (out.variance <= 0.25)))
            self.assertTrue(np.all(np.diff(out.mean) >= -1e-15))

    def test_bounded_relu_with_large_bound_approaches_relu(self) -> None:
        x = gp.GaussianTensor(np.array([-0.4, 0.0, 0.7]), np.array([0.3, 1.0, 0.2]))
        bounded = gp.g_bounded_relu(x, 60.0)
        plain = gp.g_relu(x)
        np.testing.assert_allclose(bounded.mean, plain.mean, atol=1e-12)
        np.testing.assert_allclose(bounded.variance, plain.variance, atol=1e-10)

    def test_relu_standard_normal(self) -> None:
        out = gp.g_relu(point(0.0, 1.0))
        self.assertAlmostEqual(float(out.mean[0]), 1 / math.sqrt(2 * math.pi), places=12)
        self.assertAlmostEqual(float(out.variance[0]), 0.5 - 1 / (2 * math.pi), places=12)

    def test_unknown_activation(self) -> None:
        with self.assertRaises(UnsupportedLayerError):
            gp.g_activate(point(0.0, 1.0), "gelu")


class DistanceMomentTests(unittest.TestCase):
    def test_chi_square_case(self) -> None:
        for size in (1, 4, 16):
            mean, variance = gp.g_sq_l2_distance(gp.GaussianTensor(np.zeros(size), np.ones(size)), np.zeros(size))
            self.assertEqual(mean, float(size))
            self.assertEqual(variance, float(2 * size))

    def test_offset_case(self) -> None:
        mean, variance = gp.g_sq_l2_distance(gp.GaussianTensor(np.array([1.0, 0.0]), np.full(2, 0.5)), np.zeros(2))
        self.assertAlmostEqual(mean, 2.0, places=12)
        self.assertAlmostEqual(variance, 3.0, places=12)

    def test_zero_variance_is_squared_norm(self) -> None:
        mean, variance = gp.g_sq_l2_distance(gp.GaussianTensor.point(np.array([3.0, 4.0])), np.zeros(2))
        self.assertEqual(mean, 25.0)
        self.assertEqual(variance, 0.0)

    def test_length_mismatch(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            gp.g_sq_l2_distance(gp.GaussianTensor.point(np.zeros(3)), np.zeros(2))


class MinPoolTests(unittest.TestCase):
    def test_single_and_degenerate(self) -> None:
        self.assertEqual(gp.g_min_pool([(1.5, 0.25)]), (1.5, 0.25))
        self.assertEqual(gp.g_min_pool([(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]), (1.0, 0.0))

    def test_two_standard_normals(self) -> None:
        mean, variance = gp.g_min_pool([(0.0, 1.0), (0.0, 1.0)])
        self.assertAlmostEqual(mean, -1 / math.sqrt(math.pi), places=12)
        self.assertAlmostEqual(variance, 1 - 1 / math.pi, places=12)

    def test_point_masses_fold_without_warnings(self) -> None:
        with self.assertNoLogs("protofaith.services.gauss_prop", level="WARNING"):
            self.assertEqual(gp.g_min_pool([(3.0, 0.0), (1.0, 0.0), (2.0, 0.0)]), (1.0, 0.0))
            mean, variance = gp.clark_max(np.array([0.0, 5.0]), np.zeros(2), np.array([4.0, -1.0]), np.zeros(2))
        np.testing.assert_array_equal(mean, [4.0, 5.0])
        np.testing.assert_array_equal(variance, [0.0, 0.0])

    def test_clark_saturates_for_separated_inputs(self) -> None:
        mean, variance = gp.clark_max(np.array([100.0]), np.array([1.0]), np.array([0.0]), np.array([1.0]))
        self.assertEqual(float(mean[0]), 100.0)
        self.assertEqual(float(variance[0]), 1.0)

    def test_sanity_envelope(self) -> None:
        rng = np.random.default_rng(2)
        for _ in range(50):
            moments = [(float(rng.uniform(0, 4)), float(rng.uniform(0, 1))) for _ in range(5)]
            mean, variance = gp.g_min_pool(moments)
            smallest = min(m for m, _ in moments)
            largest_var = max(v for _, v in moments)
            self.assertLessEqual(mean, smallest + 4 * math.sqrt(largest_var) + 1e-12)
            self.assertGreaterEqual(variance, 0.0)

    def test_empty_refused(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            gp.g_min_pool([])


class TwinForwardTests(unittest.TestCase):
    def test_zero_variance_reproduces_deterministic_distances(self) -> None:
        rng = np.random.default_rng(17)
        for seed in range(20):
            size = int(rng.integers(3, 9))
            depth = int(rng.integers(1, 4))
            model = build_desk_model(
                seed,
                input_shape=(size, size, 1),
                conv_channels=tuple(int(c) for c in rng.integers(1, 5, size=depth)),
                latent_channels=int(rng.integers(1, 9)),
                classes=int(rng.integers(1, 4)),
                per_class=int(rng.integers(1, 3)),
                stride=int(rng.integers(1, 3)),
            )
            image = rng.uniform(0.0, 1.0, size=model.input_shape)
            twin = gp.g_forward(model, gp.GaussianTensor.point(image))
            expected = distance_values(latent_map(model, image), model.prototypes)
            np.testing.assert_allclose(twin.distance_mean, expected, rtol=0, atol=1e-10)
            self.assertFalse(np.any(twin.distance_variance))

    def test_linear_single_position_matches_monte_carlo(self) -> None:
        rng = np.random.default_rng(8)
        kernel = rng.normal(size=(3, 3, 1, 1))
        model = linear_model(kernel, 0.4)
        mean = rng.uniform(0, 1, size=(3, 3, 1))
        variance = rng.uniform(0.01, 0.05, size=(3, 3, 1))
        twin = gp.g_forward(model, gp.GaussianTensor(mean, variance))
        samples = rng.normal(mean, np.sqrt(variance), size=(100_000, 3, 3, 1))
        draws = distance_values(latent_map(model, samples), model.prototypes)[:, 0]
        standard_error = draws.std(ddof=1) / math.sqrt(draws.shape[0])
        self.assertLess(abs(float(twin.distance_mean[0]) - float(draws.mean())), 4 * standard_error)

    def test_well_separated_positions_match_monte_carlo(self) -> None:
        rng = np.random.default_rng(11)
        gains = rng.uniform(0.5, 1.0, size=(3, 4))
        image = rng.permutation(np.linspace(0.1, 0.9, 9)).reshape(3, 3, 1)
        prototype = latent_map(pixelwise_model(gains, np.zeros(4)), image)[1, 1]
        model = pixelwise_model(gains, prototype)
        variance = np.full(image.shape, 1e-5)
        twin = gp.g_forward(model, gp.GaussianTensor(image, variance))
        samples = rng.normal(image, np.sqrt(variance), size=(100_000, 3, 3, 1))
        draws = distance_values(latent_map(model, samples), model.prototypes)[:, 0]
        standard_error = draws.std(ddof=1) / math.sqrt(draws.shape[0])
        self.assertLess(abs(float(twin.distance_mean[0]) - float(draws.mean())), 3 * standard_error)

    def test_pooled_mean_is_nonnegative(self) -> None:
        model = build_desk_model(4, input_shape=(4, 4, 1))
        image = np.random.default_rng(4).uniform(0.0, 1.0, size=model.input_shape)
        twin = gp.g_forward(model, gp.gaussian_from_coalition(image, 0.5))
        self.assertTrue(np.all(twin.distance_mean >= 0.0))

    def test_only_uncertain_pixel_contributes(self) -> None:
        kernel = np.arange(1.0, 10.0).reshape(3, 3, 1, 1)
        model = linear_model(kernel, 0.0)
        variance = np.zeros((3, 3, 1))
        variance[1, 2, 0] = 0.5
        twin = gp.g_forward(model, gp.GaussianTensor(np.zeros((3, 3, 1)), variance))
        self.assertEqual(float(twin.latent.variance[0, 0, 0]), kernel[1, 2, 0, 0] ** 2 * 0.5)

    def test_shape_checked(self) -> None:
        model = build_desk_model(0)
        with self.assertRaises(ShapeMismatchError):
            gp.g_forward(model, gp.GaussianTensor.point(np.zeros((5, 5, 1))))


if __name__ == "__main__":
    unittest.main()
