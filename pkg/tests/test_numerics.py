import sys
import unittest
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from protofaith.domain.errors import ConfigurationError, NonFiniteError, ShapeMismatchError
from protofaith.services import numerics


def naive_conv(image, kernel, bias, stride, padding):
    height, width, _ = image.shape
    kh, kw, c_in, c_out = kernel.shape
    padded = np.pad(image, ((padding, padding), (padding, padding), (0, 0)))
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((out_h, out_w, c_out))
    for i in range(out_h):
        for j in range(out_w):
            for o in range(c_out):
                patch = padded[i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                out[i, j, o] = np.sum(patch * kernel[..., o]) + bias[o]
    return out


class ConvolutionTests(unittest.TestCase):
    def test_matches_direct_definition(self) -> None:
        rng = np.random.default_rng(3)
        for stride, padding in ((1, 0), (1, 1), (2, 1), (2, 0)):
            image = rng.normal(size=(5, 6, 2))
            kernel = rng.normal(size=(3, 3, 2, 4))
            bias = rng.normal(size=4)
            got = numerics.conv2d(image, kernel, bias, stride, padding)
            np.testing.assert_allclose(got, naive_conv(image, kernel, bias, stride, padding), atol=1e-12)

    def test_one_by_one_conv_equals_affine_bitwise(self) -> None:
        rng = np.random.default_rng(4)
        image = rng.normal(size=(4, 4, 3))
        kernel = rng.normal(size=(1, 1, 3, 5))
        bias = rng.normal(size=5)
        conv = numerics.conv2d(image, kernel, bias)
        dense = numerics.affine(image.reshape(-1, 3), kernel[0, 0].T, bias).reshape(4, 4, 5)
        self.assertTrue(np.array_equal(conv, dense))

    def test_batch_axes_do_not_change_results(self) -> None:
        rng = np.random.default_rng(5)
        images = rng.normal(size=(2, 3, 4, 4, 1))
        kernel = rng.normal(size=(3, 3, 1, 2))
        batched = numerics.conv2d(images, kernel, None, 2, 1)
        for a in range(2):
            for b in range(3):
                self.assertTrue(np.array_equal(batched[a, b], numerics.conv2d(images[a, b], kernel, None, 2, 1)))

    def test_channel_mismatch_names_both_shapes(self) -> None:
        with self.assertRaises(ShapeMismatchError) as ctx:
            numerics.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))
        self.assertIn("(4, 4, 2)", str(ctx.exception))
        self.assertIn("(3, 3, 3, 1)", str(ctx.exception))

    def test_kernel_larger_than_padded_input(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            numerics.conv2d(np.zeros((2, 2, 1)), np.zeros((5, 5, 1, 1)), padding=1)

    def test_identity_kernel_keeps_input(self) -> None:
        image = np.arange(9.0).reshape(3, 3, 1)
        kernel = np.zeros((3, 3, 1, 1))
        kernel[1, 1, 0, 0] = 1.0
        self.assertTrue(np.array_equal(numerics.conv2d(image, kernel, padding=1), image))


class ActivationTests(unittest.TestCase):
    def test_relu1_clamps(self) -> None:
        values = np.array([-2.0, 0.0, 0.25, 1.0, 3.0])
        np.testing.assert_array_equal(numerics.relu1(values), [0.0, 0.0, 0.25, 1.0, 1.0])
        np.testing.assert_array_equal(numerics.relu(values), [0.0, 0.0, 0.25, 1.0, 3.0])

    def test_bounded_relu_needs_positive_bound(self) -> None:
        with self.assertRaises(ConfigurationError):
            numerics.bounded_relu([1.0], 0.0)

    def test_unknown_activation(self) -> None:
        with self.assertRaises(ConfigurationError):
            numerics.activate(np.zeros(2), "tanh")


class SoftmaxTests(unittest.TestCase):
    def test_log_softmax_is_normalised_and_stable(self) -> None:
        logits = np.array([1000.0, 1001.0, 999.0])
        log_p = numerics.log_softmax(logits)
        self.assertTrue(np.all(np.isfinite(log_p)))
        self.assertAlmostEqual(float(np.exp(log_p).sum()), 1.0, places=12)

    def test_single_class_is_zero(self) -> None:
        self.assertEqual(float(numerics.log_softmax([3.5])[0]), 0.0)

    def test_empty_logits_refused(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            numerics.log_softmax(np.zeros(0))

    def test_ensure_finite_names_layer(self) -> None:
        with self.assertRaises(NonFiniteError) as ctx:
            numerics.ensure_finite(np.array([1.0, np.inf]), 3)
        self.assertEqual(ctx.exception.layer_index, 3)
        self.assertIn("layer 3", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
