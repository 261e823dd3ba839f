import sys
import unittest
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from protofaith.domain.errors import ClassIndexError, ConfigurationError
from protofaith.domain.model import LayerSpec, ModelSpec, PrototypeSet
from protofaith.services import legacy_explainer as le
from protofaith.services.desk import build_desk_model, build_projected_desk_model
from protofaith.services.evaluation import counterexample_fixture
from protofaith.services.shapley import SetFunctionSpec, Target, exact_shapley


def unbounded(model: ModelSpec) -> ModelSpec:
    last = model.extractor[1]
    relu_last = LayerSpec("conv", last.weights, last.bias, activation="relu")
    return ModelSpec(
        model.input_shape,
        model.backbone,
        (model.extractor[0], relu_last),
        model.prototypes,
        model.classifier_weights,
    )


class UpscaleTests(unittest.TestCase):
    def test_corners_are_reproduced(self) -> None:
        grid = np.random.default_rng(0).uniform(size=(3, 4))
        out = le.upscale(grid, (7, 9))
        self.assertEqual(out.shape, (7, 9))
        for row, col, src_row, src_col in ((0, 0, 0, 0), (0, 8, 0, 3), (6, 0, 2, 0), (6, 8, 2, 3)):
            self.assertEqual(float(out[row, col]), float(grid[src_row, src_col]))

    def test_constant_stays_constant(self) -> None:
        out = le.upscale(np.full((2, 2), 0.75), (5, 3))
        self.assertTrue(np.all(out == 0.75))

    def test_single_cell_fills_image(self) -> None:
        self.assertTrue(np.all(le.upscale(np.array([[2.5]]), (4, 4)) == 2.5))


class CounterexampleMapTests(unittest.TestCase):
    def setUp(self) -> None:
        self.model, self.image, _ = counterexample_fixture()
        self.legacy = le.legacy_map(self.model, self.image, 0, 0)

    def test_highlight_lands_opposite_the_informative_pixel(self) -> None:
        upscaled = self.legacy.upscaled
        peak = np.unravel_index(int(np.argmax(upscaled)), upscaled.shape)
        self.assertEqual(tuple(int(i) for i in peak), (2, 2))
        self.assertEqual(float(upscaled[0, 0]), 0.0)
        np.testing.assert_allclose(upscaled, [[0.0, 0.0, 0.0], [0.0, 0.25, 0.5], [0.0, 0.5, 1.0]])

    def test_box_and_sensitivity(self) -> None:
        self.assertAlmostEqual(self.legacy.threshold, 0.8, places=12)
        self.assertEqual(self.legacy.box, (2, 3, 2, 3))
        self.assertEqual(le.sensitivity_violations(self.legacy), 3)

    def test_completeness_gap_dwarfs_oracle(self) -> None:
        attribution = le.legacy_as_attribution(self.legacy)
        oracle = exact_shapley(SetFunctionSpec(self.model, Target.distance(0, 0), self.image))
        self.assertAlmostEqual(attribution.residual, 3.25, places=12)
        self.assertLess(abs(oracle.residual), 1e-9)
        self.assertGreater(abs(attribution.residual), 10 * abs(oracle.residual))

    def test_constant_map_boxes_whole_image(self) -> None:
        model = self.model.with_prototypes(PrototypeSet(1, 1, np.zeros((1, 1))))
        legacy = le.legacy_map(model, np.zeros((3, 3, 1)), 0, 0)
        self.assertTrue(np.all(legacy.upscaled == 1.0))
        self.assertEqual(legacy.box, (0, 3, 0, 3))
        self.assertEqual(le.sensitivity_violations(legacy), 0)


class LegacyMapTests(unittest.TestCase):
    def test_flip_plus_raw_is_latent_dimension(self) -> None:
        model, dataset = build_projected_desk_model(2)
        legacy = le.legacy_map(model, dataset[0].image, 1, 0)
        self.assertEqual(legacy.max_distance, 4.0)
        np.testing.assert_allclose(legacy.flipped + legacy.raw, 4.0, rtol=0, atol=1e-12)
        self.assertEqual(float(legacy.upscaled[0, 0]), float(legacy.flipped[0, 0]))
        self.assertEqual(float(legacy.upscaled[-1, -1]), float(legacy.flipped[-1, -1]))

    def test_flip_needs_bounded_latents(self) -> None:
        model = unbounded(build_desk_model(1))
        with self.assertRaises(ConfigurationError):
            le.legacy_map(model, np.zeros(model.input_shape), 0, 0)

    def test_log_variant_works_unbounded(self) -> None:
        model = unbounded(build_desk_model(1))
        legacy = le.legacy_map(model, np.full(model.input_shape, 0.5), 0, 1, activation="log")
        self.assertIsNone(legacy.max_distance)
        self.assertTrue(np.all(legacy.activation_map > 0))
        self.assertEqual(legacy.activation, "log")

    def test_rejects_bad_arguments(self) -> None:
        model = build_desk_model(1)
        image = np.zeros(model.input_shape)
        with self.assertRaises(ClassIndexError):
            le.legacy_map(model, image, 2, 0)
        with self.assertRaises(ConfigurationError):
            le.legacy_map(model, image, 0, 0, percentile=101.0)
        with self.assertRaises(ConfigurationError):
            le.legacy_map(model, image, 0, 0, activation="softplus")

    def test_attribution_keeps_end_values(self) -> None:
        model, dataset = build_projected_desk_model(6)
        attribution = le.legacy_as_attribution(le.legacy_map(model, dataset[0].image, 0, 0))
        self.assertEqual(attribution.method, "legacy")
        self.assertEqual(attribution.shape, (6, 6))
        np.testing.assert_array_equal(attribution.relevance(), attribution.values)


if __name__ == "__main__":
    unittest.main()
