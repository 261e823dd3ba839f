import contextlib
import io
import json
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from protofaith.cli.main import main
from protofaith.data.model_files import load_model, model_payload, save_model
from protofaith.data.tensor_files import load_image, save_tensor
from protofaith.domain.model import PrototypeSet
from protofaith.services.desk import build_desk_model
from protofaith.services.protopnet import forward
from protofaith.services.shapley import SetFunctionSpec, Target, exact_shapley


def run(*argv: str) -> int:
    with contextlib.redirect_stderr(io.StringIO()), contextlib.redirect_stdout(io.StringIO()):
        return main(list(argv))


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


class UsageTests(unittest.TestCase):
    def test_missing_model_is_usage_error(self) -> None:
        self.assertEqual(run("forward", "--image", "x.txt"), 2)

    def test_unknown_command(self) -> None:
        self.assertEqual(run("train"), 2)

    def test_sampler_without_seed(self) -> None:
        self.assertEqual(run("explain", "--model", "m.json", "--image", "x.txt", "--method", "sampler"), 2)

    def test_proto_index_needs_class(self) -> None:
        self.assertEqual(run("explain", "--model", "m.json", "--image", "x.txt", "--proto", "1"), 2)

    def test_missing_model_file_is_failure(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            code = run("forward", "--model", str(Path(tmp) / "none.json"), "--image", "x.txt", "--out", tmp)
        self.assertEqual(code, 1)


class CounterexampleCommandTests(unittest.TestCase):
    def test_verdict_holds(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(run("counterexample", "--out", tmp), 0)
            verdict = json.loads((Path(tmp) / "counterexample.json").read_text(encoding="utf-8"))
            self.assertTrue((Path(tmp) / "counterexample_legacy.pgm").exists())
        self.assertTrue(verdict["holds"])
        self.assertEqual(verdict["legacy_max_position"], [2, 2])
        self.assertEqual(verdict["latent_active_cells"], [[1, 1]])
        self.assertEqual(verdict["oracle_support"], [[0, 0]])
        self.assertLess(verdict["aopc_oracle"], verdict["aopc_legacy"])

    def test_outputs_are_reproducible(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            outputs = []
            for name in ("a", "b"):
                out = Path(tmp) / name
                self.assertEqual(run("counterexample", "--out", str(out)), 0)
                outputs.append({p.name: p.read_bytes() for p in out.iterdir()})
        self.assertEqual(outputs[0], outputs[1])
        self.assertEqual(len(outputs[0]), 3)


class BuildForwardTests(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def build(self, name: str, *extra: str) -> Path:
        out = self.root / name
        self.assertEqual(run("build", "--seed", "5", "--out", str(out), *extra), 0)
        return out

    def test_build_and_forward_are_reproducible(self) -> None:
        first = self.build("a")
        second = self.build("b")
        self.assertEqual((first / "model.json").read_bytes(), (second / "model.json").read_bytes())
        image = first / "train" / "c1_000.txt"
        outputs = []
        for name in ("fa", "fb"):
            out = self.root / name
            self.assertEqual(run("forward", "--model", str(first / "model.json"), "--image", str(image), "--out", str(out)), 0)
            outputs.append({p.name: p.read_bytes() for p in (out / "c1_000").iterdir()})
        self.assertEqual(outputs[0], outputs[1])
        self.assertEqual(set(outputs[0]), {"logits.csv", "distances.csv", "contributions.csv"})

        model = load_model(first / "model.json")
        result = forward(model, load_image(image))
        distances = read_csv(self.root / "fa" / "c1_000" / "distances.csv")
        np.testing.assert_array_equal(distances["distance"].to_numpy(), result.distances.values)
        logits = read_csv(self.root / "fa" / "c1_000" / "logits.csv")
        np.testing.assert_array_equal(logits["logit"].to_numpy(), result.logits)

    def test_single_class_contributions_sum_to_zero(self) -> None:
        built = self.build("one", "--classes", "1", "--per-class", "3")
        out = self.root / "fwd"
        image = built / "train" / "c0_001.txt"
        self.assertEqual(run("forward", "--model", str(built / "model.json"), "--image", str(image), "--out", str(out)), 0)
        contributions = read_csv(out / "c0_001" / "contributions.csv")
        self.assertEqual(len(contributions), 3)
        self.assertAlmostEqual(float(contributions["psi"].sum()), 0.0, delta=1e-9)

    def test_explain_oracle_matches_library(self) -> None:
        built = self.build("small", "--size", "3")
        image = built / "train" / "c0_000.txt"
        out = self.root / "explain"
        code = run(
            "explain", "--model", str(built / "model.json"), "--image", str(image),
            "--method", "oracle", "--class", "0", "--proto", "0", "--out", str(out),
        )
        self.assertEqual(code, 0)
        table = read_csv(out / "c0_000_c0_k0_oracle.csv")
        self.assertTrue((out / "c0_000_c0_k0_oracle.pgm").exists())
        model = load_model(built / "model.json")
        expected = exact_shapley(SetFunctionSpec(model, Target.distance(0, 0), load_image(image)))
        np.testing.assert_allclose(table["value"].to_numpy(), expected.values.reshape(-1), rtol=0, atol=1e-12)
        summary = read_csv(out / "explain_oracle.csv")
        self.assertTrue((summary["residual"].abs() <= 1e-9).all())

    def test_legacy_refuses_unbounded_model(self) -> None:
        built = self.build("unbounded", "--size", "3")
        payload = model_payload(load_model(built / "model.json"))
        payload["layers"][-1]["activation"] = "relu"
        path = self.root / "relu_model.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        code = run(
            "explain", "--model", str(path), "--image", str(built / "train" / "c0_000.txt"),
            "--method", "legacy", "--out", str(self.root / "legacy"),
        )
        self.assertEqual(code, 1)

    def test_aopc_with_zero_steps(self) -> None:
        built = self.build("perturb", "--size", "3")
        outputs = []
        for name in ("p1", "p2"):
            out = self.root / name
            code = run("aopc", "--model", str(built / "model.json"), "--seed", "1", "--steps", "0", "--out", str(out))
            self.assertEqual(code, 0)
            outputs.append((out / "aopc.csv").read_bytes())
        self.assertEqual(outputs[0], outputs[1])
        scores = read_csv(self.root / "p1" / "aopc.csv")
        self.assertEqual(set(scores["method"]), {"dasp", "legacy"})
        self.assertTrue((scores["score"] == 0.0).all())
        self.assertTrue((self.root / "p1" / "curves_dasp.csv").exists())

    def test_explain_is_reproducible(self) -> None:
        built = self.build("explained", "--size", "3")
        outputs = []
        for name in ("e1", "e2"):
            out = self.root / name
            code = run(
                "explain", "--model", str(built / "model.json"), "--image", str(built / "train" / "c1_000.txt"),
                "--method", "faith", "--out", str(out),
            )
            self.assertEqual(code, 0)
            outputs.append({p.name: p.read_bytes() for p in out.iterdir()})
        self.assertEqual(outputs[0], outputs[1])
        self.assertIn("explain_faith.csv", outputs[0])

    def test_dot_family_aopc_with_paper_norm(self) -> None:
        built = self.build("dots", "--family", "dot")
        outputs = []
        for name in ("d1", "d2"):
            out = self.root / name
            code = run("aopc", "--model", str(built / "model.json"), "--seed", "1", "--norm", "paper", "--out", str(out))
            self.assertEqual(code, 0)
            outputs.append({p.name: p.read_bytes() for p in out.iterdir()})
        self.assertEqual(outputs[0], outputs[1])
        scores = read_csv(self.root / "d1" / "aopc.csv").set_index("method")
        self.assertEqual(set(scores["normalization"]), {"paper"})
        self.assertLess(scores.loc["dasp", "score"], scores.loc["legacy", "score"])
        curves = read_csv(self.root / "d1" / "curves_dasp.csv")
        self.assertEqual(curves["t"].max(), 4)
        self.assertTrue((curves["term"] <= 1e-9).all())


class ValidateCommandTests(unittest.TestCase):
    def test_affine_moments_pass(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            code = run("validate", "--layer", "affine", "--samples", "100000", "--seed", "0", "--out", tmp)
            frame = read_csv(Path(tmp) / "validate_affine.csv")
        self.assertEqual(code, 0)
        self.assertEqual(len(frame), 8)

    def test_too_few_samples_is_usage_error(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(run("validate", "--layer", "relu", "--samples", "10", "--seed", "0", "--out", tmp), 2)
            self.assertFalse((Path(tmp) / "validate_relu.csv").exists())

    def test_same_seed_same_bytes(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            outputs = []
            for name in ("v1", "v2"):
                out = Path(tmp) / name
                code = run("validate", "--layer", "affine", "--samples", "100000", "--seed", "0", "--out", str(out))
                self.assertEqual(code, 0)
                outputs.append((out / "validate_affine.csv").read_bytes())
        self.assertEqual(outputs[0], outputs[1])


class DuplicatePrototypeTests(unittest.TestCase):
    def test_tables_name_the_repeated_prototype(self) -> None:
        model = build_desk_model(0, input_shape=(3, 3, 1))
        values = np.array(model.prototypes.values)
        values[2] = values[0]
        model = model.with_prototypes(PrototypeSet(2, 2, values))
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            save_model(model, root / "model.json")
            save_tensor(np.full((3, 3, 1), 0.5), root / "img.txt")
            code = run("forward", "--model", str(root / "model.json"), "--image", str(root / "img.txt"), "--out", str(root / "fwd"))
            self.assertEqual(code, 0)
            contributions = read_csv(root / "fwd" / "img" / "contributions.csv")
            code = run(
                "explain", "--model", str(root / "model.json"), "--image", str(root / "img.txt"),
                "--method", "oracle", "--out", str(root / "explain"),
            )
            self.assertEqual(code, 0)
            summary = read_csv(root / "explain" / "explain_oracle.csv")
        repeated = contributions[contributions["duplicate_of"].notna()]
        self.assertEqual(repeated["prototype_index"].unique().tolist(), [2])
        self.assertTrue((repeated["duplicate_of"] == 0).all())
        flagged = summary[summary["duplicate_of"].notna()]
        self.assertEqual(flagged[["prototype_class", "prototype_index"]].drop_duplicates().values.tolist(), [[1, 0]])
        self.assertTrue((flagged["duplicate_of"] == 0).all())
        self.assertEqual(len(summary), 4)


if __name__ == "__main__":
    unittest.main()
