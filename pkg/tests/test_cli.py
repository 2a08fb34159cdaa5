import io
import json
import logging
import os
import tempfile
import unittest

import mock
import yaml

from lenie.core.core import Lenie, EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_PARTIAL_AUGMENTATION
from lenie.evalcore.experiment import ARMS
from lenie.llmcore.augment import AugmentationSummary
from lenie.llmcore.backend import LlmBackendError, generate_description
from lenie.niecore.train import train_model


def synth_config(output_dir: str) -> dict:
    return {
        "dataset": {"name": "SYNTH", "synthetic": {"nodes": 40, "relations": 3}},
        "sampler": {"k": 2},
        "encoder": {"kind": "hash", "dim": 8},
        "sentence_encoder": {"kind": "hash", "dim": 8},
        "models": ["pagerank", {"kind": "linreg", "epochs": 20},
                   {"kind": "gnn", "hidden_dim": 4, "layers": 1, "epochs": 5}],
        "evaluation": {"folds": 3, "k": 5, "lr_grid": [0.01, 0.1]},
        "seed": 0,
        "output_dir": output_dir,
        "thread_count": 2,
    }


def read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


class LenieCliTestCase(unittest.TestCase):
    def setUp(self) -> None:
        logging.disable(logging.CRITICAL)
        self.tmp = tempfile.TemporaryDirectory()
        self.out = os.path.join(self.tmp.name, "out")

    def tearDown(self) -> None:
        self.tmp.cleanup()
        logging.disable(logging.NOTSET)

    def write_config(self, config: dict, name: str = "config.yaml") -> str:
        path = os.path.join(self.tmp.name, name)
        with open(path, "w") as fh:
            yaml.safe_dump(config, fh)
        return path

    def run_lenie(self, *argv: str) -> int:
        with mock.patch("sys.stdout", new_callable=io.StringIO):
            return Lenie(list(argv) + ["-l", "CRITICAL"]).run()

    def test_all_writes_reports(self):
        config = self.write_config(synth_config(self.out))
        self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", config))
        for arm in ARMS:
            self.assertTrue(os.path.isfile(os.path.join(self.out, f"features-{arm}.lenb")))
            for model in ("pagerank", "linreg", "gnn"):
                for extension in ("json", "csv", "timings.json"):
                    self.assertTrue(os.path.isfile(os.path.join(self.out, f"report-{arm}-{model}-seed0.{extension}")))
                self.assertTrue(os.path.isfile(os.path.join(self.out, f"model-{arm}-{model}-seed0.lenm")))
        for strategy in ("random", "cluster"):
            self.assertTrue(os.path.isfile(os.path.join(self.out, f"augment-{strategy}-default.jsonl")))
        with open(os.path.join(self.out, "summary-seed0.json"), "r", encoding="utf-8") as fh:
            self.assertEqual(len(ARMS) * 3, len(json.load(fh)))

    def test_rerun_skips_and_matches(self):
        config = self.write_config(synth_config(self.out))
        self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", config))
        manifest = read_bytes(os.path.join(self.out, "manifest.json"))
        store = read_bytes(os.path.join(self.out, "augment-cluster-default.jsonl"))

        with mock.patch("lenie.core.stages.train_model", wraps=train_model) as mock_train, \
                mock.patch("lenie.llmcore.augment.generate_description", wraps=generate_description) as mock_generate:
            self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", config))
            mock_train.assert_not_called()
            mock_generate.assert_not_called()
        self.assertEqual(manifest, read_bytes(os.path.join(self.out, "manifest.json")))
        self.assertEqual(store, read_bytes(os.path.join(self.out, "augment-cluster-default.jsonl")))

        # Fresh output directory reproduces same artifacts
        other_out = os.path.join(self.tmp.name, "other")
        other = self.write_config(synth_config(other_out), name="other.yaml")
        self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", other))
        for name in ("augment-cluster-default.jsonl", "augment-random-default.jsonl", "features-concat.lenb",
                     "features-augmented_cluster.lenb", "report-augmented_cluster-gnn-seed0.json",
                     "report-concat-linreg-seed0.csv", "summary-seed0.json"):
            self.assertEqual(read_bytes(os.path.join(self.out, name)), read_bytes(os.path.join(other_out, name)))

    def test_bundled_synth_byte_identical(self):
        outputs = [os.path.join(self.tmp.name, "first"), os.path.join(self.tmp.name, "second")]
        for index, out in enumerate(outputs):
            config = {"dataset": "SYNTH", "models": ["linreg"], "seed": 0, "output_dir": out, "thread_count": 4}
            self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", self.write_config(config, name=f"{index}.yaml")))
        with open(os.path.join(outputs[0], "dataset", "entities.tsv"), "r", encoding="utf-8") as fh:
            self.assertEqual(500, len([line for line in fh if line.strip()]))
        with open(os.path.join(outputs[0], "dataset", "relations.tsv"), "r", encoding="utf-8") as fh:
            self.assertEqual(4, len([line for line in fh if line.strip()]))
        names = [f"augment-{strategy}-default.jsonl" for strategy in ("random", "cluster")]
        names += [f"features-{arm}.lenb" for arm in ARMS]
        names += [f"report-{arm}-linreg-seed0.json" for arm in ARMS]
        for name in names:
            self.assertEqual(read_bytes(os.path.join(outputs[0], name)), read_bytes(os.path.join(outputs[1], name)),
                             msg=name)

    def test_stage_order(self):
        config = self.write_config(synth_config(self.out))
        self.assertEqual(EXIT_OK, self.run_lenie("ingest", "-c", config))
        self.assertEqual(EXIT_PIPELINE, self.run_lenie("evaluate", "-c", config))
        self.assertFalse(os.path.exists(os.path.join(self.out, "summary-seed0.json")))

    def test_config_change_invalidates_downstream(self):
        config = synth_config(self.out)
        path = self.write_config(config)
        self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", path))
        config["encoder"]["dim"] = 16
        self.write_config(config)
        self.assertEqual(EXIT_PIPELINE, self.run_lenie("train", "-c", path))
        with mock.patch("lenie.llmcore.augment.generate_description", wraps=generate_description) as mock_generate:
            self.assertEqual(EXIT_OK, self.run_lenie("embed", "-c", path))
            mock_generate.assert_not_called()
        self.assertEqual(EXIT_OK, self.run_lenie("train", "-c", path))

    def test_config_error(self):
        config = synth_config(self.out)
        del config["seed"]
        self.assertEqual(EXIT_CONFIG, self.run_lenie("all", "-c", self.write_config(config)))
        self.assertEqual(EXIT_CONFIG, self.run_lenie("all", "-c", os.path.join(self.tmp.name, "missing.yaml")))
        self.assertEqual(EXIT_CONFIG, self.run_lenie("all", "-c", self.write_config(synth_config(self.out)),
                                                     "--arm", "both"))
        self.assertFalse(os.path.exists(self.out))

    def test_partial_augmentation(self):
        config = self.write_config(synth_config(self.out))
        with mock.patch("lenie.llmcore.augment.generate_description") as mock_generate:
            mock_generate.side_effect = LlmBackendError("Service unavailable", 503)
            self.assertEqual(EXIT_PARTIAL_AUGMENTATION, self.run_lenie("all", "-c", config))
        self.assertEqual(b"", read_bytes(os.path.join(self.out, "augment-cluster-default.jsonl")))
        # Reports still written, augmented arms fall back to original descriptions
        self.assertTrue(os.path.isfile(os.path.join(self.out, "report-augmented_random-gnn-seed0.json")))

        self.assertEqual(EXIT_OK, self.run_lenie("augment", "-c", config))
        with open(os.path.join(self.out, "augment-cluster-default.jsonl"), "r", encoding="utf-8") as fh:
            self.assertEqual(20, len([line for line in fh if line.strip()]))

    def test_unwritable_store_is_pipeline_error(self):
        config = self.write_config(synth_config(self.out))
        self.assertEqual(EXIT_OK, self.run_lenie("ingest", "-c", config))
        self.assertEqual(EXIT_OK, self.run_lenie("sample", "-c", config))
        os.makedirs(os.path.join(self.out, "augment-random-default.jsonl"))
        with mock.patch("lenie.core.stages.augment_nodes", return_value=AugmentationSummary()):
            self.assertEqual(EXIT_PIPELINE, self.run_lenie("augment", "-c", config))

    def test_arm_filter_after_full_run(self):
        config = self.write_config(synth_config(self.out))
        self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", config))
        report = read_bytes(os.path.join(self.out, "report-concat-gnn-seed0.json"))
        with mock.patch("lenie.core.stages.train_model", wraps=train_model) as mock_train:
            self.assertEqual(EXIT_OK, self.run_lenie("evaluate", "-c", config, "--arm", "concat"))
            mock_train.assert_not_called()
        self.assertEqual(report, read_bytes(os.path.join(self.out, "report-concat-gnn-seed0.json")))

    def test_arm_filter_alone(self):
        config = self.write_config(synth_config(self.out))
        self.assertEqual(EXIT_OK, self.run_lenie("all", "-c", config, "--arm", "name_only"))
        self.assertTrue(os.path.isfile(os.path.join(self.out, "report-name_only-linreg-seed0.json")))
        self.assertFalse(os.path.exists(os.path.join(self.out, "report-concat-linreg-seed0.json")))
        self.assertFalse(os.path.exists(os.path.join(self.out, "augment-cluster-default.jsonl")))
        with open(os.path.join(self.out, "manifest.json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        self.assertIn("report@seed0#name_only", manifest)
        self.assertNotIn("report@seed0", manifest)

    def test_synth_subcommand(self):
        out = os.path.join(self.tmp.name, "synthetic")
        with mock.patch("sys.stdout", new_callable=io.StringIO) as stdout:
            status = Lenie(["synth", "--nodes", "30", "--relations", "2", "--seed", "3", "--out", out,
                            "-l", "CRITICAL"]).run()
        self.assertEqual(EXIT_OK, status)
        counts = json.loads(stdout.getvalue())
        self.assertEqual(30, counts["entities"])
        self.assertEqual(2, counts["relations"])
        for name in ("entities.tsv", "relations.tsv", "triplets.tsv"):
            self.assertTrue(os.path.isfile(os.path.join(out, name)))

        with mock.patch("sys.stdout", new_callable=io.StringIO):
            status = Lenie(["synth", "--nodes", "2", "--relations", "2", "--seed", "3", "--out", out,
                            "-l", "CRITICAL"]).run()
        self.assertEqual(EXIT_CONFIG, status)

    def test_synth_requires_parameters(self):
        with mock.patch("sys.stderr", new_callable=io.StringIO):
            with self.assertRaises(SystemExit):
                Lenie(["synth", "--nodes", "30"])

    def test_dataset_defaults(self):
        with mock.patch("sys.stdout", new_callable=io.StringIO) as stdout:
            self.assertEqual(EXIT_OK, Lenie(["--list", "-l", "CRITICAL"]).run())
        self.assertIn("MUSIC10K", stdout.getvalue())
        with mock.patch("sys.stdout", new_callable=io.StringIO) as stdout:
            self.assertEqual(EXIT_OK, Lenie(["--describe", "FB15K", "-l", "CRITICAL"]).run())
        self.assertIn("k: 10", stdout.getvalue())


if __name__ == '__main__':
    unittest.main()
