import json
import os
import tempfile
import unittest

from helpers import TINY_GEOMETRY  # noqa: F401  (sets MVDLAB_PROGRESS)

from mvdlab.config import RunConfig, format_value, load_run_config, parse_value
from mvdlab.errors import ConfigError, GeometryError


def _write(tmp: str, name: str, text: str) -> str:
    path = os.path.join(tmp, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


class TestParsing(unittest.TestCase):
    def test_kinds(self):
        self.assertEqual(parse_value("stage1", "epochs", " 7 "), 7)
        self.assertEqual(parse_value("stage2", "lambda_img", "0.5"), 0.5)
        self.assertIsNone(parse_value("stage2", "momentum_end", "none"))
        self.assertIs(parse_value("stage2", "pixel_branch", "true"), True)
        self.assertEqual(parse_value("stage1", "teacher_size", "large"), "large")

    def test_rejects(self):
        for section, key, raw in (
            ("stage9", "epochs", "1"),
            ("stage1", "epoch", "1"),
            ("stage1", "epochs", "1.5"),
            ("stage2", "pixel_branch", "yes"),
            ("stage1", "teacher_size", "huge"),
        ):
            with self.assertRaises(ConfigError):
                parse_value(section, key, raw)

    def test_format(self):
        self.assertEqual(format_value(True), "true")
        self.assertEqual(format_value(None), "none")
        self.assertEqual(format_value(0.1), "0.1")
        self.assertEqual(format_value(3), "3")


class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        config = load_run_config()
        self.assertEqual(config.geometry, (8, 32, 32, 1))
        self.assertEqual(config.layout("video").total, 64)
        self.assertEqual(config.layout("image").total, 16)
        self.assertEqual(config.pretrain_config("image").mask_ratio, 0.75)
        self.assertEqual(config.pretrain_config("video").mask_ratio, 0.9)
        self.assertEqual(config.distill_config().mask_ratio, 0.9)
        self.assertEqual(config.sources, [])

    def test_precedence(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = _write(tmp, "run.ini", "[stage1]\nepochs = 7  # short run\nbase_lr = 0.01\n")
            config = load_run_config(path, ["stage1.epochs=9", "stage1.epochs=11"])
        self.assertEqual(config.get("stage1", "epochs"), 11)
        self.assertEqual(config.get("stage1", "base_lr"), 0.01)
        self.assertEqual(config.sources[0], path)

    def test_shared_mask_ratio_override(self):
        config = load_run_config(None, ["stage1.mask_ratio=0.5"])
        self.assertEqual(config.pretrain_config("image").mask_ratio, 0.5)
        self.assertEqual(config.pretrain_config("video").mask_ratio, 0.5)
        with self.assertRaises(ConfigError):
            load_run_config(None, ["stage1.mask_ratio=1.0"])

    def test_ratio_must_mask_some_but_not_all_tokens(self):
        # the default 4x4 token grid
        for override in ("stage1.mask_ratio=0.0", "stage1.video_mask_ratio=0.99", "stage2.mask_ratio=0.02"):
            with self.subTest(override=override), self.assertRaises(ConfigError):
                load_run_config(None, [override])
        # a 1x1 token grid has no ratio that masks some tokens but not all
        with self.assertRaises(ConfigError):
            load_run_config(None, ["data.height=8", "data.width=8", "stage2.mask_ratio=0.6"])
        self.assertEqual(load_run_config(None, ["stage2.mask_ratio=0.05"]).distill_config().mask_ratio, 0.05)

    def test_bad_inputs(self):
        with self.assertRaises(ConfigError):
            load_run_config("/nonexistent/run.ini")
        with self.assertRaises(ConfigError):
            load_run_config(None, ["stage1.epochs"])
        with self.assertRaises(ConfigError):
            load_run_config(None, ["epochs=3"])
        with self.assertRaises(GeometryError):
            load_run_config(None, ["data.height=30"])
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_run_config(_write(tmp, "bad.ini", "[model]\nwidth = 3\n"))
            with self.assertRaises(ConfigError):
                load_run_config(_write(tmp, "bad.json", "{not json"))
            with self.assertRaises(ConfigError):
                load_run_config(_write(tmp, "empty.json", "{}"))

    def test_teacher_size(self):
        config = load_run_config(None, ["stage1.teacher_size=large"])
        self.assertEqual(config.model_config("video", teacher=True).embed_dim, 96)
        self.assertEqual(config.model_config("video").embed_dim, 64)
        self.assertEqual(load_run_config().model_config("image", teacher=True).embed_dim, 64)

    def test_text_and_manifest_replay(self):
        config = load_run_config(None, ["stage2.lambda_vid=0.25", "stage2.momentum_end=0.999", "eval.linear_probe=true"])
        with tempfile.TemporaryDirectory() as tmp:
            from_text = load_run_config(_write(tmp, "dump.ini", config.to_text()))
            manifest = _write(tmp, "run.manifest.json", json.dumps({"command": "distill", "config": config.snapshot()}))
            from_manifest = load_run_config(manifest)
        self.assertEqual(from_text.snapshot(), config.snapshot())
        self.assertEqual(from_manifest.snapshot(), config.snapshot())
        self.assertIsInstance(RunConfig().snapshot()["stage2"], dict)


if __name__ == "__main__":
    unittest.main()
