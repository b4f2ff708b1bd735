import contextlib
import csv
import io
import os
import tempfile
import unittest

import numpy as np

from helpers import TINY_GEOMETRY  # noqa: F401  (sets MVDLAB_PROGRESS)

from mvdlab.errors import AnalysisError, ConfigError
from mvdlab.evaluation import SimilarityMatrix
from mvdlab.report import write_matrix_csv, write_report_csv
from mvdlab.summary import (
    SeedResult,
    beats_random,
    coteaching_ordering,
    cross_slice_similarity,
    frames_less_similar,
    load_seed_results,
    per_token_table,
    required_seeds,
    run_checks,
    write_summary,
)


def _rows(img=(0.9, 0.6), vid=(0.7, 0.9), mvd=(0.9, 0.9), per_token=(0.8, 0.7), random=(0.5, 0.5)):
    rows = []
    for model, (spatial, temporal) in (("img", img), ("vid", vid), ("mvd", mvd), ("per_token", per_token), ("random", random)):
        rows += [(model, "spatial", spatial), (model, "temporal", temporal)]
    return rows


def _result(seed=0, image=0.8, video=0.4, **rows) -> SeedResult:
    return SeedResult(seed, _rows(**rows), image, video)


def _grid(off: float, n: int = 4) -> np.ndarray:
    values = np.full((n, n), off)
    np.fill_diagonal(values, 1.0)
    return values


class TestSimilarity(unittest.TestCase):
    def test_expanded_token_grid_keeps_its_summary(self):
        tokens = SimilarityMatrix(np.array([[1.0, 0.2, 0.4], [0.2, 1.0, 0.6], [0.4, 0.6, 1.0]]), granularity="token", pt=2)
        frames = tokens.expanded_to_frames().values
        self.assertAlmostEqual(cross_slice_similarity(frames, 2), tokens.summary, places=12)

    def test_pairs_inside_a_slice_are_skipped(self):
        values = _grid(0.5)
        values[0, 1] = values[1, 0] = 0.9
        values[2, 3] = values[3, 2] = 0.9
        self.assertAlmostEqual(cross_slice_similarity(values, 2), 0.5)
        self.assertAlmostEqual(cross_slice_similarity(values, 1), (0.5 * 8 + 0.9 * 4) / 12)
        for pt in (3, 4):
            with self.assertRaises(AnalysisError):
                cross_slice_similarity(values, pt)


class TestSeedChecks(unittest.TestCase):
    def test_frames_less_similar(self):
        self.assertTrue(frames_less_similar(_result()))
        self.assertFalse(frames_less_similar(_result(image=0.4, video=0.4)))
        with self.assertRaises(ConfigError):
            frames_less_similar(_result(video=None))

    def test_coteaching_ordering(self):
        self.assertTrue(coteaching_ordering(_result()))
        # within one point of the best single teacher still counts
        self.assertTrue(coteaching_ordering(_result(mvd=(0.895, 0.891))))
        self.assertFalse(coteaching_ordering(_result(mvd=(0.88, 0.9))))
        self.assertFalse(coteaching_ordering(_result(img=(0.7, 0.6))))
        self.assertFalse(coteaching_ordering(_result(vid=(0.7, 0.6))))
        with self.assertRaises(ConfigError):
            coteaching_ordering(SeedResult(0, [("img", "spatial", 0.5)]))

    def test_beats_random(self):
        self.assertTrue(beats_random(_result()))
        self.assertFalse(beats_random(_result(mvd=(0.6, 0.6))))
        self.assertTrue(beats_random(_result(mvd=(0.6, 0.6), random=(0.45, 0.45))))
        with self.assertRaises(ConfigError):
            beats_random(SeedResult(0, [("mvd", "spatial", 0.9)]))

    def test_required_seeds(self):
        self.assertEqual(required_seeds(5, "strict"), 4)
        self.assertEqual(required_seeds(5, "majority"), 3)
        self.assertEqual(required_seeds(3, "strict"), 3)

    def test_four_of_five_holds_three_does_not(self):
        results = [_result(seed) for seed in range(3)] + [_result(3, image=0.1), _result(4, image=0.1)]
        checks = {c.name: c for c in run_checks(results)}
        frames = checks["video teacher frames less similar"]
        self.assertEqual(frames.seeds_passed, 3)
        self.assertFalse(frames.holds)
        self.assertTrue(checks["co-teaching ordering"].holds)
        results[3] = _result(3)
        self.assertTrue(run_checks(results)[0].holds)

    def test_per_token_table(self):
        headers, rows = per_token_table([_result(0), _result(1, per_token=(0.6, 0.5))])
        self.assertEqual(headers, ["Model", "spatial", "temporal"])
        self.assertEqual(rows[0][0], "per_token")
        self.assertAlmostEqual(rows[0][1], 0.7)
        self.assertEqual(rows[1], ["mvd", 0.9, 0.9])


class TestSummaryFiles(unittest.TestCase):
    def test_round_trip_through_seed_directories(self):
        with tempfile.TemporaryDirectory() as tmp:
            for seed in (0, 1, 10):
                run = os.path.join(tmp, f"seed{seed}")
                write_report_csv(_rows(), os.path.join(run, "report.csv"))
                write_matrix_csv(_grid(0.8), os.path.join(run, "sim_image.csv"))
                write_matrix_csv(_grid(0.3 if seed != 1 else 0.9), os.path.join(run, "sim_video.csv"))
            os.makedirs(os.path.join(tmp, "seedling"))
            results = load_seed_results(tmp, 2)
            self.assertEqual([r.seed for r in results], [0, 1, 10])
            self.assertAlmostEqual(results[0].video_similarity, 0.3)
            out = os.path.join(tmp, "summary.csv")
            with self.assertLogs("mvdlab.summary", level="INFO") as logs:
                _, seeds_path, md_path = write_summary(results, run_checks(results), out)
            with open(out, "r", encoding="utf-8", newline="") as f:
                summary = list(csv.reader(f))
            with open(seeds_path, "r", encoding="utf-8", newline="") as f:
                per_seed = list(csv.reader(f))
            with open(md_path, "r", encoding="utf-8") as f:
                markdown = f.read()
        self.assertEqual(summary[0], ["check", "seeds_passed", "seeds", "required", "holds"])
        self.assertEqual(summary[1], ["video teacher frames less similar", "2", "3", "3", "false"])
        self.assertEqual(summary[2], ["co-teaching ordering", "3", "3", "3", "true"])
        self.assertEqual(len(per_seed), 1 + 3 * 3)
        self.assertIn(["1", "video teacher frames less similar", "false"], per_seed)
        self.assertIn("| per_token | 0.800000 | 0.700000 |", markdown)
        self.assertTrue(any("WARNING" in line for line in logs.output))

    def test_missing_inputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_seed_results(tmp, 2)
            os.makedirs(os.path.join(tmp, "seed0"))
            with self.assertRaises(ConfigError):
                load_seed_results(tmp, 2)
        with self.assertRaises(ConfigError):
            load_seed_results(os.path.join(tmp, "gone"), 2)


SLOW_RUN = """\
[data]
frames = 8
height = 32
width = 32

[stage1]
epochs = 30

[stage2]
epochs = 40

[eval]
epochs = 15
"""


@unittest.skipUnless(os.environ.get("MVDLAB_SLOW") == "1", "set MVDLAB_SLOW=1 for the five-seed run")
class TestFiveSeedRun(unittest.TestCase):
    """The whole pipeline over five seeds; keeps its outputs in MVDLAB_SLOW_OUT when set."""

    def test_directional_results_hold(self):
        from mvdlab.cli import main

        out = os.environ.get("MVDLAB_SLOW_OUT") or tempfile.mkdtemp(prefix="mvdlab-slow-")
        config = os.path.join(out, "slow.ini")
        os.makedirs(out, exist_ok=True)
        with open(config, "w", encoding="utf-8") as f:
            f.write(SLOW_RUN)

        def run(*argv: str) -> None:
            with contextlib.redirect_stdout(io.StringIO()):
                self.assertEqual(main([argv[0], "--config", config, *argv[1:]]), 0, " ".join(argv))

        for task, n in (("spatial", 256), ("temporal", 256)):
            run("synth", "--task", task, "--n", str(n), "--seed", "0", "--out", os.path.join(out, f"{task}_train"))
            run("synth", "--task", task, "--n", "96", "--seed", "1", "--split", "val", "--out", os.path.join(out, f"{task}_val"))
        data = os.path.join(out, "temporal_train")
        for seed in range(5):
            run_dir = os.path.join(out, f"seed{seed}")
            ckpt = {name: os.path.join(run_dir, f"{name}.ckpt") for name in ("image", "video", "img", "vid", "mvd", "per_token")}
            s1, s2 = f"stage1.seed={seed}", f"stage2.seed={seed}"
            run("pretrain", "--modality", "image", "--data", os.path.join(out, "spatial_train"), "--out", ckpt["image"], "--set", s1)
            run("pretrain", "--modality", "video", "--data", data, "--out", ckpt["video"], "--set", s1)
            for teacher in ("image", "video"):
                run("analyze", "--model", ckpt[teacher], "--frame-axis", "--data", os.path.join(out, "temporal_val"),
                    "--out", os.path.join(run_dir, f"sim_{teacher}.csv"))
            run("distill", "--image-teacher", ckpt["image"], "--data", data, "--out", ckpt["img"], "--set", s2)
            run("distill", "--video-teacher", ckpt["video"], "--data", data, "--out", ckpt["vid"], "--set", s2)
            run("distill", "--image-teacher", ckpt["image"], "--video-teacher", ckpt["video"], "--data", data,
                "--out", ckpt["mvd"], "--set", s2)
            run("distill", "--baseline", "per-token", "--video-teacher", ckpt["video"], "--data", data,
                "--out", ckpt["per_token"], "--set", s2)
            models = ",".join(f"{name}={ckpt[name]}" for name in ("img", "vid", "mvd", "per_token"))
            run("eval", "--models", models, "--random-init", "--tasks", "spatial,temporal", "--data-root", out,
                "--out", os.path.join(run_dir, "report.csv"), "--set", f"eval.seed={seed}", "--set", s2)
        run("summarize", "--runs", out, "--strict", "--out", os.path.join(out, "summary.csv"))


if __name__ == "__main__":
    unittest.main()
