import os
import tempfile
import unittest

import numpy as np

from helpers import TINY_GEOMETRY, TINY_PATCH, tiny_corpus

from mvdlab.dataset import (
    MANIFEST_NAME,
    LabeledVideoSet,
    NormStats,
    compute_norm_stats,
    corpus_fingerprint,
    gen_spatial_task,
    gen_static_task,
    gen_temporal_task,
    load_corpus,
    load_norm_stats,
    motion_step,
    normalize,
    render_motion_clip,
    save_corpus,
    save_norm_stats,
    validate_geometry,
)
from mvdlab.errors import (
    CorruptCorpusError,
    GeometryError,
    LabelRangeError,
    ManifestMissingError,
    NormStatsError,
    ShapeMismatchError,
)

DESK = (8, 32, 32, 1)


def _signature(frame: np.ndarray) -> tuple[float, ...]:
    return tuple(np.round(np.sort(frame.ravel()), 6))


class TestSpatialTask(unittest.TestCase):
    def test_small_call(self):
        corpus = gen_spatial_task(0, 4, DESK, 2)
        self.assertEqual(len(corpus), 4)
        self.assertTrue(set(corpus.labels.tolist()) <= {0, 1})
        self.assertEqual(corpus.clips.shape, (4, 8, 32, 32, 1))
        self.assertGreaterEqual(float(corpus.clips.min()), 0.0)
        self.assertLessEqual(float(corpus.clips.max()), 1.0)

    def test_deterministic(self):
        a = gen_spatial_task(0, 6, DESK, 2)
        b = gen_spatial_task(0, 6, DESK, 2)
        self.assertTrue(a.equals(b))
        self.assertEqual(a.clips.tobytes(), b.clips.tobytes())

    def test_any_frame_determines_label(self):
        corpus = gen_spatial_task(3, 20, DESK, 2)
        signatures = {0: set(), 1: set()}
        for clip, label in zip(corpus.clips, corpus.labels):
            signatures[int(label)].update(_signature(frame) for frame in clip)
        self.assertEqual(len(signatures[0]), 1)
        self.assertEqual(len(signatures[1]), 1)
        self.assertNotEqual(signatures[0], signatures[1])

    def test_linear_classifier_on_mean_frame(self):
        corpus = gen_spatial_task(0, 100, DESK, 2)
        x = corpus.clips.mean(axis=1).reshape(len(corpus), -1).astype(np.float64)
        x = np.hstack([x, np.ones((len(x), 1))])
        y = np.eye(2)[corpus.labels]
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        accuracy = float(((x @ w).argmax(axis=1) == corpus.labels).mean())
        self.assertGreater(accuracy, 0.95)

    def test_invalid_geometry(self):
        with self.assertRaises(GeometryError) as cm:
            gen_spatial_task(0, 4, (8, 30, 32, 1), 2)
        self.assertIn("H", str(cm.exception))
        with self.assertRaises(GeometryError):
            validate_geometry((7, 32, 32, 1))


class TestTemporalTask(unittest.TestCase):
    def test_pooled_frames_match_across_classes(self):
        corpus = gen_temporal_task(1, 8, DESK, 2)
        zero = np.sort(corpus.clips[corpus.labels == 0].ravel())
        one = np.sort(corpus.clips[corpus.labels == 1].ravel())
        np.testing.assert_array_equal(zero, one)

    def test_every_frame_has_the_same_appearance(self):
        corpus = gen_temporal_task(2, 4, DESK, 2)
        for clip in corpus.clips:
            first = _signature(clip[0])
            self.assertTrue(all(_signature(frame) == first for frame in clip))

    def test_reversed_right_motion_is_left_motion(self):
        t = DESK[0]
        step = motion_step(DESK)
        right = render_motion_clip("square", 3, 5, 0, DESK)
        left = render_motion_clip("square", 3 + (t - 1) * step, 5, 1, DESK)
        np.testing.assert_array_equal(right[::-1], left)

    def test_first_frame_carries_no_label(self):
        corpus = gen_temporal_task(0, 100, DESK, 2)
        x = corpus.clips[:, 0].reshape(len(corpus), -1).astype(np.float64)
        x = np.hstack([x, np.ones((len(x), 1))])
        w, *_ = np.linalg.lstsq(x, np.eye(2)[corpus.labels], rcond=None)
        accuracy = float(((x @ w).argmax(axis=1) == corpus.labels).mean())
        self.assertLessEqual(accuracy, 0.6)

    def test_balanced_labels(self):
        corpus = gen_temporal_task(0, 10, DESK, 2)
        self.assertEqual(int((corpus.labels == 0).sum()), 5)

    def test_static_task_frames_identical(self):
        corpus = gen_static_task(0, 4, DESK, 2)
        for clip in corpus.clips:
            self.assertTrue(all(np.array_equal(clip[0], frame) for frame in clip))


class TestCorpusPersistence(unittest.TestCase):
    def test_round_trip_and_byte_identity(self):
        corpus = tiny_corpus("temporal", n=6)
        with tempfile.TemporaryDirectory() as tmp:
            a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
            save_corpus(corpus, a)
            save_corpus(tiny_corpus("temporal", n=6), b)
            self.assertTrue(load_corpus(a).equals(corpus))
            for name in sorted(os.listdir(a)):
                with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                    self.assertEqual(fa.read(), fb.read(), name)
            self.assertEqual(corpus_fingerprint(a), corpus_fingerprint(b))

    def _saved(self, tmp: str) -> str:
        path = os.path.join(tmp, "corpus")
        save_corpus(tiny_corpus(n=4), path)
        return path

    def _rewrite_manifest(self, path: str, old: str, new: str) -> None:
        manifest = os.path.join(path, MANIFEST_NAME)
        with open(manifest, "r", encoding="utf-8") as f:
            text = f.read()
        with open(manifest, "w", encoding="utf-8") as f:
            f.write(text.replace(old, new, 1))

    def test_missing_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ManifestMissingError):
                load_corpus(tmp)

    def test_corrupt_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._saved(tmp)
            self._rewrite_manifest(path, "clip_1 label=", "clip_1 lbl=")
            with self.assertRaises(CorruptCorpusError):
                load_corpus(path)

    def test_truncated_clip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._saved(tmp)
            clip = os.path.join(path, "clip_2.f32")
            with open(clip, "rb") as f:
                data = f.read()
            with open(clip, "wb") as f:
                f.write(data[:-4])
            with self.assertRaises(CorruptCorpusError):
                load_corpus(path)

    def test_shape_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._saved(tmp)
            self._rewrite_manifest(path, "shape=4x8x8x1\nclip_2", "shape=4x8x8x3\nclip_2")
            with self.assertRaises(ShapeMismatchError):
                load_corpus(path)

    def test_label_out_of_range(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._saved(tmp)
            corpus = load_corpus(path)
            self._rewrite_manifest(path, f"clip_0 label={int(corpus.labels[0])}", "clip_0 label=5")
            with self.assertRaises(LabelRangeError):
                load_corpus(path)

    def test_in_memory_label_check(self):
        with self.assertRaises(LabelRangeError):
            LabeledVideoSet(clips=np.zeros((2, *TINY_GEOMETRY), np.float32), labels=np.array([0, 2]), class_count=2)


class TestNormalization(unittest.TestCase):
    def test_normalized_corpus_is_standardized(self):
        corpus = tiny_corpus(n=8)
        stats = compute_norm_stats(corpus)
        out = normalize(corpus.clips, stats).astype(np.float64)
        self.assertAlmostEqual(float(out.mean()), 0.0, places=4)
        self.assertAlmostEqual(float(out.std()), 1.0, places=4)

    def test_identity_stats(self):
        clips = tiny_corpus(n=2).clips
        np.testing.assert_array_equal(normalize(clips, NormStats(mean=(0.0,), std=(1.0,))), clips)

    def test_two_pass_oracle(self):
        corpus = gen_temporal_task(0, 100, DESK, 2)
        values = corpus.clips.astype(np.float64).ravel()
        mean = sum(values.tolist()) / len(values)
        var = sum(((v - mean) ** 2 for v in values.tolist())) / len(values)
        stats = compute_norm_stats(corpus)
        self.assertAlmostEqual(stats.mean[0], mean, delta=1e-6)
        self.assertAlmostEqual(stats.std[0], var ** 0.5, delta=1e-6)

    def test_zero_variance(self):
        flat = LabeledVideoSet(clips=np.full((2, *TINY_GEOMETRY), 0.5, np.float32), labels=np.array([0, 1]), class_count=2)
        with self.assertRaises(NormStatsError):
            compute_norm_stats(flat)
        with self.assertRaises(NormStatsError):
            NormStats(mean=(0.0,), std=(0.0,))

    def test_stats_file_round_trip(self):
        stats = compute_norm_stats(tiny_corpus(n=4))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "norm.txt")
            save_norm_stats(stats, path)
            self.assertEqual(load_norm_stats(path), stats)

    def test_patch_argument_drives_validation(self):
        self.assertEqual(validate_geometry((4, 12, 12, 1), patch=TINY_PATCH), (4, 12, 12, 1))
        with self.assertRaises(GeometryError):
            validate_geometry((4, 12, 12, 1))


if __name__ == "__main__":
    unittest.main()
