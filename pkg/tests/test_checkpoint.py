import os
import tempfile
import unittest

import numpy as np

from helpers import frozen_teacher, tiny_config

from mvdlab.backbone import init_model
from mvdlab.checkpoint import (
    CONFIG_NAME,
    INDEX_NAME,
    PARAMS_DIR,
    load_checkpoint,
    load_teacher,
    parameter_hash,
    read_tensor,
    save_checkpoint,
    write_tensor,
)
from mvdlab.errors import CheckpointError, ModalityError


class TestTensorFiles(unittest.TestCase):
    def test_round_trip(self):
        array = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "t.f32")
            write_tensor(path, array)
            np.testing.assert_array_equal(read_tensor(path), array)
            self.assertEqual(os.path.getsize(path), 4 * 3 + 4 * 15)

    def test_truncated(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "t.f32")
            write_tensor(path, np.ones((4, 4), np.float32))
            with open(path, "rb") as f:
                data = f.read()
            with open(path, "wb") as f:
                f.write(data[:-1])
            with self.assertRaises(CheckpointError):
                read_tensor(path)


class TestCheckpoint(unittest.TestCase):
    def test_round_trip(self):
        model = init_model(tiny_config(), 7)
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(model, tmp)
            loaded = load_checkpoint(tmp, modality="video")
        self.assertEqual(loaded.config, model.config)
        self.assertEqual(parameter_hash(loaded), parameter_hash(model))
        self.assertFalse(loaded.frozen)

    def test_frozen_flag_survives(self):
        teacher = frozen_teacher("image", 1)
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(teacher, tmp)
            loaded = load_checkpoint(tmp)
        self.assertTrue(loaded.frozen)
        self.assertTrue(all(not p.requires_grad for p in loaded.parameters()))

    def test_load_teacher_freezes(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(init_model(tiny_config(), 0), tmp)
            teacher = load_teacher(tmp, "video")
            self.assertTrue(teacher.frozen)
            with self.assertRaises(ModalityError):
                load_teacher(tmp, "image")

    def test_modality_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(frozen_teacher("image", 0), tmp)
            with self.assertRaises(ModalityError):
                load_checkpoint(tmp, modality="video")

    def test_missing_pieces(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CheckpointError):
                load_checkpoint(tmp)
            save_checkpoint(init_model(tiny_config(), 0), tmp)
            os.remove(os.path.join(tmp, PARAMS_DIR, INDEX_NAME))
            with self.assertRaises(CheckpointError):
                load_checkpoint(tmp)

    def test_corrupt_tensor(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(init_model(tiny_config(), 0), tmp)
            path = os.path.join(tmp, PARAMS_DIR, "norm.weight.f32")
            with open(path, "rb") as f:
                data = f.read()
            with open(path, "wb") as f:
                f.write(data[:-4])
            with self.assertRaises(CheckpointError):
                load_checkpoint(tmp)

    def test_invalid_config_values(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(init_model(tiny_config(), 0), tmp)
            path = os.path.join(tmp, CONFIG_NAME)
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
            with open(path, "w", encoding="utf-8") as f:
                f.write(text.replace("heads=2", "heads=3", 1))
            with self.assertRaises(CheckpointError):
                load_checkpoint(tmp)


if __name__ == "__main__":
    unittest.main()
