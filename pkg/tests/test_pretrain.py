import unittest
from itertools import chain

import numpy as np
import torch

from helpers import tiny_config, tiny_corpus, to_double

from mvdlab.backbone import build_decoder, init_model
from mvdlab.checkpoint import parameter_hash
from mvdlab.dataset import compute_norm_stats
from mvdlab.errors import ConfigError
from mvdlab.pretrain import (
    IMAGE_MASK_RATIO,
    VIDEO_MASK_RATIO,
    PretrainConfig,
    image_frames,
    masked_pixel_loss,
    pretrain_image_teacher,
    pretrain_video_teacher,
)
from mvdlab.tokenizer import sample_masks


def _config(**kwargs) -> PretrainConfig:
    return PretrainConfig(**{"epochs": 2, "batch_size": 4, "mask_ratio": 0.5, "seed": 0, **kwargs})


class TestPretrainConfig(unittest.TestCase):
    def test_defaults(self):
        self.assertEqual(PretrainConfig().mask_ratio, VIDEO_MASK_RATIO)
        self.assertLess(IMAGE_MASK_RATIO, VIDEO_MASK_RATIO)

    def test_invalid_ratio(self):
        with self.assertRaises(ConfigError):
            PretrainConfig(mask_ratio=1.0)


class TestMaskedPixelLoss(unittest.TestCase):
    def test_finite_and_positive(self):
        config = tiny_config()
        encoder = init_model(config, 0)
        decoder = build_decoder(config, config.patch_dim, 1)
        clips = torch.from_numpy(tiny_corpus(n=4).clips)
        masks = sample_masks(config.layout, 0.5, np.random.default_rng(0), 4)
        loss = masked_pixel_loss(encoder, decoder, clips, masks)
        self.assertTrue(torch.isfinite(loss))
        self.assertGreater(float(loss), 0.0)

    def test_gradient_matches_finite_differences(self):
        config = tiny_config()
        encoder = init_model(config, 0)
        decoder = build_decoder(config, config.patch_dim, 1)
        to_double(encoder, decoder)
        clips = torch.from_numpy(tiny_corpus(n=4).clips).double()
        masks = sample_masks(config.layout, 0.5, np.random.default_rng(0), 4)
        named = list(chain(encoder.named_parameters(), decoder.named_parameters()))
        loss = masked_pixel_loss(encoder, decoder, clips, masks)
        grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
        eps = 1e-5
        checked = 0
        for (name, param), grad in zip(named, grads):
            if grad is None:
                continue
            idx = int(grad.abs().argmax())
            analytic = float(grad.reshape(-1)[idx])
            flat = param.data.view(-1)
            original = float(flat[idx])
            with torch.no_grad():
                flat[idx] = original + eps
                plus = float(masked_pixel_loss(encoder, decoder, clips, masks))
                flat[idx] = original - eps
                minus = float(masked_pixel_loss(encoder, decoder, clips, masks))
                flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            if abs(analytic) > 1e-5:
                self.assertLess(abs(analytic - numeric) / max(abs(analytic), abs(numeric)), 1e-4, name)
                checked += 1
        self.assertGreaterEqual(checked, 10)

    def test_image_frames(self):
        clips = tiny_corpus(n=3).clips
        frames = image_frames(clips)
        self.assertEqual(frames.shape, (12, 1, 8, 8, 1))
        np.testing.assert_array_equal(frames[5, 0], clips[1, 1])


class TestPretraining(unittest.TestCase):
    def test_video_teacher_is_deterministic(self):
        corpus = tiny_corpus("temporal", n=8)
        a, log = pretrain_video_teacher(corpus, tiny_config(), _config())
        b, _ = pretrain_video_teacher(corpus, tiny_config(), _config())
        self.assertEqual(len(log.rows), 2)
        self.assertEqual(parameter_hash(a), parameter_hash(b))
        self.assertNotEqual(parameter_hash(a), parameter_hash(init_model(tiny_config(), 0)))

    def test_image_teacher(self):
        corpus = tiny_corpus(n=4)
        encoder, log = pretrain_image_teacher(corpus, tiny_config("image"), _config(epochs=1), compute_norm_stats(corpus))
        self.assertEqual(encoder.config.modality, "image")
        self.assertEqual(len(log.lr_trace), 4)

    def test_ratio_that_masks_nothing_is_rejected_up_front(self):
        corpus = tiny_corpus(n=4)
        # 2x2 grid: 0.0 and 0.1 mask no tube, 0.9 masks all four
        for ratio in (0.0, 0.1, 0.9):
            with self.subTest(ratio=ratio), self.assertRaises(ConfigError):
                pretrain_video_teacher(corpus, tiny_config(), _config(mask_ratio=ratio))
        with self.assertRaises(ConfigError):
            pretrain_image_teacher(corpus, tiny_config("image"), _config(mask_ratio=0.0))

    def test_modality_mismatch(self):
        corpus = tiny_corpus(n=4)
        with self.assertRaises(ConfigError):
            pretrain_image_teacher(corpus, tiny_config("video"), _config())
        with self.assertRaises(ConfigError):
            pretrain_video_teacher(corpus, tiny_config("image"), _config())

    def test_loss_goes_down(self):
        corpus = tiny_corpus(n=16)
        _, log = pretrain_video_teacher(
            corpus, tiny_config(), _config(epochs=15, batch_size=8, base_lr=0.1), compute_norm_stats(corpus)
        )
        losses = log.epoch_losses()
        self.assertLess(min(losses[-3:]), losses[0])
        # masks are resampled every step, so the trend is read over three-epoch blocks
        self.assertLessEqual(log.non_monotone_epochs(window=3), 2)


if __name__ == "__main__":
    unittest.main()
