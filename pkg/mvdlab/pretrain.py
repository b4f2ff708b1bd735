"""Stage 1: teachers pretrained by masked pixel reconstruction.

The image teacher follows the masked-autoencoder recipe on individual frames
(random masking at 75%, which on a one-frame layout is the same as a tube
mask); the video teacher follows the video recipe with tube masks at 90%.
The decoder is discarded after training.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange

from .backbone import DecoderModel, ModelConfig, TransformerModel, build_decoder, decode, encode, init_model
from .dataset import LabeledVideoSet, NormStats, normalized_clips
from .errors import ConfigError
from .losses import pixel_recon_loss
from .tokenizer import MaskBatch, gather_tokens, normalize_patches, patchify, require_trainable_ratio, sample_masks
from .training import OptimSettings, TrainLog, apply_update, derive_seed, run_epochs

logger = logging.getLogger(__name__)

IMAGE_MASK_RATIO = 0.75
VIDEO_MASK_RATIO = 0.9


@dataclass(frozen=True)
class PretrainConfig(OptimSettings):
    mask_ratio: float = VIDEO_MASK_RATIO
    norm_pix_loss: bool = True

    def __post_init__(self) -> None:
        super().__post_init__()
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")


def image_frames(clips: np.ndarray) -> np.ndarray:
    """(N, T, H, W, C) clips -> (N*T, 1, H, W, C) one-frame clips."""
    return rearrange(clips, "n t h w c -> (n t) 1 h w c")


def masked_pixel_loss(
    encoder: TransformerModel,
    decoder: DecoderModel,
    clips: torch.Tensor,
    masks: MaskBatch,
    *,
    norm_pix_loss: bool = True,
) -> torch.Tensor:
    """One forward pass of masked pixel reconstruction over a batch of clips."""
    tokens = patchify(clips, encoder.layout)
    targets = normalize_patches(tokens) if norm_pix_loss else tokens
    features = encode(encoder, gather_tokens(tokens, masks.visible_index), masks.visible_index)
    prediction = decode(decoder, features, masks.visible_index, masks.masked_index)
    return pixel_recon_loss(prediction, targets, masks.token_mask)


def _pretrain(
    clips: np.ndarray,
    model_config: ModelConfig,
    config: PretrainConfig,
    desc: str,
) -> tuple[TransformerModel, TrainLog]:
    if tuple(clips.shape[1:4]) != (model_config.layout.frames, model_config.layout.height, model_config.layout.width):
        raise ConfigError(f"corpus clips {tuple(clips.shape[1:4])} do not match the model layout {model_config.layout}")
    require_trainable_ratio(model_config.layout, config.mask_ratio, "stage1 mask_ratio")
    encoder = init_model(model_config, derive_seed(config.seed, "init"))
    decoder = build_decoder(model_config, model_config.patch_dim, derive_seed(config.seed, "decoder"))
    data = torch.from_numpy(np.ascontiguousarray(clips))
    mask_rng = np.random.default_rng(derive_seed(config.seed, "mask"))

    def step(batch: np.ndarray, _step: int, optimizer: torch.optim.Optimizer, lr: float) -> dict[str, float | None]:
        masks = sample_masks(model_config.layout, config.mask_ratio, mask_rng, len(batch))
        loss = masked_pixel_loss(encoder, decoder, data[torch.from_numpy(batch)], masks, norm_pix_loss=config.norm_pix_loss)
        apply_update(optimizer, loss, lr)
        return {"loss": float(loss.detach())}

    log = run_epochs([("encoder", encoder), ("decoder", decoder)], len(data), config, step, desc=desc)
    return encoder, log


def pretrain_image_teacher(
    corpus: LabeledVideoSet,
    model_config: ModelConfig,
    config: PretrainConfig,
    stats: NormStats | None = None,
) -> tuple[TransformerModel, TrainLog]:
    if model_config.modality != "image":
        raise ConfigError("image teacher pretraining needs an image ModelConfig")
    frames = image_frames(normalized_clips(corpus, stats))
    logger.info("pretraining image teacher on %d frames, mask ratio %.2f", len(frames), config.mask_ratio)
    return _pretrain(frames, model_config, config, "stage1/image")


def pretrain_video_teacher(
    corpus: LabeledVideoSet,
    model_config: ModelConfig,
    config: PretrainConfig,
    stats: NormStats | None = None,
) -> tuple[TransformerModel, TrainLog]:
    if model_config.modality != "video":
        raise ConfigError("video teacher pretraining needs a video ModelConfig")
    logger.info("pretraining video teacher on %d clips, tube mask ratio %.2f", len(corpus), config.mask_ratio)
    return _pretrain(normalized_clips(corpus, stats), model_config, config, "stage1/video")
