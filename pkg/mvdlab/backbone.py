"""Vanilla transformer encoder and shallow masked decoder.

The encoder embeds patch vectors with a linear projection (a 3D patch embedding
over pre-partitioned patches), adds fixed sin-cos positional embeddings over
the 3D token grid, and runs joint space-time attention over whatever tokens it
is given. Masked tokens are simply never passed in.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
from timm.models.vision_transformer import Block

from .errors import ConfigError, MaskError, ModalityError
from .tokenizer import TokenLayout

logger = logging.getLogger(__name__)

MODALITIES = ("image", "video")
MASK_TOKEN_STD = 0.02

DESK_PRESET = {"embed_dim": 64, "depth": 4, "heads": 4}
LARGE_PRESET = {"embed_dim": 96, "depth": 6, "heads": 4}
PRESETS = {"desk": DESK_PRESET, "large": LARGE_PRESET}


@dataclass(frozen=True)
class ModelConfig:
    layout: TokenLayout
    modality: str = "video"
    channels: int = 1
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    drop_path: float = 0.0

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be image or video, got {self.modality!r}")
        if self.modality == "image" and not self.layout.is_image:
            raise ConfigError("image models need an image layout (t_tokens = 1, pt = 1)")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.depth < 1 or self.decoder_depth < 1:
            raise ConfigError(f"depth and decoder_depth must be >= 1, got {self.depth}, {self.decoder_depth}")
        for name, dim, heads in (
            ("embed_dim", self.embed_dim, self.heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ):
            if heads < 1 or dim % heads:
                raise ConfigError(f"{name}={dim} is not divisible by {heads} heads")
            if dim < 6 or dim % 2:
                raise ConfigError(f"{name}={dim} must be even and >= 6 for 3D sin-cos embeddings")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must lie in [0, 1), got {self.drop_path}")

    @property
    def patch_dim(self) -> int:
        return self.layout.patch_dim(self.channels)

    def with_preset(self, name: str) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; expected one of {sorted(PRESETS)}")
        return replace(self, **PRESETS[name])


# ---------------------------------------------------------------------------
# Positional embeddings
# ---------------------------------------------------------------------------


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_3d(layout: TokenLayout, dim: int) -> np.ndarray:
    """(total, dim) table; channels split between the t, h and w axes."""
    d_hw = (dim // 3) // 2 * 2
    d_t = dim - 2 * d_hw
    t, h, w = np.meshgrid(
        np.arange(layout.t_tokens), np.arange(layout.h_tokens), np.arange(layout.w_tokens), indexing="ij"
    )
    return np.concatenate(
        [
            _sincos_1d(d_t, t.reshape(-1)),
            _sincos_1d(d_hw, h.reshape(-1)),
            _sincos_1d(d_hw, w.reshape(-1)),
        ],
        axis=1,
    )


def init_mask_token_(tensor: torch.Tensor) -> torch.Tensor:
    return nn.init.normal_(tensor, std=MASK_TOKEN_STD)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _blocks(dim: int, depth: int, heads: int, mlp_ratio: float, drop_path: float) -> nn.ModuleList:
    rates = np.linspace(0.0, drop_path, depth) if depth > 1 else [drop_path]
    return nn.ModuleList(
        Block(dim, heads, mlp_ratio=mlp_ratio, qkv_bias=True, drop_path=float(rate), norm_layer=nn.LayerNorm)
        for rate in rates
    )


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


class TransformerModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frozen = False
        self.patch_embed = nn.Linear(config.patch_dim, config.embed_dim)
        pos = torch.from_numpy(sincos_pos_embed_3d(config.layout, config.embed_dim)).float()
        self.register_buffer("pos_embed", pos.unsqueeze(0))
        self.blocks = _blocks(config.embed_dim, config.depth, config.heads, config.mlp_ratio, config.drop_path)
        self.norm = nn.LayerNorm(config.embed_dim)
        self.apply(_init_weights)

    @property
    def layout(self) -> TokenLayout:
        return self.config.layout

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def train(self, mode: bool = True) -> "TransformerModel":
        return super().train(mode and not self.frozen)

    def forward(self, tokens: torch.Tensor, index: torch.Tensor | None = None) -> torch.Tensor:
        """(B, n, patch_dim) tokens at positions ``index`` (B, n) -> (B, n, embed_dim)."""
        x = self.patch_embed(tokens)
        if index is None:
            x = x + self.pos_embed
        else:
            pos = self.pos_embed.expand(x.shape[0], -1, -1)
            x = x + torch.gather(pos, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def seeded_build(seed: int, build):  # type: ignore[no-untyped-def]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def init_model(config: ModelConfig, seed: int) -> TransformerModel:
    return seeded_build(seed, lambda: TransformerModel(config))


def copy_weights(model: TransformerModel) -> TransformerModel:
    """Fresh trainable model carrying ``model``'s weights; ``model`` itself is untouched."""
    clone = init_model(model.config, seed=0).to(dtype=next(model.parameters()).dtype)
    clone.load_state_dict(model.state_dict())
    return clone


def freeze(model: TransformerModel) -> TransformerModel:
    for param in model.parameters():
        param.requires_grad_(False)
    model.frozen = True
    model.eval()
    return model


def frozen_copy(model: TransformerModel) -> TransformerModel:
    return freeze(copy.deepcopy(model))


def _check_index(index: torch.Tensor, total: int, what: str) -> None:
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= total):
        raise MaskError(f"{what} index out of range [0, {total})")


def encode(model: TransformerModel, visible_tokens: torch.Tensor, visible_index: torch.Tensor | None = None) -> torch.Tensor:
    if visible_tokens.shape[-1] != model.config.patch_dim:
        raise ModalityError(
            f"{model.config.modality} model expects {model.config.patch_dim}-dim patch tokens, "
            f"got {visible_tokens.shape[-1]}"
        )
    if visible_index is None:
        if visible_tokens.shape[-2] != model.layout.total:
            raise MaskError(f"full encoding needs {model.layout.total} tokens, got {visible_tokens.shape[-2]}")
    else:
        if visible_index.shape != visible_tokens.shape[:-1]:
            raise MaskError(f"index shape {tuple(visible_index.shape)} does not match tokens {tuple(visible_tokens.shape)}")
        _check_index(visible_index, model.layout.total, "visible")
    return model(visible_tokens, visible_index)


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


class DecoderModel(nn.Module):
    """Shallow decoder: mask tokens fill the masked positions, prediction at every position."""

    def __init__(
        self,
        layout: TokenLayout,
        input_dim: int,
        output_dim: int,
        *,
        decoder_dim: int,
        depth: int,
        heads: int,
        mlp_ratio: float = 4.0,
    ):
        super().__init__()
        self.layout = layout
        self.output_dim = output_dim
        self.embed = nn.Linear(input_dim, decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, decoder_dim))
        pos = torch.from_numpy(sincos_pos_embed_3d(layout, decoder_dim)).float()
        self.register_buffer("pos_embed", pos.unsqueeze(0))
        self.blocks = _blocks(decoder_dim, depth, heads, mlp_ratio, 0.0)
        self.norm = nn.LayerNorm(decoder_dim)
        self.head = nn.Linear(decoder_dim, output_dim)
        self.apply(_init_weights)
        init_mask_token_(self.mask_token)

    def no_weight_decay(self) -> set[str]:
        return {"mask_token"}

    def forward(self, visible_features: torch.Tensor, visible_index: torch.Tensor) -> torch.Tensor:
        batch = visible_features.shape[0]
        x = self.embed(visible_features)
        full = self.mask_token.expand(batch, self.layout.total, -1).to(x.dtype)
        full = full.scatter(1, visible_index.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        full = full + self.pos_embed
        for block in self.blocks:
            full = block(full)
        return self.head(self.norm(full))


def build_decoder(config: ModelConfig, output_dim: int, seed: int) -> DecoderModel:
    return seeded_build(
        seed,
        lambda: DecoderModel(
            config.layout,
            config.embed_dim,
            output_dim,
            decoder_dim=config.decoder_dim,
            depth=config.decoder_depth,
            heads=config.decoder_heads,
            mlp_ratio=config.mlp_ratio,
        ),
    )


def decode(
    decoder: DecoderModel,
    visible_features: torch.Tensor,
    visible_index: torch.Tensor,
    masked_index: torch.Tensor,
) -> torch.Tensor:
    """Predictions at every token position, (B, total, output_dim)."""
    total = decoder.layout.total
    if visible_index.shape[1] + masked_index.shape[1] != total:
        raise MaskError(
            f"{visible_index.shape[1]} visible + {masked_index.shape[1]} masked tokens != layout total {total}"
        )
    _check_index(visible_index, total, "visible")
    _check_index(masked_index, total, "masked")
    covered = torch.zeros(visible_index.shape[0], total, dtype=torch.long)
    covered.scatter_add_(1, visible_index, torch.ones_like(visible_index))
    covered.scatter_add_(1, masked_index, torch.ones_like(masked_index))
    if not bool((covered == 1).all()):
        raise MaskError("visible and masked index sets overlap")
    return decoder(visible_features, visible_index)
