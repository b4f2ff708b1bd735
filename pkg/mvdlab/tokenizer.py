"""Token geometry, patch partitioning and tube masks.

Tokens are flattened time-major, then row, then column: token ``(tau, i, j)``
sits at index ``tau * h_tokens * w_tokens + i * w_tokens + j``. Checkpoints
depend on this order through the positional embeddings.

An image is a one-frame clip with ``pt = 1``, so the same functions serve
image and video models.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TypeVar

import numpy as np
import torch
from einops import rearrange

from .errors import ConfigError, GeometryError, MaskError

ArrayT = TypeVar("ArrayT", np.ndarray, torch.Tensor)

PATCH_NORM_EPS = 1e-6


@dataclass(frozen=True)
class TokenLayout:
    t_tokens: int
    h_tokens: int
    w_tokens: int
    pt: int
    ps: int

    def __post_init__(self) -> None:
        if min(self.t_tokens, self.h_tokens, self.w_tokens, self.pt, self.ps) <= 0:
            raise GeometryError(f"layout entries must be positive: {self}")

    @property
    def total(self) -> int:
        return self.t_tokens * self.h_tokens * self.w_tokens

    @property
    def spatial(self) -> int:
        return self.h_tokens * self.w_tokens

    @property
    def frames(self) -> int:
        return self.t_tokens * self.pt

    @property
    def height(self) -> int:
        return self.h_tokens * self.ps

    @property
    def width(self) -> int:
        return self.w_tokens * self.ps

    @property
    def is_image(self) -> bool:
        return self.t_tokens == 1 and self.pt == 1

    def patch_dim(self, channels: int) -> int:
        return self.pt * self.ps * self.ps * channels

    def token_index(self, tau: int, i: int, j: int) -> int:
        return (tau * self.h_tokens + i) * self.w_tokens + j


def layout_for(geometry: Sequence[int], pt: int, ps: int) -> TokenLayout:
    """Layout for ``geometry`` = (T, H, W) or (T, H, W, C)."""
    if len(geometry) not in (3, 4):
        raise GeometryError(f"geometry must be (T, H, W[, C]), got {tuple(geometry)}")
    t, h, w = (int(v) for v in geometry[:3])
    for axis, size, patch in (("T", t, pt), ("H", h, ps), ("W", w, ps)):
        if patch <= 0 or size <= 0:
            raise GeometryError(f"{axis}: size {size} and patch {patch} must be positive")
        if size % patch:
            raise GeometryError(f"{axis}={size} is not divisible by patch size {patch}")
    return TokenLayout(t_tokens=t // pt, h_tokens=h // ps, w_tokens=w // ps, pt=pt, ps=ps)


def image_layout(height: int, width: int, ps: int) -> TokenLayout:
    return layout_for((1, height, width), 1, ps)


# ---------------------------------------------------------------------------
# Patch partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PatchTargets:
    vectors: torch.Tensor
    normalized: bool = False

    @property
    def patch_dim(self) -> int:
        return int(self.vectors.shape[-1])


def _check_clip(clip: ArrayT, layout: TokenLayout, *, image: bool) -> None:
    spatial = tuple(clip.shape[-3:-1])
    if spatial != (layout.height, layout.width):
        raise GeometryError(f"clip is {spatial[0]}x{spatial[1]} pixels, layout expects {layout.height}x{layout.width}")
    if not image and clip.shape[-4] != layout.frames:
        raise GeometryError(f"clip has {clip.shape[-4]} frames, layout expects {layout.frames}")


def patchify(clip: ArrayT, layout: TokenLayout) -> ArrayT:
    """(..., T, H, W, C) -> (..., total, pt*ps*ps*C)."""
    _check_clip(clip, layout, image=False)
    return rearrange(
        clip,
        "... (t pt) (h ph) (w pw) c -> ... (t h w) (pt ph pw c)",
        pt=layout.pt,
        ph=layout.ps,
        pw=layout.ps,
    )


def unpatchify(vectors: ArrayT, layout: TokenLayout, channels: int) -> ArrayT:
    if vectors.shape[-2] != layout.total or vectors.shape[-1] != layout.patch_dim(channels):
        raise GeometryError(
            f"expected (..., {layout.total}, {layout.patch_dim(channels)}) patch vectors, got {tuple(vectors.shape)}"
        )
    return rearrange(
        vectors,
        "... (t h w) (pt ph pw c) -> ... (t pt) (h ph) (w pw) c",
        t=layout.t_tokens,
        h=layout.h_tokens,
        w=layout.w_tokens,
        pt=layout.pt,
        ph=layout.ps,
        pw=layout.ps,
        c=channels,
    )


def normalize_patches(vectors: torch.Tensor, eps: float = PATCH_NORM_EPS) -> torch.Tensor:
    mean = vectors.mean(dim=-1, keepdim=True)
    var = vectors.var(dim=-1, unbiased=False, keepdim=True)
    return (vectors - mean) / (var + eps) ** 0.5


def patchify_video(clip: torch.Tensor | np.ndarray, layout: TokenLayout, *, normalize: bool = False) -> PatchTargets:
    vectors = patchify(torch.as_tensor(clip), layout)
    return PatchTargets(normalize_patches(vectors) if normalize else vectors, normalized=normalize)


def patchify_image(frame: torch.Tensor | np.ndarray, layout: TokenLayout, *, normalize: bool = False) -> PatchTargets:
    """(..., H, W, C) -> (..., h*w, ps*ps*C) against an image layout."""
    if not layout.is_image:
        raise GeometryError("patchify_image needs an image layout (t_tokens = 1, pt = 1)")
    frame = torch.as_tensor(frame)
    _check_clip(frame, layout, image=True)
    return patchify_video(frame.unsqueeze(-4), layout, normalize=normalize)


# ---------------------------------------------------------------------------
# Tube masks
# ---------------------------------------------------------------------------


def masked_count(layout: TokenLayout, ratio: float) -> int:
    # Python's round() breaks ties to even.
    return int(round(ratio * layout.spatial))


@dataclass(frozen=True, eq=False)
class TubeMask:
    spatial_mask: np.ndarray
    layout: TokenLayout
    ratio: float

    @property
    def token_mask(self) -> np.ndarray:
        """Boolean (total,) mask; the spatial mask repeated for every time slice."""
        return np.tile(self.spatial_mask.reshape(-1), self.layout.t_tokens)

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.token_mask)

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.token_mask)


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio < 1.0:
        raise MaskError(f"mask ratio must lie in [0, 1), got {ratio}")


def require_trainable_ratio(layout: TokenLayout, ratio: float, name: str = "mask_ratio") -> int:
    """Masked count for a training run; it must mask at least one tube and keep one visible."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"{name} must lie in [0, 1), got {ratio}")
    count = masked_count(layout, ratio)
    grid = f"{layout.h_tokens}x{layout.w_tokens}"
    if count == 0:
        raise ConfigError(f"{name}={ratio} masks no token of the {grid} token grid; the masked loss would be empty")
    if count == layout.spatial:
        raise ConfigError(f"{name}={ratio} masks every token of the {grid} token grid; the encoder would see nothing")
    return count


def make_tube_mask(layout: TokenLayout, ratio: float, rng_seed: int | np.random.Generator) -> TubeMask:
    _check_ratio(ratio)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    flat = np.zeros(layout.spatial, dtype=bool)
    flat[rng.permutation(layout.spatial)[: masked_count(layout, ratio)]] = True
    return TubeMask(spatial_mask=flat.reshape(layout.h_tokens, layout.w_tokens), layout=layout, ratio=ratio)


def split_visible(tokens: ArrayT, mask: TubeMask) -> tuple[ArrayT, np.ndarray, np.ndarray]:
    """Drop masked tokens from ``(..., total, D)``; visible tokens keep their relative order."""
    if tokens.shape[-2] != mask.layout.total:
        raise GeometryError(f"{tokens.shape[-2]} tokens for a layout of {mask.layout.total}")
    visible = mask.visible_indices
    index = torch.as_tensor(visible) if isinstance(tokens, torch.Tensor) else visible
    return tokens[..., index, :], visible, mask.masked_indices


@dataclass(frozen=True, eq=False)
class MaskBatch:
    """Per-sample tube masks stacked for a batch; every sample masks the same count."""

    visible_index: torch.Tensor
    masked_index: torch.Tensor
    token_mask: torch.Tensor

    @classmethod
    def from_masks(cls, masks: Sequence[TubeMask]) -> "MaskBatch":
        if not masks:
            raise MaskError("cannot stack an empty list of masks")
        return cls(
            visible_index=torch.as_tensor(np.stack([m.visible_indices for m in masks]), dtype=torch.long),
            masked_index=torch.as_tensor(np.stack([m.masked_indices for m in masks]), dtype=torch.long),
            token_mask=torch.as_tensor(np.stack([m.token_mask for m in masks])),
        )


def sample_masks(layout: TokenLayout, ratio: float, rng: np.random.Generator, batch: int) -> MaskBatch:
    _check_ratio(ratio)
    return MaskBatch.from_masks([make_tube_mask(layout, ratio, rng) for _ in range(batch)])


def gather_tokens(tokens: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """(B, total, D) gathered at (B, n) -> (B, n, D)."""
    return torch.gather(tokens, 1, index.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))
