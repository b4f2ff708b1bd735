"""Tiny geometry shared by the tests: T=4, H=W=8, pt=2, ps=4 -> 8 tokens."""
from __future__ import annotations

import os

os.environ.setdefault("MVDLAB_PROGRESS", "0")

import torch  # noqa: E402

from mvdlab.backbone import ModelConfig, TransformerModel, freeze, init_model  # noqa: E402
from mvdlab.dataset import TASKS, LabeledVideoSet  # noqa: E402
from mvdlab.tokenizer import TokenLayout, image_layout, layout_for  # noqa: E402

TINY_GEOMETRY = (4, 8, 8, 1)
TINY_PATCH = (2, 4)


def tiny_layout(modality: str = "video") -> TokenLayout:
    t, h, w, _ = TINY_GEOMETRY
    pt, ps = TINY_PATCH
    return image_layout(h, w, ps) if modality == "image" else layout_for((t, h, w), pt, ps)


def tiny_config(modality: str = "video", dim: int = 8, depth: int = 2, **overrides) -> ModelConfig:
    return ModelConfig(
        layout=tiny_layout(modality),
        modality=modality,
        channels=1,
        embed_dim=dim,
        depth=depth,
        heads=2,
        decoder_dim=8,
        decoder_depth=1,
        decoder_heads=2,
        **overrides,
    )


def tiny_corpus(task: str = "spatial", n: int = 8, seed: int = 0, split: str = "train") -> LabeledVideoSet:
    return TASKS[task](seed, n, TINY_GEOMETRY, 2, patch=TINY_PATCH, split=split)


def frozen_teacher(modality: str, seed: int, dim: int = 8) -> TransformerModel:
    return freeze(init_model(tiny_config(modality, dim=dim), seed))


def to_double(*modules: torch.nn.Module) -> None:
    for module in modules:
        module.double()
