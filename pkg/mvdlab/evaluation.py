"""Downstream evaluation and cross-frame feature-similarity analysis.

Finetuning feeds every token to the encoder, mean-pools the output and trains a
linear head (optionally the head alone, as a linear probe). The similarity
analysis pools each time index over space and compares time indices by cosine
similarity; image models are run on every frame independently.
"""
from __future__ import annotations

import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, reduce

from .backbone import TransformerModel, copy_weights, encode, seeded_build
from .dataset import LabeledVideoSet, NormStats, normalized_clips
from .errors import AnalysisError, ConfigError, GeometryError, ModalityError
from .report import write_matrix_csv, write_report_csv, write_report_markdown
from .tokenizer import patchify
from .training import OptimSettings, TrainLog, apply_update, derive_seed, run_epochs

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
DIAGONAL_TOL = 1e-6
FEATURE_CHUNK = 64


# ---------------------------------------------------------------------------
# Finetuning / linear probe
# ---------------------------------------------------------------------------


class ClassifierHead(nn.Module):
    """Mean-pooled encoder features -> linear layer -> class logits."""

    def __init__(self, embed_dim: int, class_count: int):
        super().__init__()
        if class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {class_count}")
        self.embed_dim = embed_dim
        self.class_count = class_count
        self.fc = nn.Linear(embed_dim, class_count)
        nn.init.zeros_(self.fc.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() == 3:
            features = features.mean(dim=1)
        if features.shape[-1] != self.embed_dim:
            raise GeometryError(f"head expects {self.embed_dim}-dim features, got {features.shape[-1]}")
        return self.fc(features)


@dataclass(frozen=True)
class FinetuneConfig(OptimSettings):
    epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_fraction: float = 0.0
    linear_probe: bool = False


@dataclass
class FinetuneResult:
    head: ClassifierHead
    encoder: TransformerModel
    top1: float
    train_top1: float
    log: TrainLog


def build_head(embed_dim: int, class_count: int, seed: int) -> ClassifierHead:
    return seeded_build(seed, lambda: ClassifierHead(embed_dim, class_count))


def top1_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    if len(labels) == 0:
        raise ConfigError("accuracy is undefined on an empty set")
    return float((logits.argmax(dim=-1) == labels).to(torch.float64).mean())


def _check_video_encoder(encoder: TransformerModel, corpus: LabeledVideoSet) -> None:
    if encoder.config.modality != "video":
        raise ModalityError(f"finetuning needs a video encoder, got modality {encoder.config.modality!r}")
    layout = encoder.layout
    t, h, w, c = corpus.geometry
    if (t, h, w, c) != (layout.frames, layout.height, layout.width, encoder.config.channels):
        raise GeometryError(f"corpus geometry {corpus.geometry} does not match the encoder layout {layout}")


def _tensor(corpus: LabeledVideoSet, stats: NormStats | None, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(normalized_clips(corpus, stats))).to(dtype)


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def probe_features(encoder: TransformerModel, clips: torch.Tensor) -> torch.Tensor:
    """Mean-pooled full-sequence features, (N, embed_dim), no gradient."""
    was_training = encoder.training
    encoder.eval()
    parts = []
    with torch.no_grad():
        for start in range(0, len(clips), FEATURE_CHUNK):
            tokens = patchify(clips[start : start + FEATURE_CHUNK], encoder.layout)
            parts.append(encode(encoder, tokens).mean(dim=1))
    encoder.train(was_training)
    return torch.cat(parts)


def train_head(
    features: torch.Tensor,
    labels: torch.Tensor,
    class_count: int,
    config: FinetuneConfig,
) -> tuple[ClassifierHead, TrainLog]:
    """Linear head on fixed (N, D) features."""
    head = build_head(features.shape[-1], class_count, derive_seed(config.seed, "head")).to(features.dtype)

    def step(batch: np.ndarray, _step: int, optimizer: torch.optim.Optimizer, lr: float) -> dict[str, float | None]:
        index = torch.from_numpy(batch)
        loss = F.cross_entropy(head(features[index]), labels[index])
        apply_update(optimizer, loss, lr)
        return {"loss": float(loss.detach())}

    log = run_epochs([("head", head)], len(features), config, step, desc="eval/probe")
    return head, log


def finetune(
    encoder: TransformerModel,
    train: LabeledVideoSet,
    val: LabeledVideoSet,
    config: FinetuneConfig,
    *,
    stats: NormStats | None = None,
) -> FinetuneResult:
    """Train a head (and, unless probing, a copy of the encoder); report val top-1.

    The encoder passed in is never modified.
    """
    if train.class_count != val.class_count:
        raise ConfigError(f"train has {train.class_count} classes, val has {val.class_count}")
    _check_video_encoder(encoder, train)
    _check_video_encoder(encoder, val)
    dtype = _param_dtype(encoder)
    x_train, x_val = _tensor(train, stats, dtype), _tensor(val, stats, dtype)
    y_train = torch.from_numpy(train.labels.astype(np.int64))
    y_val = torch.from_numpy(val.labels.astype(np.int64))

    if config.linear_probe:
        f_train, f_val = probe_features(encoder, x_train), probe_features(encoder, x_val)
        head, log = train_head(f_train, y_train, train.class_count, config)
        with torch.no_grad():
            train_top1 = top1_accuracy(head(f_train), y_train)
            top1 = top1_accuracy(head(f_val), y_val)
        logger.info("linear probe: train top-1 %.4f, val top-1 %.4f", train_top1, top1)
        return FinetuneResult(head=head, encoder=encoder, top1=top1, train_top1=train_top1, log=log)

    model = copy_weights(encoder)
    head = build_head(model.embed_dim, train.class_count, derive_seed(config.seed, "head")).to(dtype)

    def step(batch: np.ndarray, _step: int, optimizer: torch.optim.Optimizer, lr: float) -> dict[str, float | None]:
        index = torch.from_numpy(batch)
        logits = head(encode(model, patchify(x_train[index], model.layout)))
        loss = F.cross_entropy(logits, y_train[index])
        apply_update(optimizer, loss, lr)
        return {"loss": float(loss.detach())}

    log = run_epochs([("encoder", model), ("head", head)], len(x_train), config, step, desc="eval/finetune")
    with torch.no_grad():
        train_top1 = top1_accuracy(head(probe_features(model, x_train)), y_train)
        top1 = top1_accuracy(head(probe_features(model, x_val)), y_val)
    logger.info("finetune: train top-1 %.4f, val top-1 %.4f", train_top1, top1)
    return FinetuneResult(head=head, encoder=model, top1=top1, train_top1=train_top1, log=log)


# ---------------------------------------------------------------------------
# Cross-frame similarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    values: np.ndarray
    granularity: str = "frame"  # "frame" for image models, "token" for video models
    pt: int = 1

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise AnalysisError(f"similarity matrix must be square, got {v.shape}")
        if not np.isfinite(v).all():
            raise AnalysisError("similarity matrix has non-finite entries")
        if np.abs(v - v.T).max(initial=0.0) > SYMMETRY_TOL:
            raise AnalysisError("similarity matrix is not symmetric")
        if np.abs(np.diag(v) - 1.0).max(initial=0.0) > DIAGONAL_TOL:
            raise AnalysisError("similarity matrix diagonal is not 1")
        if v.min(initial=0.0) < -1.0 or v.max(initial=0.0) > 1.0:
            raise AnalysisError("similarity entries must lie in [-1, 1]")

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    @property
    def summary(self) -> float:
        """Mean off-diagonal similarity."""
        n = self.size
        if n < 2:
            raise AnalysisError("a 1x1 similarity matrix has no off-diagonal entries")
        return float((self.values.sum() - np.trace(self.values)) / (n * (n - 1)))

    def expanded_to_frames(self) -> "SimilarityMatrix":
        """Repeat each temporal token index ``pt`` times so the axes count frames."""
        if self.granularity == "frame":
            return self
        grid = np.repeat(np.repeat(self.values, self.pt, axis=0), self.pt, axis=1)
        return SimilarityMatrix(grid, granularity="frame", pt=1)

    def to_csv(self, path: str) -> None:
        write_matrix_csv(self.values, path)


def _cosine_matrix(vectors: torch.Tensor) -> np.ndarray:
    feats = vectors.detach().to(torch.float64).cpu().numpy()
    if not np.isfinite(feats).all():
        raise AnalysisError("non-finite features")
    norms = np.linalg.norm(feats, axis=1)
    if (norms == 0).any():
        raise AnalysisError("zero-norm frame feature")
    unit = feats / norms[:, None]
    sim = unit @ unit.T
    sim = (sim + sim.T) / 2.0
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def frame_features(model: TransformerModel, clip: torch.Tensor) -> torch.Tensor:
    """One vector per time index: spatial mean of the full-sequence encoding."""
    clip = torch.as_tensor(clip).to(_param_dtype(model))
    if clip.dim() != 4:
        raise GeometryError(f"expected one (T, H, W, C) clip, got shape {tuple(clip.shape)}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        if model.config.modality == "image":
            frames = rearrange(clip, "t h w c -> t 1 h w c")
            feats = encode(model, patchify(frames, model.layout))
            pooled = reduce(feats, "t s d -> t d", "mean")
        else:
            feats = encode(model, patchify(clip.unsqueeze(0), model.layout))[0]
            pooled = reduce(feats, "(t s) d -> t d", "mean", t=model.layout.t_tokens)
    model.train(was_training)
    return pooled


def frame_similarity(model: TransformerModel, clip: torch.Tensor | np.ndarray) -> SimilarityMatrix:
    sim = _cosine_matrix(frame_features(model, torch.as_tensor(clip)))
    if model.config.modality == "image":
        return SimilarityMatrix(sim, granularity="frame", pt=1)
    return SimilarityMatrix(sim, granularity="token", pt=model.layout.pt)


def aggregate_similarity(
    model: TransformerModel,
    corpus: LabeledVideoSet | np.ndarray,
    *,
    stats: NormStats | None = None,
) -> SimilarityMatrix:
    """Entrywise mean of per-clip matrices, accumulated in clip order."""
    clips = normalized_clips(corpus, stats) if isinstance(corpus, LabeledVideoSet) else np.asarray(corpus)
    if len(clips) == 0:
        raise AnalysisError("cannot aggregate similarity over an empty set")
    total: np.ndarray | None = None
    first: SimilarityMatrix | None = None
    for clip in clips:
        matrix = frame_similarity(model, torch.from_numpy(np.ascontiguousarray(clip)))
        if first is None:
            first = matrix
        total = matrix.values.copy() if total is None else total + matrix.values
    assert total is not None and first is not None
    mean = total / len(clips)
    mean = (mean + mean.T) / 2.0
    np.fill_diagonal(mean, 1.0)
    return SimilarityMatrix(np.clip(mean, -1.0, 1.0), granularity=first.granularity, pt=first.pt)


def render_heatmap(matrix: SimilarityMatrix, path: str, *, title: str | None = None) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover
        raise ImportError("heatmaps need matplotlib. Install with: pip install matplotlib") from exc
    fig, ax = plt.subplots(figsize=(4, 4))
    image = ax.imshow(matrix.values, vmin=-1.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("frame" if matrix.granularity == "frame" else "temporal token")
    ax.set_ylabel(ax.get_xlabel())
    if title:
        ax.set_title(title)
    fig.colorbar(image, ax=ax, fraction=0.046)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalTask:
    name: str
    train: LabeledVideoSet
    val: LabeledVideoSet
    stats: NormStats | None = None


@dataclass
class EvalReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)
    similarity: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for model, task, top1 in self.rows:
            if not 0.0 <= top1 <= 1.0:
                raise ConfigError(f"accuracy {top1} for {model}/{task} is outside [0, 1]")

    def best_by_task(self) -> dict[str, str]:
        """Per-task argmax; ties go to the model listed first."""
        best: dict[str, tuple[str, float]] = {}
        for model, task, top1 in self.rows:
            if task not in best or top1 > best[task][1]:
                best[task] = (model, top1)
        return {task: model for task, (model, _) in best.items()}

    def to_csv(self, path: str) -> None:
        write_report_csv(self.rows, path)

    def to_markdown(self, path: str) -> None:
        write_report_markdown(self.rows, self.best_by_task(), path, self.similarity or None)


def compare_report(
    students: Sequence[tuple[str, TransformerModel]],
    tasks: Sequence[EvalTask],
    config: FinetuneConfig,
    *,
    similarity_set: LabeledVideoSet | None = None,
    similarity_stats: NormStats | None = None,
) -> EvalReport:
    """Finetune every student on every task; one row per pair, students outer."""
    if not students:
        raise ConfigError("compare_report needs at least one student")
    if not tasks:
        raise ConfigError("compare_report needs at least one task")
    report = EvalReport()
    for name, encoder in students:
        for task in tasks:
            result = finetune(encoder, task.train, task.val, config, stats=task.stats)
            report.rows.append((name, task.name, result.top1))
            logger.info("%s on %s: top-1 %.4f", name, task.name, result.top1)
        if similarity_set is not None:
            report.similarity[name] = aggregate_similarity(encoder, similarity_set, stats=similarity_stats).summary
    return report
