"""Synthetic labeled video corpora and their on-disk format.

Two generators stand in for the usual pair of downstream benchmarks:

- the *spatial* task, where the label is the sprite's shape and a single
  frame is enough to classify a clip;
- the *temporal* task, where every class shows the same sprites at the same
  positions and only the direction of motion carries the label.

Sprites live on a torus: translation wraps around the frame edges, so the
pixel-value histogram of a frame depends on the sprite shape only.

Corpus directory layout::

    manifest.txt     class_count=<int>
                     split=<train|val>
                     clip_<idx> label=<int> shape=<T>x<H>x<W>x<C>
    clip_<idx>.f32   little-endian float32, T-major then H, W, C
    norm.txt         mean_<c>=<float> / std_<c>=<float> per channel
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    CorruptCorpusError,
    GeometryError,
    LabelRangeError,
    ManifestMissingError,
    NormStatsError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
NORM_NAME = "norm.txt"
SHAPES = ("square", "cross", "triangle", "ring")
# right, left, down, up as (dy, dx)
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))
DEFAULT_PATCH = (2, 8)
_SUPERSAMPLE = 4

Geometry = tuple[int, int, int, int]


@dataclass(frozen=True, eq=False)
class LabeledVideoSet:
    clips: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self) -> None:
        if self.class_count < 1:
            raise LabelRangeError(f"class_count must be positive, got {self.class_count}")
        if self.clips.ndim != 5:
            raise ShapeMismatchError(f"clips must be N x T x H x W x C, got shape {self.clips.shape}")
        if len(self.labels) != len(self.clips):
            raise ShapeMismatchError(f"{len(self.labels)} labels for {len(self.clips)} clips")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelRangeError(
                f"labels must lie in [0, {self.class_count}), got range "
                f"[{int(self.labels.min())}, {int(self.labels.max())}]"
            )
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be train or val, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def geometry(self) -> Geometry:
        _, t, h, w, c = self.clips.shape
        return (t, h, w, c)

    def equals(self, other: "LabeledVideoSet") -> bool:
        return (
            self.class_count == other.class_count
            and self.split == other.split
            and self.clips.shape == other.clips.shape
            and np.array_equal(self.clips, other.clips)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.mean) != len(self.std):
            raise NormStatsError("mean and std must have one entry per channel")
        if any(not s > 0.0 for s in self.std):
            raise NormStatsError(f"std must be positive in every channel, got {self.std}")


def validate_geometry(geometry: Sequence[int], *, patch: tuple[int, int] = DEFAULT_PATCH) -> Geometry:
    if len(geometry) != 4:
        raise GeometryError(f"geometry must be (T, H, W, C), got {tuple(geometry)}")
    t, h, w, c = (int(v) for v in geometry)
    pt, ps = patch
    if min(t, h, w, c) <= 0:
        raise GeometryError(f"geometry entries must be positive, got {(t, h, w, c)}")
    if c not in (1, 3):
        raise GeometryError(f"C must be 1 or 3, got {c}")
    if t % pt:
        raise GeometryError(f"T={t} is not divisible by the temporal patch size {pt}")
    if h % ps:
        raise GeometryError(f"H={h} is not divisible by the spatial patch size {ps}")
    if w % ps:
        raise GeometryError(f"W={w} is not divisible by the spatial patch size {ps}")
    return (t, h, w, c)


def _check_class_count(class_count: int) -> None:
    if not 1 <= class_count <= len(SHAPES):
        raise ValueError(f"class_count must be in [1, {len(SHAPES)}], got {class_count}")


def sprite_size(height: int, width: int) -> int:
    return max(3, min(height, width) // 3)


def render_sprite(shape: str, size: int) -> np.ndarray:
    """Antialiased sprite in [0, 1], rendered by box-filtering a supersampled mask."""
    n = size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n - 0.5
    v, u = np.meshgrid(coords, coords, indexing="ij")
    if shape == "square":
        mask = (np.abs(u) <= 0.45) & (np.abs(v) <= 0.45)
    elif shape == "cross":
        mask = ((np.abs(u) <= 0.15) & (np.abs(v) <= 0.45)) | ((np.abs(v) <= 0.15) & (np.abs(u) <= 0.45))
    elif shape == "triangle":
        mask = (v >= -0.45) & (v <= 0.45) & (np.abs(u) <= (v + 0.45) * 0.5)
    elif shape == "ring":
        r = np.sqrt(u * u + v * v)
        mask = (r >= 0.25) & (r <= 0.45)
    else:
        raise ValueError(f"unknown sprite shape {shape!r}")
    return mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))


def _canvas(shape: str, height: int, width: int) -> np.ndarray:
    canvas = np.zeros((height, width), dtype=np.float64)
    sprite = render_sprite(shape, sprite_size(height, width))
    canvas[: sprite.shape[0], : sprite.shape[1]] = sprite
    return canvas


def _frames(canvas: np.ndarray, offsets: np.ndarray, channels: int) -> np.ndarray:
    frames = np.stack([np.roll(canvas, (int(dy), int(dx)), axis=(0, 1)) for dy, dx in offsets])
    return np.repeat(frames[..., None], channels, axis=-1).astype(np.float32)


def motion_step(geometry: Sequence[int]) -> int:
    t, _, w, _ = geometry
    return max(1, w // (2 * t))


def render_motion_clip(
    shape: str,
    x0: int,
    y0: int,
    direction: int | None,
    geometry: Sequence[int],
    step: int | None = None,
) -> np.ndarray:
    """Render one clip; ``direction=None`` gives a static clip."""
    t, h, w, c = geometry
    step = motion_step(geometry) if step is None else step
    dy, dx = (0, 0) if direction is None else DIRECTIONS[direction]
    times = np.arange(t)
    offsets = np.stack([y0 + dy * step * times, x0 + dx * step * times], axis=1)
    return _frames(_canvas(shape, h, w), offsets, c)


def gen_spatial_task(
    seed: int,
    n: int,
    geometry: Sequence[int],
    class_count: int,
    *,
    patch: tuple[int, int] = DEFAULT_PATCH,
    split: str = "train",
) -> LabeledVideoSet:
    """Label = sprite shape; frames differ only by a +/-1 pixel positional jitter."""
    t, h, w, c = validate_geometry(geometry, patch=patch)
    _check_class_count(class_count)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % class_count).astype(np.int64)
    canvases = {k: _canvas(SHAPES[k], h, w) for k in range(class_count)}
    clips = np.empty((n, t, h, w, c), dtype=np.float32)
    for i, label in enumerate(labels):
        y0, x0 = rng.integers(0, (h, w))
        jitter = rng.integers(-1, 2, size=(t, 2))
        clips[i] = _frames(canvases[int(label)], jitter + np.array([y0, x0]), c)
    return LabeledVideoSet(clips=clips, labels=labels, class_count=class_count, split=split)


def gen_temporal_task(
    seed: int,
    n: int,
    geometry: Sequence[int],
    class_count: int,
    *,
    patch: tuple[int, int] = DEFAULT_PATCH,
    split: str = "train",
) -> LabeledVideoSet:
    """Label = direction of motion.

    Clips are generated in blocks of ``class_count``: every clip in a block shares
    sprite shape and start position and only the direction differs, so the pooled
    frames of each class match.
    """
    t, h, w, c = validate_geometry(geometry, patch=patch)
    _check_class_count(class_count)
    rng = np.random.default_rng(seed)
    step = motion_step((t, h, w, c))
    clips = np.empty((n, t, h, w, c), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for start in range(0, n, class_count):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        y0, x0 = rng.integers(0, (h, w))
        for label in range(min(class_count, n - start)):
            clips[start + label] = render_motion_clip(shape, int(x0), int(y0), label, (t, h, w, c), step)
            labels[start + label] = label
    order = rng.permutation(n)
    return LabeledVideoSet(clips=clips[order], labels=labels[order], class_count=class_count, split=split)


def gen_static_task(
    seed: int,
    n: int,
    geometry: Sequence[int],
    class_count: int,
    *,
    patch: tuple[int, int] = DEFAULT_PATCH,
    split: str = "val",
) -> LabeledVideoSet:
    """All frames of a clip identical; label = shape. Limiting case for similarity analysis."""
    t, h, w, c = validate_geometry(geometry, patch=patch)
    _check_class_count(class_count)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % class_count).astype(np.int64)
    clips = np.empty((n, t, h, w, c), dtype=np.float32)
    for i, label in enumerate(labels):
        y0, x0 = rng.integers(0, (h, w))
        clips[i] = render_motion_clip(SHAPES[int(label)], int(x0), int(y0), None, (t, h, w, c))
    return LabeledVideoSet(clips=clips, labels=labels, class_count=class_count, split=split)


TASKS = {
    "spatial": gen_spatial_task,
    "temporal": gen_temporal_task,
    "static": gen_static_task,
}


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _shape_tag(geometry: Sequence[int]) -> str:
    return "x".join(str(int(v)) for v in geometry)


def save_corpus(corpus: LabeledVideoSet, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    tag = _shape_tag(corpus.geometry)
    lines = [f"class_count={corpus.class_count}", f"split={corpus.split}"]
    for idx, (clip, label) in enumerate(zip(corpus.clips, corpus.labels)):
        clip.astype("<f4").tofile(os.path.join(path, f"clip_{idx}.f32"))
        lines.append(f"clip_{idx} label={int(label)} shape={tag}")
    manifest = os.path.join(path, MANIFEST_NAME)
    tmp = f"{manifest}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest)
    logger.info("wrote %d clips to %s", len(corpus), path)


def _parse_manifest(path: str) -> tuple[int, str, list[tuple[str, int, tuple[int, ...]]]]:
    manifest = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise ManifestMissingError(f"no {MANIFEST_NAME} in {path}")
    class_count: int | None = None
    split = "train"
    entries: list[tuple[str, int, tuple[int, ...]]] = []
    with open(manifest, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                if line.startswith("class_count="):
                    class_count = int(line.split("=", 1)[1])
                elif line.startswith("split="):
                    split = line.split("=", 1)[1]
                else:
                    name, label_field, shape_field = line.split()
                    if not name.startswith("clip_") or not label_field.startswith("label="):
                        raise ValueError(line)
                    if not shape_field.startswith("shape="):
                        raise ValueError(line)
                    label = int(label_field[len("label="):])
                    shape = tuple(int(v) for v in shape_field[len("shape="):].split("x"))
                    if len(shape) != 4:
                        raise ValueError(line)
                    entries.append((name, label, shape))
            except ValueError as exc:
                raise CorruptCorpusError(f"{manifest}:{lineno}: malformed line {line!r}") from exc
    if class_count is None:
        raise CorruptCorpusError(f"{manifest}: missing class_count line")
    return class_count, split, entries


def load_corpus(path: str) -> LabeledVideoSet:
    class_count, split, entries = _parse_manifest(path)
    if not entries:
        raise CorruptCorpusError(f"{path}: manifest lists no clips")
    geometry = entries[0][2]
    clips = np.empty((len(entries), *geometry), dtype=np.float32)
    labels = np.empty(len(entries), dtype=np.int64)
    for i, (name, label, shape) in enumerate(entries):
        if shape != geometry:
            raise ShapeMismatchError(f"{name} has shape {_shape_tag(shape)}, expected {_shape_tag(geometry)}")
        if not 0 <= label < class_count:
            raise LabelRangeError(f"{name} has label {label} outside [0, {class_count})")
        clip_path = os.path.join(path, f"{name}.f32")
        if not os.path.exists(clip_path):
            raise CorruptCorpusError(f"missing clip file {clip_path}")
        expected = int(np.prod(shape)) * 4
        actual = os.path.getsize(clip_path)
        if actual != expected:
            raise CorruptCorpusError(f"{clip_path} holds {actual} bytes, expected {expected}")
        clips[i] = np.fromfile(clip_path, dtype="<f4").reshape(shape)
        labels[i] = label
    return LabeledVideoSet(clips=clips, labels=labels, class_count=class_count, split=split)


def corpus_fingerprint(path: str) -> str:
    _, _, entries = _parse_manifest(path)
    digest = hashlib.sha256()
    with open(os.path.join(path, MANIFEST_NAME), "rb") as f:
        digest.update(f.read())
    for name, _, _ in entries:
        with open(os.path.join(path, f"{name}.f32"), "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def compute_norm_stats(corpus: LabeledVideoSet) -> NormStats:
    if len(corpus) == 0:
        raise NormStatsError("cannot compute statistics of an empty corpus")
    flat = corpus.clips.reshape(-1, corpus.clips.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    for c, s in enumerate(std):
        if not s > 0.0:
            raise NormStatsError(f"channel {c} has zero variance")
    return NormStats(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))


def normalize(clip: np.ndarray, stats: NormStats) -> np.ndarray:
    if clip.shape[-1] != len(stats.mean):
        raise NormStatsError(f"clip has {clip.shape[-1]} channels, stats have {len(stats.mean)}")
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    return ((clip.astype(np.float64) - mean) / std).astype(np.float32)


def save_norm_stats(stats: NormStats, path: str) -> None:
    lines = [f"mean_{c}={m!r}" for c, m in enumerate(stats.mean)]
    lines += [f"std_{c}={s!r}" for c, s in enumerate(stats.std)]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_norm_stats(path: str) -> NormStats:
    values: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise NormStatsError(f"{path}: malformed line {line!r}")
            try:
                values[key] = float(value)
            except ValueError as exc:
                raise NormStatsError(f"{path}: malformed value in {line!r}") from exc
    channels = sum(1 for k in values if k.startswith("mean_"))
    try:
        mean = tuple(values[f"mean_{c}"] for c in range(channels))
        std = tuple(values[f"std_{c}"] for c in range(channels))
    except KeyError as exc:
        raise NormStatsError(f"{path}: missing entry {exc}") from exc
    return NormStats(mean=mean, std=std)


def normalized_clips(corpus: LabeledVideoSet, stats: NormStats | None) -> np.ndarray:
    return corpus.clips if stats is None else normalize(corpus.clips, stats)
