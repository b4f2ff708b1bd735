"""Stage 2: masked feature distillation with spatial-temporal co-teaching.

The student encodes only the visible tokens of a tube-masked clip. Two separate
decoders then predict, at every masked position, the features a frozen image
teacher and a frozen video teacher compute on the full clip. The objective is
``lambda_img * L(image teacher) + lambda_vid * L(video teacher)``.

Two baselines share the same machinery: per-token distillation (no masking, an
MLP projector matches teacher features at every token) and a bootstrapped
teacher kept as an exponential moving average of the student.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from timm.layers import Mlp

from .backbone import (
    DecoderModel,
    ModelConfig,
    TransformerModel,
    build_decoder,
    copy_weights,
    decode,
    encode,
    frozen_copy,
    init_model,
    seeded_build,
)
from .cache import TargetCache, cache_key
from .checkpoint import parameter_hash
from .dataset import DEFAULT_PATCH, LabeledVideoSet, NormStats, normalized_clips
from .errors import ConfigError, FrozenModelError, GeometryError, ModalityError
from .losses import pixel_recon_loss, smooth_l1_feature_loss
from .tokenizer import (
    MaskBatch,
    TokenLayout,
    gather_tokens,
    image_layout,
    normalize_patches,
    patchify,
    require_trainable_ratio,
    sample_masks,
)
from .training import OptimSettings, TrainLog, apply_update, derive_seed, run_epochs

logger = logging.getLogger(__name__)

DECODER_ROLES = ("img", "vid", "pixel")
TARGET_NORMS = ("none", "layernorm")
LOSS_COLUMNS = ("loss_total", "loss_img", "loss_vid", "loss_pixel")
TARGET_LN_EPS = 1e-6
# ModelConfig fields that fix the parameter shapes
ARCH_FIELDS = ("channels", "embed_dim", "depth", "heads", "mlp_ratio", "decoder_dim", "decoder_depth", "decoder_heads")


@dataclass(frozen=True)
class TeacherBundle:
    image_teacher: TransformerModel | None = None
    video_teacher: TransformerModel | None = None

    def __post_init__(self) -> None:
        if self.image_teacher is None and self.video_teacher is None:
            raise ConfigError("at least one teacher is required")
        for role, teacher, modality in (
            ("image", self.image_teacher, "image"),
            ("video", self.video_teacher, "video"),
        ):
            if teacher is None:
                continue
            if teacher.config.modality != modality:
                raise ModalityError(f"{role} teacher has modality {teacher.config.modality!r}")
            if not teacher.frozen:
                raise FrozenModelError(f"{role} teacher must be frozen before distillation")

    def hashes(self) -> dict[str, str]:
        out: dict[str, str] = {}
        if self.image_teacher is not None:
            out["image_teacher"] = parameter_hash(self.image_teacher)
        if self.video_teacher is not None:
            out["video_teacher"] = parameter_hash(self.video_teacher)
        return out


@dataclass(frozen=True)
class DistillConfig(OptimSettings):
    epochs: int = 100
    lambda_img: float = 1.0
    lambda_vid: float = 1.0
    lambda_pixel: float = 1.0
    mask_ratio: float = 0.9
    smooth_l1_beta: float = 1.0
    pixel_branch: bool = False
    norm_pix_loss: bool = True
    target_norm: str = "none"
    momentum: float = 0.996
    momentum_end: float | None = None

    def __post_init__(self) -> None:
        super().__post_init__()
        if min(self.lambda_img, self.lambda_vid, self.lambda_pixel) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_img + self.lambda_vid <= 0:
            raise ConfigError("lambda_img + lambda_vid must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.smooth_l1_beta <= 0:
            raise ConfigError(f"smooth_l1_beta must be positive, got {self.smooth_l1_beta}")
        if self.target_norm not in TARGET_NORMS:
            raise ConfigError(f"target_norm must be one of {TARGET_NORMS}, got {self.target_norm!r}")
        check_momentum(self.momentum)
        if self.momentum_end is not None:
            check_momentum(self.momentum_end)

    def check_teachers(self, bundle: TeacherBundle) -> None:
        self.check_weights(has_image=bundle.image_teacher is not None, has_video=bundle.video_teacher is not None)

    def check_weights(self, *, has_image: bool, has_video: bool) -> None:
        """A weight is positive exactly when its teacher is present."""
        for name, weight, present in (
            ("image", self.lambda_img, has_image),
            ("video", self.lambda_vid, has_video),
        ):
            if not present and weight > 0:
                raise ConfigError(f"lambda_{name[:3]}={weight} but no {name} teacher was given")
            if present and weight == 0:
                raise ConfigError(f"{name} teacher given but lambda_{name[:3]} is 0")


def check_momentum(momentum: float) -> None:
    if not 0.0 < momentum < 1.0:
        raise ConfigError(f"EMA momentum must lie in (0, 1), got {momentum}")


@dataclass(frozen=True)
class DistillOutcome:
    loss_total: float
    loss_img: float | None
    loss_vid: float | None
    loss_pixel: float | None
    lambda_img: float
    lambda_vid: float

    def as_row(self) -> dict[str, float | None]:
        return {c: getattr(self, c) for c in LOSS_COLUMNS}


@dataclass(frozen=True)
class MvdTargets:
    """Teacher features at every token position, (B, total, D) per stream."""

    img: torch.Tensor | None = None
    vid: torch.Tensor | None = None

    def select(self, index: torch.Tensor) -> "MvdTargets":
        return MvdTargets(
            img=None if self.img is None else self.img[index],
            vid=None if self.vid is None else self.vid[index],
        )


@dataclass
class MvdLossTerms:
    total: torch.Tensor
    img: torch.Tensor | None
    vid: torch.Tensor | None
    pixel: torch.Tensor | None

    def outcome(self, config: DistillConfig) -> DistillOutcome:
        def _f(t: torch.Tensor | None) -> float | None:
            return None if t is None else float(t.detach())

        return DistillOutcome(
            loss_total=float(self.total.detach()),
            loss_img=_f(self.img),
            loss_vid=_f(self.vid),
            loss_pixel=_f(self.pixel),
            lambda_img=config.lambda_img,
            lambda_vid=config.lambda_vid,
        )


# ---------------------------------------------------------------------------
# Teacher targets
# ---------------------------------------------------------------------------


def _normalize_targets(features: torch.Tensor, target_norm: str) -> torch.Tensor:
    if target_norm == "layernorm":
        return F.layer_norm(features, features.shape[-1:], eps=TARGET_LN_EPS)
    return features


def _batched(clips: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (clips.unsqueeze(0), True) if clips.dim() == 4 else (clips, False)


def video_teacher_targets(clips: torch.Tensor, teacher: TransformerModel, layout: TokenLayout | None = None) -> torch.Tensor:
    """Video-teacher features of the full, unmasked token sequence."""
    if layout is not None and teacher.layout != layout:
        raise GeometryError(f"video teacher layout {teacher.layout} does not match student layout {layout}")
    batch, single = _batched(clips)
    with torch.no_grad():
        out = encode(teacher, patchify(batch, teacher.layout))
    return out[0] if single else out


def image_teacher_targets(clips: torch.Tensor, teacher: TransformerModel, layout: TokenLayout | None = None) -> torch.Tensor:
    """Image-teacher features of the front frame of every temporal patch.

    Token ``(tau, i, j)`` gets the feature of 2D patch ``(i, j)`` on frame
    ``tau * pt``; each selected frame is encoded on its own as a full image.
    """
    batch, single = _batched(clips)
    t_layout = teacher.layout
    frames, height, width = batch.shape[1:4]
    pt = layout.pt if layout is not None else DEFAULT_PATCH[0]
    if layout is not None and (
        (t_layout.h_tokens, t_layout.w_tokens, t_layout.ps) != (layout.h_tokens, layout.w_tokens, layout.ps)
    ):
        raise GeometryError(f"image teacher grid {t_layout} does not match student spatial grid {layout}")
    if t_layout != image_layout(height, width, t_layout.ps):
        raise GeometryError(f"image teacher expects {t_layout.height}x{t_layout.width} frames, got {height}x{width}")
    if frames % pt:
        raise GeometryError(f"{frames} frames are not divisible by the temporal patch size {pt}")
    front = rearrange(batch[:, ::pt], "b t h w c -> (b t) 1 h w c")
    with torch.no_grad():
        feats = encode(teacher, patchify(front, t_layout))
    out = rearrange(feats, "(b t) s d -> b (t s) d", b=batch.shape[0])
    return out[0] if single else out


def teacher_targets(
    bundle: TeacherBundle,
    clips: torch.Tensor,
    layout: TokenLayout,
    target_norm: str = "none",
    *,
    cache: TargetCache | None = None,
    data_key: str | None = None,
    chunk: int = 64,
) -> MvdTargets:
    """Targets for every clip in ``clips``; computed in chunks and cached when a cache is given."""

    def _compute(fn: Callable[..., torch.Tensor], teacher: TransformerModel) -> torch.Tensor:
        parts = [fn(clips[i : i + chunk], teacher, layout) for i in range(0, len(clips), chunk)]
        return _normalize_targets(torch.cat(parts), target_norm)

    def _stream(kind: str, fn: Callable[..., torch.Tensor], teacher: TransformerModel | None) -> torch.Tensor | None:
        if teacher is None:
            return None
        if cache is None or data_key is None:
            return _compute(fn, teacher)
        key = cache_key(parameter_hash(teacher), data_key, kind, target_norm)
        return cache.get_or_compute(key, lambda: _compute(fn, teacher)).to(clips.dtype)

    return MvdTargets(
        img=_stream("img", image_teacher_targets, bundle.image_teacher),
        vid=_stream("vid", video_teacher_targets, bundle.video_teacher),
    )


def data_fingerprint(clips: torch.Tensor) -> str:
    return hashlib.sha256(clips.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# Masked video distillation
# ---------------------------------------------------------------------------


def role_seed(root: int, role: str) -> int:
    seq = np.random.SeedSequence(derive_seed(root, "decoder"), spawn_key=(DECODER_ROLES.index(role),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def build_decoders(student_config: ModelConfig, bundle: TeacherBundle, config: DistillConfig) -> nn.ModuleDict:
    decoders = nn.ModuleDict()
    if bundle.image_teacher is not None:
        decoders["img"] = build_decoder(student_config, bundle.image_teacher.embed_dim, role_seed(config.seed, "img"))
    if bundle.video_teacher is not None:
        decoders["vid"] = build_decoder(student_config, bundle.video_teacher.embed_dim, role_seed(config.seed, "vid"))
    if config.pixel_branch:
        decoders["pixel"] = build_decoder(student_config, student_config.patch_dim, role_seed(config.seed, "pixel"))
    return decoders


def compute_mvd_loss(
    student: TransformerModel,
    decoders: nn.ModuleDict,
    bundle: TeacherBundle,
    clips: torch.Tensor,
    masks: MaskBatch,
    config: DistillConfig,
    targets: MvdTargets | None = None,
) -> MvdLossTerms:
    for name, weight, teacher in (
        ("image", config.lambda_img, bundle.image_teacher),
        ("video", config.lambda_vid, bundle.video_teacher),
    ):
        if teacher is None and weight > 0:
            raise ConfigError(f"lambda for the {name} teacher is {weight} but the teacher is absent")
    if targets is None:
        targets = teacher_targets(bundle, clips, student.layout, config.target_norm)

    tokens = patchify(clips, student.layout)
    features = encode(student, gather_tokens(tokens, masks.visible_index), masks.visible_index)
    # one tube mask shared by every decoder
    total = features.new_zeros(())
    terms: dict[str, torch.Tensor | None] = {"img": None, "vid": None, "pixel": None}
    for role, weight, target in (
        ("img", config.lambda_img, targets.img),
        ("vid", config.lambda_vid, targets.vid),
    ):
        if target is None:
            continue
        prediction = decode(decoders[role], features, masks.visible_index, masks.masked_index)
        terms[role] = smooth_l1_feature_loss(prediction, target, masks.token_mask, beta=config.smooth_l1_beta)
        total = total + weight * terms[role]
    if config.pixel_branch:
        pixels = normalize_patches(tokens) if config.norm_pix_loss else tokens
        prediction = decode(decoders["pixel"], features, masks.visible_index, masks.masked_index)
        terms["pixel"] = pixel_recon_loss(prediction, pixels, masks.token_mask)
        total = total + config.lambda_pixel * terms["pixel"]
    return MvdLossTerms(total=total, img=terms["img"], vid=terms["vid"], pixel=terms["pixel"])


def mvd_step(
    student: TransformerModel,
    decoders: nn.ModuleDict,
    bundle: TeacherBundle,
    clips: torch.Tensor,
    masks: MaskBatch,
    config: DistillConfig,
    optimizer: torch.optim.Optimizer | None = None,
    lr: float = 0.0,
    targets: MvdTargets | None = None,
) -> DistillOutcome:
    """One co-teaching step; applies the update when an optimizer is given."""
    terms = compute_mvd_loss(student, decoders, bundle, clips, masks, config, targets)
    if optimizer is not None:
        apply_update(optimizer, terms.total, lr)
    return terms.outcome(config)


def _student_data(student_config: ModelConfig, corpus: LabeledVideoSet, stats: NormStats | None) -> torch.Tensor:
    if student_config.modality != "video":
        raise ModalityError("the student must be a video model")
    layout = student_config.layout
    geometry = corpus.geometry
    if (geometry[0], geometry[1], geometry[2]) != (layout.frames, layout.height, layout.width):
        raise GeometryError(f"corpus geometry {geometry} does not match the student layout {layout}")
    return torch.from_numpy(np.ascontiguousarray(normalized_clips(corpus, stats)))


def _module_list(student: TransformerModel, heads: nn.ModuleDict) -> list[tuple[str, nn.Module]]:
    return [("student", student), *((f"decoder_{k}", m) for k, m in heads.items())]


def distill(
    student_config: ModelConfig,
    bundle: TeacherBundle,
    corpus: LabeledVideoSet,
    config: DistillConfig,
    *,
    stats: NormStats | None = None,
    cache: TargetCache | None = None,
) -> tuple[TransformerModel, TrainLog]:
    config.check_teachers(bundle)
    require_trainable_ratio(student_config.layout, config.mask_ratio, "stage2 mask_ratio")
    data = _student_data(student_config, corpus, stats)
    before = bundle.hashes()

    student = init_model(student_config, derive_seed(config.seed, "init"))
    decoders = build_decoders(student_config, bundle, config)
    targets = teacher_targets(
        bundle,
        data,
        student_config.layout,
        config.target_norm,
        cache=cache or TargetCache(),
        data_key=data_fingerprint(data),
    )
    mask_rng = np.random.default_rng(derive_seed(config.seed, "mask"))
    logger.info(
        "distilling from %s, lambda_img=%.3g lambda_vid=%.3g, mask ratio %.2f%s",
        "+".join(sorted(before)),
        config.lambda_img,
        config.lambda_vid,
        config.mask_ratio,
        ", pixel branch" if config.pixel_branch else "",
    )

    def step(batch: np.ndarray, _step: int, optimizer: torch.optim.Optimizer, lr: float) -> dict[str, float | None]:
        index = torch.from_numpy(batch)
        masks = sample_masks(student_config.layout, config.mask_ratio, mask_rng, len(batch))
        outcome = mvd_step(student, decoders, bundle, data[index], masks, config, optimizer, lr, targets.select(index))
        return outcome.as_row()

    log = run_epochs(_module_list(student, decoders), len(data), config, step, columns=LOSS_COLUMNS, desc="stage2/mvd")
    if bundle.hashes() != before:
        raise FrozenModelError("teacher parameters changed during distillation")
    return student, log


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def build_projector(student_config: ModelConfig, target_dim: int, seed: int) -> Mlp:
    hidden = int(student_config.embed_dim * student_config.mlp_ratio)
    return seeded_build(seed, lambda: Mlp(student_config.embed_dim, hidden_features=hidden, out_features=target_dim))


def per_token_loss(
    student: TransformerModel,
    projector: nn.Module,
    clips: torch.Tensor,
    targets: torch.Tensor,
    beta: float = 1.0,
) -> torch.Tensor:
    """Smooth L1 between projected student features and teacher features at all tokens."""
    features = encode(student, patchify(clips, student.layout))
    everywhere = torch.ones(features.shape[:-1], dtype=torch.bool)
    return smooth_l1_feature_loss(projector(features), targets, everywhere, beta=beta)


def per_token_distill(
    student_config: ModelConfig,
    teacher: TransformerModel,
    corpus: LabeledVideoSet,
    config: DistillConfig,
    *,
    stats: NormStats | None = None,
    cache: TargetCache | None = None,
) -> tuple[TransformerModel, TrainLog]:
    if not teacher.frozen:
        raise FrozenModelError("the teacher must be frozen before distillation")
    bundle = TeacherBundle(image_teacher=teacher) if teacher.config.modality == "image" else TeacherBundle(video_teacher=teacher)
    data = _student_data(student_config, corpus, stats)
    before = parameter_hash(teacher)
    stream = teacher_targets(
        bundle,
        data,
        student_config.layout,
        config.target_norm,
        cache=cache or TargetCache(),
        data_key=data_fingerprint(data),
    )
    targets = stream.img if stream.img is not None else stream.vid
    assert targets is not None

    student = init_model(student_config, derive_seed(config.seed, "init"))
    projector = build_projector(student_config, teacher.embed_dim, derive_seed(config.seed, "decoder"))
    logger.info("per-token distillation from the %s teacher", teacher.config.modality)

    def step(batch: np.ndarray, _step: int, optimizer: torch.optim.Optimizer, lr: float) -> dict[str, float | None]:
        index = torch.from_numpy(batch)
        loss = per_token_loss(student, projector, data[index], targets[index], beta=config.smooth_l1_beta)
        apply_update(optimizer, loss, lr)
        return {"loss": float(loss.detach())}

    log = run_epochs([("student", student), ("projector", projector)], len(data), config, step, desc="stage2/per-token")
    if parameter_hash(teacher) != before:
        raise FrozenModelError("teacher parameters changed during distillation")
    return student, log


def ema_update(ema: nn.Module, online: nn.Module, momentum: float) -> None:
    """``theta_ema <- m * theta_ema + (1 - m) * theta_online``."""
    with torch.no_grad():
        for target, source in zip(ema.parameters(), online.parameters()):
            target.mul_(momentum).add_(source.detach(), alpha=1.0 - momentum)


def momentum_at(step: int, total_steps: int, start: float, end: float | None) -> float:
    if end is None or total_steps <= 0:
        return start
    progress = min(step / total_steps, 1.0)
    return end - (end - start) * (math.cos(math.pi * progress) + 1.0) / 2.0


def ema_loss(
    student: TransformerModel,
    ema: TransformerModel,
    decoder: DecoderModel,
    clips: torch.Tensor,
    masks: MaskBatch,
    config: DistillConfig,
) -> torch.Tensor:
    with torch.no_grad():
        targets = _normalize_targets(encode(ema, patchify(clips, ema.layout)), config.target_norm)
    tokens = patchify(clips, student.layout)
    features = encode(student, gather_tokens(tokens, masks.visible_index), masks.visible_index)
    prediction = decode(decoder, features, masks.visible_index, masks.masked_index)
    return smooth_l1_feature_loss(prediction, targets, masks.token_mask, beta=config.smooth_l1_beta)


def check_ema_init(init: TransformerModel, student_config: ModelConfig) -> None:
    if init.config.modality != "video" or init.layout != student_config.layout:
        raise ModalityError("the EMA initialisation must be a video encoder with the student's layout")
    mismatched = [f for f in ARCH_FIELDS if getattr(init.config, f) != getattr(student_config, f)]
    if mismatched:
        found = ", ".join(f"{f}={getattr(init.config, f)} (expected {getattr(student_config, f)})" for f in mismatched)
        raise ConfigError(f"the EMA initialisation does not match the student config: {found}")


def ema_teacher_distill(
    student_config: ModelConfig,
    corpus: LabeledVideoSet,
    config: DistillConfig,
    momentum: float | None = None,
    *,
    init: TransformerModel | None = None,
    stats: NormStats | None = None,
) -> tuple[TransformerModel, TrainLog]:
    """Bootstrapped teacher: targets come from an EMA copy of the student.

    With ``init`` the student (and so the EMA copy) starts from a pretrained
    encoder instead of from scratch.
    """
    m = config.momentum if momentum is None else momentum
    check_momentum(m)
    require_trainable_ratio(student_config.layout, config.mask_ratio, "stage2 mask_ratio")
    data = _student_data(student_config, corpus, stats)
    if init is not None:
        check_ema_init(init, student_config)
        student = copy_weights(init)
    else:
        student = init_model(student_config, derive_seed(config.seed, "init"))
    ema = frozen_copy(student)
    decoder = build_decoder(student.config, student.embed_dim, role_seed(config.seed, "vid"))
    mask_rng = np.random.default_rng(derive_seed(config.seed, "mask"))
    total_steps = config.epochs * math.ceil(len(data) / config.batch_size)
    logger.info("EMA-teacher distillation, momentum %.4g%s", m, "" if config.momentum_end is None else f" -> {config.momentum_end:.4g}")

    def step(batch: np.ndarray, step_no: int, optimizer: torch.optim.Optimizer, lr: float) -> dict[str, float | None]:
        masks = sample_masks(student.layout, config.mask_ratio, mask_rng, len(batch))
        loss = ema_loss(student, ema, decoder, data[torch.from_numpy(batch)], masks, config)
        apply_update(optimizer, loss, lr)
        ema_update(ema, student, momentum_at(step_no, total_steps, m, config.momentum_end))
        return {"loss": float(loss.detach())}

    log = run_epochs([("student", student), ("decoder", decoder)], len(data), config, step, desc="stage2/ema")
    return student, log
