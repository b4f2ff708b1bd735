"""Run configuration: a sectioned ``key = value`` file plus ``--set`` overrides.

Precedence is total: schema defaults < config file < ``--set`` flags, and among
flags the later one wins. A ``*.json`` run manifest may stand in for the config
file; its stored snapshot is replayed as-is.
"""
from __future__ import annotations

import configparser
import json
import logging
import os
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Any

from .backbone import ModelConfig
from .distill import DistillConfig
from .errors import ConfigError
from .evaluation import FinetuneConfig
from .pretrain import IMAGE_MASK_RATIO, VIDEO_MASK_RATIO, PretrainConfig
from .tokenizer import TokenLayout, image_layout, layout_for, require_trainable_ratio

logger = logging.getLogger(__name__)

_OPTIM_KEYS: dict[str, tuple[str, Any]] = {
    "batch_size": ("int", 32),
    "base_lr": ("float", 8e-3),
    "weight_decay": ("float", 0.05),
    "beta1": ("float", 0.9),
    "beta2": ("float", 0.95),
    "warmup_fraction": ("float", 0.025),
    "seed": ("int", 0),
}

SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "data": {
        "frames": ("int", 8),
        "height": ("int", 32),
        "width": ("int", 32),
        "channels": ("int", 1),
        "class_count": ("int", 2),
    },
    "model": {
        "patch_size": ("int", 8),
        "tubelet_size": ("int", 2),
        "embed_dim": ("int", 64),
        "depth": ("int", 4),
        "heads": ("int", 4),
        "mlp_ratio": ("float", 4.0),
        "decoder_dim": ("int", 32),
        "decoder_depth": ("int", 2),
        "decoder_heads": ("int", 4),
        "drop_path": ("float", 0.0),
    },
    "stage1": {
        "image_mask_ratio": ("float", IMAGE_MASK_RATIO),
        "video_mask_ratio": ("float", VIDEO_MASK_RATIO),
        "mask_ratio": ("float?", None),
        "norm_pix_loss": ("bool", True),
        "teacher_size": ("choice:desk,large", "desk"),
        "epochs": ("int", 50),
        **_OPTIM_KEYS,
    },
    "stage2": {
        "lambda_img": ("float", 1.0),
        "lambda_vid": ("float", 1.0),
        "lambda_pixel": ("float", 1.0),
        "mask_ratio": ("float", 0.9),
        "smooth_l1_beta": ("float", 1.0),
        "pixel_branch": ("bool", False),
        "norm_pix_loss": ("bool", True),
        "target_norm": ("choice:none,layernorm", "none"),
        "momentum": ("float", 0.996),
        "momentum_end": ("float?", None),
        "epochs": ("int", 100),
        **_OPTIM_KEYS,
    },
    "eval": {
        "linear_probe": ("bool", False),
        "epochs": ("int", 20),
        **_OPTIM_KEYS,
        "beta2": ("float", 0.999),
        "warmup_fraction": ("float", 0.0),
    },
}


def parse_value(section: str, key: str, raw: str) -> Any:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    kind, _ = SCHEMA[section][key]
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float?":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.rstrip('?')}") from exc
    choices = kind.split(":", 1)[1].split(",")
    if text not in choices:
        raise ConfigError(f"{section}.{key} must be one of {choices}, got {raw!r}")
    return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(
        default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    )
    sources: list[str] = field(default_factory=list)

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def set(self, section: str, key: str, raw: str) -> None:
        self.values[section][key] = parse_value(section, key, raw)

    def apply_override(self, override: str) -> None:
        """``section.key=value``"""
        name, sep, raw = override.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {override!r}")
        self.set(section, key, raw)

    def snapshot(self) -> dict[str, dict[str, Any]]:
        return {s: dict(v) for s, v in self.values.items()}

    def to_text(self) -> str:
        lines: list[str] = []
        for section, values in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {format_value(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)

    # -- typed views -------------------------------------------------------

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        d = self.values["data"]
        return (d["frames"], d["height"], d["width"], d["channels"])

    @property
    def patch(self) -> tuple[int, int]:
        return (self.values["model"]["tubelet_size"], self.values["model"]["patch_size"])

    def layout(self, modality: str) -> TokenLayout:
        t, h, w, _ = self.geometry
        pt, ps = self.patch
        return image_layout(h, w, ps) if modality == "image" else layout_for((t, h, w), pt, ps)

    def model_config(self, modality: str = "video", *, teacher: bool = False) -> ModelConfig:
        m = self.values["model"]
        config = ModelConfig(
            layout=self.layout(modality),
            modality=modality,
            channels=self.values["data"]["channels"],
            embed_dim=m["embed_dim"],
            depth=m["depth"],
            heads=m["heads"],
            mlp_ratio=m["mlp_ratio"],
            decoder_dim=m["decoder_dim"],
            decoder_depth=m["decoder_depth"],
            decoder_heads=m["decoder_heads"],
            drop_path=m["drop_path"],
        )
        # "desk" keeps the [model] section as written
        size = self.values["stage1"]["teacher_size"]
        return config.with_preset(size) if teacher and size != "desk" else config

    def _optim(self, section: str) -> dict[str, Any]:
        s = self.values[section]
        return {
            "epochs": s["epochs"],
            "batch_size": s["batch_size"],
            "base_lr": s["base_lr"],
            "weight_decay": s["weight_decay"],
            "betas": (s["beta1"], s["beta2"]),
            "warmup_fraction": s["warmup_fraction"],
            "seed": s["seed"],
        }

    def pretrain_config(self, modality: str) -> PretrainConfig:
        s = self.values["stage1"]
        ratio = s["mask_ratio"]
        if ratio is None:
            ratio = s["image_mask_ratio"] if modality == "image" else s["video_mask_ratio"]
        return PretrainConfig(mask_ratio=ratio, norm_pix_loss=s["norm_pix_loss"], **self._optim("stage1"))

    def distill_config(self) -> DistillConfig:
        s = self.values["stage2"]
        return DistillConfig(
            lambda_img=s["lambda_img"],
            lambda_vid=s["lambda_vid"],
            lambda_pixel=s["lambda_pixel"],
            mask_ratio=s["mask_ratio"],
            smooth_l1_beta=s["smooth_l1_beta"],
            pixel_branch=s["pixel_branch"],
            norm_pix_loss=s["norm_pix_loss"],
            target_norm=s["target_norm"],
            momentum=s["momentum"],
            momentum_end=s["momentum_end"],
            **self._optim("stage2"),
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(linear_probe=self.values["eval"]["linear_probe"], **self._optim("eval"))

    def validate(self) -> None:
        """Build every typed config once so range errors surface before any work starts."""
        for modality in ("image", "video"):
            self.model_config(modality)
            self.model_config(modality, teacher=True)
            ratio = self.pretrain_config(modality).mask_ratio
            require_trainable_ratio(self.layout(modality), ratio, f"stage1 {modality} mask ratio")
        require_trainable_ratio(self.layout("video"), self.distill_config().mask_ratio, "stage2.mask_ratio")
        self.finetune_config()


def _read_ini(config: RunConfig, path: str) -> None:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            config.set(section, key, raw)


def _read_manifest(config: RunConfig, path: str) -> None:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a valid run manifest ({exc})") from exc
    snapshot = payload.get("config") if isinstance(payload, dict) else None
    if not isinstance(snapshot, dict):
        raise ConfigError(f"{path}: run manifest has no config snapshot")
    for section, values in snapshot.items():
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: section {section!r} is not a mapping")
        for key, value in values.items():
            config.set(section, key, format_value(value))


def load_run_config(path: str | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    config = RunConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        if path.endswith(".json"):
            _read_manifest(config, path)
        else:
            _read_ini(config, path)
        config.sources.append(path)
    for override in overrides:
        config.apply_override(override)
        config.sources.append(f"--set {override}")
    config.validate()
    logger.debug("resolved config from %s", config.sources or ["defaults"])
    return config
