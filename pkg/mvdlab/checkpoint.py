"""Encoder checkpoints as plain directories.

Layout::

    <ckpt>/config.txt          key=value lines (ModelConfig + layout + frozen)
    <ckpt>/params/index.txt    tensor names, one per line, in state-dict order
    <ckpt>/params/<name>.f32   uint32 LE rank, uint32 LE dims, float32 LE data
"""
from __future__ import annotations

import hashlib
import logging
import os
import shutil
from dataclasses import fields

import numpy as np
import torch
import torch.nn as nn

from .backbone import ModelConfig, TransformerModel, freeze, init_model
from .errors import CheckpointError, ConfigError, ModalityError
from .tokenizer import TokenLayout

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.txt"
PARAMS_DIR = "params"
INDEX_NAME = "index.txt"

_LAYOUT_KEYS = ("t_tokens", "h_tokens", "w_tokens", "pt", "ps")


def write_tensor(path: str, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = np.array([array.ndim, *array.shape], dtype="<u4")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(array.tobytes())


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise CheckpointError(f"{path}: truncated header")
    rank = int(np.frombuffer(data[:4], dtype="<u4")[0])
    head = 4 * (1 + rank)
    if len(data) < head:
        raise CheckpointError(f"{path}: truncated header")
    shape = tuple(int(v) for v in np.frombuffer(data[4:head], dtype="<u4"))
    body = data[head:]
    if len(body) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"{path}: {len(body)} data bytes do not match shape {shape}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).copy()


def parameter_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        array = tensor.detach().cpu().contiguous().numpy()
        digest.update(name.encode("utf-8"))
        digest.update(str(array.dtype).encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def _config_lines(model: TransformerModel) -> list[str]:
    cfg = model.config
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg) if f.name != "layout"]
    lines += [f"layout.{k}={getattr(cfg.layout, k)}" for k in _LAYOUT_KEYS]
    lines.append(f"frozen={'true' if model.frozen else 'false'}")
    return lines


def _parse_config(path: str) -> tuple[ModelConfig, bool]:
    if not os.path.exists(path):
        raise CheckpointError(f"missing {path}")
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"{path}: malformed line {line!r}")
            raw[key.strip()] = value.strip()
    try:
        layout = TokenLayout(**{k: int(raw.pop(f"layout.{k}")) for k in _LAYOUT_KEYS})
        frozen = raw.pop("frozen", "false") == "true"
        kwargs: dict[str, object] = {}
        for f in fields(ModelConfig):
            if f.name == "layout":
                continue
            value = raw.pop(f.name)
            if f.name == "modality":
                kwargs[f.name] = value
            elif f.name in ("mlp_ratio", "drop_path"):
                kwargs[f.name] = float(value)
            else:
                kwargs[f.name] = int(value)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing key {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if raw:
        raise CheckpointError(f"{path}: unknown keys {sorted(raw)}")
    try:
        return ModelConfig(layout=layout, **kwargs), frozen  # type: ignore[arg-type]
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def save_checkpoint(model: TransformerModel, path: str) -> None:
    params_dir = os.path.join(path, PARAMS_DIR)
    if os.path.isdir(params_dir):
        shutil.rmtree(params_dir)
    os.makedirs(params_dir)
    state = model.state_dict()
    for name, tensor in state.items():
        write_tensor(os.path.join(params_dir, f"{name}.f32"), tensor.detach().cpu().numpy())
    with open(os.path.join(params_dir, INDEX_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(state) + "\n")
    with open(os.path.join(path, CONFIG_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(_config_lines(model)) + "\n")
    logger.info("saved %s checkpoint with %d tensors to %s", model.config.modality, len(state), path)


def load_checkpoint(path: str, *, modality: str | None = None) -> TransformerModel:
    config, frozen = _parse_config(os.path.join(path, CONFIG_NAME))
    if modality is not None and config.modality != modality:
        raise ModalityError(f"{path} holds a {config.modality} model, expected {modality}")
    index_path = os.path.join(path, PARAMS_DIR, INDEX_NAME)
    if not os.path.exists(index_path):
        raise CheckpointError(f"missing {index_path}")
    with open(index_path, "r", encoding="utf-8") as f:
        names = [line.strip() for line in f if line.strip()]

    model = init_model(config, seed=0)
    expected = model.state_dict()
    if len(names) != len(expected) or set(names) != set(expected):
        raise CheckpointError(
            f"{path}: index lists {len(names)} tensors, model has {len(expected)}"
        )
    state: dict[str, torch.Tensor] = {}
    for name in names:
        array = read_tensor(os.path.join(path, PARAMS_DIR, f"{name}.f32"))
        if tuple(array.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {array.shape}, config implies {tuple(expected[name].shape)}"
            )
        state[name] = torch.from_numpy(array)
    model.load_state_dict(state)
    return freeze(model) if frozen else model


def load_teacher(path: str, modality: str) -> TransformerModel:
    return freeze(load_checkpoint(path, modality=modality))
