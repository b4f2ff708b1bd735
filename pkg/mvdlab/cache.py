from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass

import torch

from .checkpoint import read_tensor, write_tensor

logger = logging.getLogger(__name__)


def cache_key(*parts: str) -> str:
    return hashlib.sha256(":".join(parts).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheConfig:
    cache_dir: str | None = None


class TargetCache:
    """Frozen-teacher targets keyed by (teacher hash, corpus fingerprint, kind).

    Entries live in memory; with ``cache_dir`` set they are also written in the
    checkpoint tensor format so later runs can skip the teacher forward pass.
    """

    def __init__(self, cfg: CacheConfig | None = None):
        self.cfg = cfg or CacheConfig()
        self._mem: dict[str, torch.Tensor] = {}
        if self.cfg.cache_dir:
            os.makedirs(self.cfg.cache_dir, exist_ok=True)

    def _path_for_key(self, key: str) -> str | None:
        if not self.cfg.cache_dir:
            return None
        return os.path.join(self.cfg.cache_dir, f"{key}.f32")

    def get(self, key: str) -> torch.Tensor | None:
        if key in self._mem:
            return self._mem[key]
        path = self._path_for_key(key)
        if path is None or not os.path.exists(path):
            return None
        try:
            tensor = torch.from_numpy(read_tensor(path))
        except Exception:  # noqa: BLE001
            logger.warning("ignoring unreadable cache entry %s", path)
            return None
        self._mem[key] = tensor
        return tensor

    def set(self, key: str, tensor: torch.Tensor) -> None:
        tensor = tensor.detach()
        self._mem[key] = tensor
        path = self._path_for_key(key)
        if path is None:
            return
        tmp = f"{path}.tmp"
        write_tensor(tmp, tensor.cpu().numpy())
        os.replace(tmp, path)

    def get_or_compute(self, key: str, compute) -> torch.Tensor:  # type: ignore[no-untyped-def]
        cached = self.get(key)
        if cached is not None:
            return cached
        tensor = compute()
        self.set(key, tensor)
        return tensor
