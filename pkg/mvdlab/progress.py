from __future__ import annotations

import os
from collections.abc import Iterable, Iterator
from typing import Any, TypeVar

T = TypeVar("T")

# MVDLAB_PROGRESS=0 silences bars (tests, batch jobs).
_ENABLED = os.environ.get("MVDLAB_PROGRESS", "1") != "0"


def epoch_bar(iterable: Iterable[T], *, total: int, desc: str) -> Iterator[T] | Any:
    """tqdm over epochs when tqdm is installed and bars are enabled, else a no-op bar."""
    if not _ENABLED:
        return _NoOpBar(iterable)
    try:
        from tqdm import tqdm as _tqdm  # type: ignore[import-untyped]
    except Exception:  # noqa: BLE001
        return _NoOpBar(iterable)
    return _tqdm(iterable, total=total, desc=desc, leave=False, dynamic_ncols=True)


class _NoOpBar:
    def __init__(self, iterable: Iterable[Any]):
        self._iterable = iterable

    def __iter__(self) -> Iterator[Any]:
        return iter(self._iterable)

    def set_postfix(self, *_args: Any, **_kwargs: Any) -> None:
        return None

    def close(self) -> None:
        return None
