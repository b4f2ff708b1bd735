from __future__ import annotations


class MvdLabError(Exception):
    """Base class for every error raised by mvdlab."""


class ConfigError(MvdLabError, ValueError):
    pass


class ModalityError(ConfigError):
    pass


class GeometryError(MvdLabError, ValueError):
    pass


class MaskError(MvdLabError, ValueError):
    pass


class NormStatsError(MvdLabError, ValueError):
    pass


class AnalysisError(MvdLabError, ValueError):
    pass


class CorpusError(MvdLabError, RuntimeError):
    pass


class ManifestMissingError(CorpusError):
    pass


class CorruptCorpusError(CorpusError):
    pass


class ShapeMismatchError(CorpusError):
    pass


class LabelRangeError(CorpusError):
    pass


class CheckpointError(MvdLabError, RuntimeError):
    pass


class FrozenModelError(MvdLabError, RuntimeError):
    pass


class NonFiniteGradientError(MvdLabError, FloatingPointError):
    pass
