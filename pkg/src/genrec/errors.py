"""Exception types shared across the pipeline.

Each class carries a ``category`` used by the CLI to print a categorized
error line before exiting nonzero.
"""

from __future__ import annotations


class GenRecError(Exception):
    category = "error"


class ShapeMismatch(GenRecError, ValueError):
    category = "shape"


class EmptyAllowedSet(GenRecError, ValueError):
    category = "shape"


class NonScalarLoss(GenRecError, ValueError):
    category = "shape"


class IndexOutOfRange(GenRecError, IndexError):
    category = "index"


class EmptyInput(GenRecError, ValueError):
    category = "input"


class DimensionMismatch(GenRecError, ValueError):
    category = "shape"


class CodeOutOfRange(GenRecError, IndexError):
    category = "index"


class CollisionOverflow(GenRecError, ValueError):
    category = "codec"


class HistoryTooLong(GenRecError, ValueError):
    category = "input"


class MissingTargetModality(GenRecError, ValueError):
    category = "input"


class DuplicateSequence(GenRecError, ValueError):
    category = "trie"


class UnknownPrefix(GenRecError, KeyError):
    category = "trie"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class GoldNotPermissible(GenRecError, ValueError):
    category = "trie"


class SequenceTooLong(GenRecError, ValueError):
    category = "input"


class PrefixTooLong(GenRecError, ValueError):
    category = "input"


class SequenceTooShort(GenRecError, ValueError):
    category = "input"


class BatchTooSmall(GenRecError, ValueError):
    category = "input"


class FormatError(GenRecError, ValueError):
    category = "io"


class IncompatibleCheckpoint(GenRecError, ValueError):
    category = "checkpoint"


class ConfigError(GenRecError, ValueError):
    category = "config"


class UnknownItem(GenRecError, KeyError):
    category = "input"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""
