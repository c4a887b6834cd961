"""Exception types and small input-validation helpers shared across modules."""

import math

import numpy as np


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


class StateMachineError(RuntimeError):
    """An illegal position-state transition was requested."""


class TraceFormatError(ValueError):
    """A trace file could not be parsed.

    ``lineno`` is 1-based; ``offset`` is the byte offset of the offending line.
    """

    def __init__(self, message, lineno=None, offset=None):
        where = []
        if lineno is not None:
            where.append(f"line {lineno}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.lineno = lineno
        self.offset = offset


class CheckpointError(ValueError):
    """A checkpoint header is inconsistent with its payload or with the model."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


def check_token_array(tokens, name="tokens"):
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"{name} must hold integer token ids")
    return arr.astype(np.int64)


def check_probability(value, name, *, open_interval=False):
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite")
    if open_interval:
        if not 0.0 < value < 1.0:
            raise ValidationError(f"{name} must lie in (0, 1), got {value}")
    elif not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value:
        raise ValidationError(f"{name} must be an integer")
    value = int(value)
    if value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_random_state(seed):
    """Return a numpy Generator for ``seed`` (int, None, or an existing Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
