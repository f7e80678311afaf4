"""Shared validation helpers, exceptions and seeded random streams."""

from __future__ import annotations

from typing import Optional

import numpy as np
import numpy.typing as npt

NDArrayFloat = npt.NDArray[np.float64]


class InvalidArgumentError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateComponentError(RuntimeError):
    """Raised when a mixture component collapses in every EM restart."""


class ForwardModelError(RuntimeError):
    """Raised when too many ensemble members produce non-finite predictions."""


def child_rng(seed: Optional[int], *keys: int) -> np.random.Generator:
    """Return a generator for the sub-stream ``(seed, *keys)``.

    Sub-streams are derived with :class:`numpy.random.SeedSequence` spawn keys,
    so member ``i`` of an ensemble is reproducible on its own and independent
    of the order in which members are generated.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def derive_seed(seed: Optional[int], *keys: int) -> int:
    """Integer seed of the sub-stream ``(seed, *keys)``, for passing to seeded APIs."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def as_float_array(x, name: str, ndim: Optional[int] = None) -> NDArrayFloat:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise InvalidArgumentError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")


def check_same_length(a: np.ndarray, b: np.ndarray, names: str) -> None:
    if a.shape[0] != b.shape[0]:
        raise InvalidArgumentError(f"length mismatch between {names}: {a.shape[0]} != {b.shape[0]}")
