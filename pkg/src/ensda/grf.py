"""Stationary 2D Gaussian random fields with anisotropic Gaussian covariance.

Fields are sampled by circulant embedding of the covariance on a periodic
grid padded to the next power of two at least twice each dimension. Small
grids whose embedding is not nonnegative definite fall back to an
eigendecomposition of the dense covariance matrix.

Grid convention: a field of size ``nx * ny`` is stored as an array of shape
``(nx, ny)``; axis 0 runs along x and axis 1 along y, and the flat
``values`` vector is the row-major ravel of that array.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np

from ensda.utils import InvalidArgumentError, NDArrayFloat, child_rng

_CLIP_TOL = 1e-8
_DENSE_FALLBACK_MAX = 64


@dataclass(frozen=True)
class CovarianceSpec:
    """Squared-exponential covariance ``sigma**2 * exp(-(dx/len_x)**2 - (dy/len_y)**2)``.

    Lengths are in gridblocks.
    """

    sigma: float
    len_x: float
    len_y: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.len_x > 0 and self.len_y > 0):
            raise InvalidArgumentError(
                f"sigma, len_x and len_y must be positive, got {self.sigma}, {self.len_x}, {self.len_y}"
            )

    def __call__(self, dx, dy):
        dx = np.asarray(dx, dtype=np.float64)
        dy = np.asarray(dy, dtype=np.float64)
        return self.sigma**2 * np.exp(-((dx / self.len_x) ** 2) - (dy / self.len_y) ** 2)


@dataclass
class Field:
    nx: int
    ny: int
    values: NDArrayFloat

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != self.nx * self.ny:
            raise InvalidArgumentError(
                f"field has {self.values.size} values, expected {self.nx}*{self.ny}"
            )

    def as_grid(self) -> NDArrayFloat:
        return self.values.reshape(self.nx, self.ny)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.nx},{self.ny}\n")
            np.savetxt(fh, self.values, fmt="%.17g")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Field":
        with open(path, "r", encoding="utf-8") as fh:
            nx, ny = (int(t) for t in fh.readline().strip().split(","))
            values = np.loadtxt(fh, dtype=np.float64, ndmin=1)
        return cls(nx, ny, values)


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


class _CirculantSampler:
    """Precomputed square-root spectrum for one (grid, covariance) pair."""

    def __init__(self, nx: int, ny: int, cov: CovarianceSpec):
        self.nx, self.ny = nx, ny
        mx, my = _next_pow2(2 * nx), _next_pow2(2 * ny)
        ix = np.arange(mx)
        iy = np.arange(my)
        dx = np.minimum(ix, mx - ix)
        dy = np.minimum(iy, my - iy)
        base = cov(dx[:, None], dy[None, :])
        lam = np.fft.fft2(base).real
        neg = lam < 0
        if neg.any():
            if -lam[neg].sum() >= _CLIP_TOL * lam[lam > 0].sum():
                raise _EmbeddingNotPSD()
            lam[neg] = 0.0
        self.shape = (mx, my)
        self.sqrt_spec = np.sqrt(lam / (mx * my))

    def sample(self, rng: np.random.Generator) -> NDArrayFloat:
        eps = rng.standard_normal(self.shape) + 1j * rng.standard_normal(self.shape)
        full = np.fft.fft2(self.sqrt_spec * eps).real
        return full[: self.nx, : self.ny]


class _DenseSampler:
    def __init__(self, nx: int, ny: int, cov: CovarianceSpec):
        self.nx, self.ny = nx, ny
        gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        gx, gy = gx.ravel(), gy.ravel()
        c = cov(gx[:, None] - gx[None, :], gy[:, None] - gy[None, :])
        w, v = np.linalg.eigh(c)
        w = np.clip(w, 0.0, None)
        self.factor = v * np.sqrt(w)

    def sample(self, rng: np.random.Generator) -> NDArrayFloat:
        xi = rng.standard_normal(self.factor.shape[1])
        return (self.factor @ xi).reshape(self.nx, self.ny)


class _EmbeddingNotPSD(Exception):
    pass


def _make_sampler(nx: int, ny: int, cov: CovarianceSpec):
    if nx < 2 or ny < 2:
        raise InvalidArgumentError(f"grid dimensions must be >= 2, got {nx}x{ny}")
    try:
        return _CirculantSampler(nx, ny, cov)
    except _EmbeddingNotPSD:
        if nx <= _DENSE_FALLBACK_MAX and ny <= _DENSE_FALLBACK_MAX:
            return _DenseSampler(nx, ny, cov)
        raise InvalidArgumentError(
            "circulant embedding is not nonnegative definite for this covariance; "
            "grid too large for the dense fallback"
        ) from None


def simulate_field(nx: int, ny: int, cov: CovarianceSpec, seed: int) -> Field:
    """Draw one zero-mean stationary Gaussian field realization.

    Parameters
    ----------
    nx, ny : int
        Grid dimensions (>= 2).
    cov : CovarianceSpec
        Covariance model.
    seed : int
        Seed; identical arguments give bitwise-identical fields.
    """
    sampler = _make_sampler(nx, ny, cov)
    return Field(nx, ny, sampler.sample(child_rng(seed)))


def simulate_ensemble(n_members: int, nx: int, ny: int, cov: CovarianceSpec, seed: int) -> List[Field]:
    """Draw ``n_members`` independent realizations.

    Member ``i`` uses the sub-stream ``(seed, i)`` and is therefore reproducible
    independently of the other members.
    """
    if n_members < 2:
        raise InvalidArgumentError(f"n_members must be >= 2, got {n_members}")
    sampler = _make_sampler(nx, ny, cov)
    return [Field(nx, ny, sampler.sample(child_rng(seed, i))) for i in range(n_members)]


def fields_to_matrix(fields: List[Field]) -> NDArrayFloat:
    """Stack fields as columns of an ``(nx*ny, n_members)`` matrix."""
    return np.column_stack([f.values for f in fields])
