"""Block realized covariances, explained variance, jump truncation, gap estimates.

The unit interval is cut into ``K = 1/h`` blocks of ``nh`` increments.  On
block ``k`` the realized covariance is ``h^{-1} sum_i dX_i dX_i^T``, an
unbiased estimate of the block average of the spot covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InputError
from .simulate import ObservationSet
from .specmat import Spectrum, sym_eigen, sym_eigvals


def _as_int(x: float, what: str) -> int:
    k = round(x)
    if k < 1 or abs(x - k) > 1e-9 * max(1.0, abs(x)):
        raise InputError(f"{what} must be a positive integer, got {x!r}")
    return int(k)


@dataclass(frozen=True)
class BlockingScheme:
    """``n`` increments split into ``K = 1/h`` blocks of ``m = nh`` increments."""

    n: int
    h: float

    def __post_init__(self):
        if self.n < 1:
            raise InputError("n must be positive")
        if not 0 < self.h <= 1:
            raise InputError(f"block length must lie in (0, 1], got {self.h}")
        K = _as_int(1.0 / self.h, "1/h")
        m = _as_int(self.n * self.h, "n*h")
        if K * m != self.n:
            raise InputError(f"blocks of length h={self.h} do not tile n={self.n} increments")
        object.__setattr__(self, "h", 1.0 / K)

    @classmethod
    def from_count(cls, n: int, K: int) -> "BlockingScheme":
        return cls(n, 1.0 / K)

    @property
    def K(self) -> int:
        return round(1.0 / self.h)

    @property
    def m(self) -> int:
        return self.n // self.K


def valid_block_counts(n: int) -> list[int]:
    """Block counts ``K`` that tile ``n`` increments exactly."""
    return [K for K in range(1, n + 1) if n % K == 0]


@dataclass(frozen=True)
class BlockSpectrum:
    k: int
    sigma_hat: np.ndarray
    spectrum: Spectrum


class BlockSet(Sequence):
    """Realized covariances of all blocks, stored as stacked arrays.

    Indexing yields :class:`BlockSpectrum` records; the arrays
    ``sigma_hat`` (``K x d x d``), ``eigenvalues`` (``K x d``, descending)
    and ``eigenvectors`` are available for vectorized use.
    """

    def __init__(self, sigma_hat: np.ndarray, h: float, n: Optional[int] = None, vectors: bool = True):
        self.sigma_hat = np.asarray(sigma_hat, dtype=float)
        if self.sigma_hat.ndim != 3:
            raise InputError("sigma_hat must have shape (K, d, d)")
        self.h = float(h)
        self.n = n
        if vectors:
            self.eigenvalues, self.eigenvectors = sym_eigen(self.sigma_hat)
        else:
            self.eigenvalues, self.eigenvectors = sym_eigvals(self.sigma_hat), None

    def __len__(self):
        return self.sigma_hat.shape[0]

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        vec = None if self.eigenvectors is None else self.eigenvectors[k]
        return BlockSpectrum(int(k) % len(self), self.sigma_hat[k], Spectrum(self.eigenvalues[k], vec))

    @property
    def d(self) -> int:
        return self.sigma_hat.shape[-1]

    @classmethod
    def from_blocks(cls, blocks: Sequence[BlockSpectrum], h: float) -> "BlockSet":
        return cls(np.stack([b.sigma_hat for b in blocks]), h)


def as_blockset(blocks, h: Optional[float] = None) -> BlockSet:
    if isinstance(blocks, BlockSet):
        if h is not None and abs(h - blocks.h) > 1e-12:
            raise InputError(f"h={h} does not match the blocks (h={blocks.h})")
        return blocks
    if h is None:
        raise InputError("h is required when blocks are not a BlockSet")
    blocks = list(blocks)
    if not blocks:
        raise InputError("no blocks")
    return BlockSet.from_blocks(blocks, h)


def block_covariance_array(dx: np.ndarray, m: int, demean: bool = False) -> np.ndarray:
    """Realized covariances from increments ``(..., n, d)`` with ``m`` per block.

    Returns ``(..., K, d, d)``; the scaling ``h^{-1} = K`` is applied.
    """
    dx = np.asarray(dx, dtype=float)
    *lead, n, d = dx.shape
    K = n // m
    blocks = dx.reshape(*lead, K, m, d)
    if demean:
        blocks = blocks - blocks.mean(axis=-2, keepdims=True)
    return K * np.einsum("...mi,...mj->...ij", blocks, blocks)


def block_covariances(obs, scheme: BlockingScheme, demean: bool = False, vectors: bool = True) -> BlockSet:
    """Realized covariance of every block, with attached spectra."""
    dx = obs.increments if isinstance(obs, ObservationSet) else np.asarray(obs, dtype=float)
    if dx.ndim != 2:
        raise InputError("increments must be (n, d)")
    if dx.shape[0] != scheme.n:
        raise InputError(f"scheme expects n={scheme.n} increments, data has {dx.shape[0]}")
    return BlockSet(block_covariance_array(dx, scheme.m, demean), scheme.h, scheme.n, vectors)


@dataclass(frozen=True)
class ExplainedVariance:
    """Per-component totals ``sum_k h lambda_j`` and their shares.

    ``fractions`` is ``None`` when the total is zero (undefined shares).
    """

    totals: np.ndarray
    fractions: Optional[np.ndarray]

    @property
    def defined(self) -> bool:
        return self.fractions is not None


def eigen_totals(eigenvalues: np.ndarray, h: float) -> np.ndarray:
    """``sum_k h lambda_j`` for eigenvalue arrays ``(..., K, d)``."""
    return h * np.asarray(eigenvalues).sum(axis=-2)


def explained_variance(blocks, h: Optional[float] = None) -> ExplainedVariance:
    bs = as_blockset(blocks, h)
    if len(bs) == 0:
        raise InputError("no blocks")
    totals = eigen_totals(bs.eigenvalues, bs.h)
    total = totals.sum()
    if not total > 0:
        return ExplainedVariance(totals, None)
    return ExplainedVariance(totals, np.clip(totals / total, 0.0, 1.0))


def truncate_jumps(obs: ObservationSet, c_trunc: float = 4.0, exponent: float = 0.49) -> ObservationSet:
    """Zero out increments larger than ``c_trunc * s_loc * n^{-exponent}``.

    ``s_loc`` is the square root of the trace of the full-sample realized
    covariance ``sum_i dX_i dX_i^T``.
    """
    if not c_trunc > 0:
        raise InputError("c_trunc must be positive")
    if not 0 < exponent < 0.5:
        raise InputError("exponent must lie in (0, 0.5)")
    dx = obs.increments
    norms = np.sqrt(np.einsum("ij,ij->i", dx, dx))
    s_loc = math.sqrt(float(np.sum(norms**2)))
    threshold = c_trunc * s_loc * obs.n ** (-exponent)
    hit = norms > threshold
    if not np.any(hit):
        return ObservationSet(obs.times.copy(), obs.values.copy(), dict(obs.meta, truncated=[]))
    dx = dx.copy()
    dx[hit] = 0.0
    meta = dict(obs.meta, truncated=np.flatnonzero(hit).tolist(), truncation_threshold=threshold)
    return ObservationSet.from_increments(dx, meta, x0=obs.values[0])


def spot_gap_estimate(blocks, r: int, variant: str = "lambda_r", h: Optional[float] = None) -> float:
    """Minimum over blocks of ``lambda_r`` (or ``lambda_{r+1}`` with ``variant='lambda_r_plus_1'``)."""
    bs = as_blockset(blocks, h)
    d = bs.d
    if not 1 <= r <= d:
        raise InputError(f"r must satisfy 1 <= r <= d={d}")
    if variant == "lambda_r":
        j = r - 1
    elif variant == "lambda_r_plus_1":
        if r >= d:
            raise InputError("lambda_{r+1} needs r < d")
        j = r
    else:
        raise InputError(f"unknown variant {variant!r}")
    return float(np.min(bs.eigenvalues[:, j]))
