"""Vol-of-vol estimators and data-driven critical values.

On a coarse grid of block length ``h'`` the second differences
``D_m = S_{m+2} - 2 S_{m+1} + S_m`` of realized block covariances behave
like ``Gamma(t) int w dB'`` for a fixed kernel ``w``.  Normalized power
sums of ``||D_m||`` estimate the normed p-variation
``NV^{(p)} = int E||Gamma(t) Z||^p dt``.

Normalization.  The kernel is
``w(s) = h'^{-1} int_0^{h'} (1[s-u in I_k] - 1[s-u in I_{k-1}]) du``
(see :func:`kernel_weight`).  Its squared L2 norm is ``h'``; direct
quadrature confirms this (:func:`kernel_norm_sq`).  The default
``normalization="kernel"`` divides by ``||w||^p = h'^{p/2}``, which makes
the estimators consistent.  ``normalization="doubled"`` divides by
``(2h')^{p/2}`` instead, i.e. it assumes ``||w||^2 = 2h'``; in that
convention the estimates converge to ``2^{-p/2} NV^{(p)}``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Optional

import numpy as np
from scipy import integrate

from . import rng as _rng
from .errors import InputError
from .realized import as_blockset
from .specmat import as_symmetric, frobenius_norm, spectral_norm

NORMALIZATIONS = ("kernel", "doubled")


def kernel_weight(s, k: int, hprime: float) -> np.ndarray:
    """Closed form of the second-difference kernel ``w_k(s)``.

    Piecewise linear on ``[(k-1)h', (k+2)h']``: ``-x`` on ``[0, 1]``,
    ``2x - 3`` on ``[1, 2]`` and ``3 - x`` on ``[2, 3]`` in the variable
    ``x = s/h' - (k-1)``; zero elsewhere.
    """
    x = np.asarray(s, dtype=float) / hprime - (k - 1)
    return np.select([(x >= 0) & (x < 1), (x >= 1) & (x < 2), (x >= 2) & (x <= 3)], [-x, 2 * x - 3, 3 - x], 0.0)


def kernel_weight_quadrature(s: float, k: int, hprime: float) -> float:
    """``w_k(s)`` evaluated from its defining integral by adaptive quadrature."""

    def integrand(u):
        v = s - u
        return float(k * hprime <= v < (k + 1) * hprime) - float((k - 1) * hprime <= v < k * hprime)

    pts = [p for p in (s - (k + 1) * hprime, s - k * hprime, s - (k - 1) * hprime) if 0 < p < hprime]
    val, _ = integrate.quad(integrand, 0.0, hprime, points=pts or None, limit=200, epsabs=1e-14)
    return val / hprime


def kernel_norm_sq(hprime: float, k: int = 1) -> float:
    """``int w_k(s)^2 ds`` by quadrature of the closed form (equals ``h'``)."""
    lo, hi = (k - 1) * hprime, (k + 2) * hprime
    bps = [k * hprime, (k + 1) * hprime]
    val, _ = integrate.quad(lambda s: float(kernel_weight(s, k, hprime)) ** 2, lo, hi, points=bps, epsabs=1e-15, epsrel=1e-13)
    return val


# ---------------------------------------------------------------------------
# Coarse schemes


@dataclass(frozen=True)
class CoarseScheme:
    """Coarse block length ``h'``; records how it relates to the fine scheme."""

    n: int
    hprime: float
    h: Optional[float] = None
    trailing: str = "error"

    def __post_init__(self):
        if self.trailing not in ("error", "drop"):
            raise InputError("trailing must be 'error' or 'drop'")
        if not 0 < self.hprime <= 1:
            raise InputError("h' must lie in (0, 1]")
        K = round(1 / self.hprime)
        m = round(self.n * self.hprime)
        if abs(K * self.hprime - 1) > 1e-9 or abs(self.n * self.hprime - m) > 1e-9 * max(1, m) or K * m != self.n:
            raise InputError(f"h'={self.hprime} does not tile n={self.n} increments")
        if self.trailing == "error" and K % 6:
            raise InputError(f"1/h' = {K} must be divisible by 6 (use trailing='drop' to ignore leftovers)")
        if K < 6:
            raise InputError("need at least 6 coarse blocks")
        if self.h is not None and not self.h < self.hprime:
            raise InputError("the coarse block length must exceed the fine one")

    @property
    def K(self) -> int:
        return round(1 / self.hprime)

    @property
    def m(self) -> int:
        return self.n // self.K

    def diagnostics(self) -> dict:
        """The asymptotic relations ``h/h' -> 0``, ``h' n^{1/3} -> inf``, ``n h h' -> inf`` as numbers."""
        out = {"hprime_n_cuberoot": self.hprime * self.n ** (1 / 3)}
        if self.h is not None:
            out["h_over_hprime"] = self.h / self.hprime
            out["n_h_hprime"] = self.n * self.h * self.hprime
        return out


def valid_coarse_lengths(n: int, h: Optional[float] = None) -> list[float]:
    """All ``h'`` with ``n h'`` integral, ``1/h'`` divisible by 6 and ``h' > h``."""
    out = []
    for K in range(6, n + 1, 6):
        if n % K == 0 and (h is None or 1 / K > h):
            out.append(1.0 / K)
    return out


# ---------------------------------------------------------------------------
# Estimators


def second_differences(sigma_hat: np.ndarray) -> np.ndarray:
    """``D_m = S_{m+2} - 2 S_{m+1} + S_m`` for all ``m`` (shape ``(K-2, d, d)``)."""
    S = np.asarray(sigma_hat, dtype=float)
    return S[..., 2:, :, :] - 2 * S[..., 1:-1, :, :] + S[..., :-2, :, :]


def _norms(D: np.ndarray, norm: str) -> np.ndarray:
    if norm == "spectral":
        return spectral_norm(D)
    if norm == "frobenius":
        return frobenius_norm(D)
    raise InputError(f"unknown norm {norm!r}")


def _coarse(blocks, hprime, trailing, group):
    bs = as_blockset(blocks, hprime)
    K = len(bs)
    if K % group:
        if trailing != "drop":
            raise InputError(f"coarse block count {K} is not divisible by {group}")
    G = K // group
    if G < 1:
        raise InputError(f"need at least {group} coarse blocks")
    return bs, G


def _norm_const(hprime: float, power: float, normalization: str) -> float:
    if normalization == "kernel":
        return hprime ** (power / 2)
    if normalization == "doubled":
        return (2 * hprime) ** (power / 2)
    raise InputError(f"normalization must be one of {NORMALIZATIONS}")


def nv_hat(blocks, p: float, hprime: Optional[float] = None, norm: str = "spectral",
           normalization: str = "kernel", trailing: str = "error") -> float:
    """Normed p-variation estimate from non-overlapping triples of coarse blocks.

    ``(1/G) sum_k ||S_{3k+2} - 2 S_{3k+1} + S_{3k}||^p / ||w||^p`` over the
    ``G = 1/(3h')`` triples; with ``trailing='drop'`` incomplete triples at
    the end are ignored and ``G`` counts complete ones.
    """
    if p <= 0:
        raise InputError("p must be positive")
    bs, G = _coarse(blocks, hprime, trailing, 3)
    S = bs.sigma_hat[: 3 * G]
    D = S[2::3] - 2 * S[1::3] + S[0::3]
    vals = _norms(D, norm) ** p
    return float(vals.sum() / G / _norm_const(bs.h, p, normalization))


def bnv_hat(blocks, p: float, hprime: Optional[float] = None, norm: str = "spectral",
            normalization: str = "kernel", trailing: str = "error") -> float:
    """Bipower estimate ``(1/G) sum_k ||D_{6k}||^p ||D_{6k+3}||^p / ||w||^{2p}`` over sextets."""
    if p <= 0:
        raise InputError("p must be positive")
    bs, G = _coarse(blocks, hprime, trailing, 6)
    S = bs.sigma_hat[: 6 * G]
    D = second_differences(S)
    a = _norms(D[0::6], norm)
    b = _norms(D[3::6], norm)
    return float(np.sum(a**p * b**p) / G / _norm_const(bs.h, 2 * p, normalization))


@dataclass
class VolOfVolEstimates:
    p: int
    nv_p: float
    nv_2p: float
    bnv_p: float
    variance_hat: float
    flags: list = field(default_factory=list)


def estimate_volofvol(blocks, p: int, hprime: Optional[float] = None, **kw) -> VolOfVolEstimates:
    """``NV^(p)``, ``NV^(2p)``, ``BNV^(p)`` and the variance estimate ``3h'(NV^(2p) - BNV^(p))``."""
    if p not in (1, 2):
        raise InputError("p must be 1 or 2")
    bs = as_blockset(blocks, hprime)
    nv_p = nv_hat(bs, p, **kw)
    nv_2p = nv_hat(bs, 2 * p, **kw)
    bnv_p = bnv_hat(bs, p, **kw)
    var = 3 * bs.h * (nv_2p - bnv_p)
    flags = ["negative_variance"] if var < 0 else []
    return VolOfVolEstimates(p, nv_p, nv_2p, bnv_p, var, flags)


def normal_quantile(q: float) -> float:
    return NormalDist().inv_cdf(q)


def kappa_from_estimates(h: float, alpha: float, mode: str, nv: float, variance: float,
                         gap_estimate: Optional[float] = None) -> tuple[float, list]:
    """Data-driven critical value from vol-of-vol estimates.

    ``nogap``: ``(8/15) h^{1/2} (NV^(1) + sqrt(var) q)``;
    ``gap``: ``h/(3 gap) (NV^(2) + sqrt(var) q)`` with ``q = Phi^{-1}(1-alpha)``
    and ``var = 3h'(NV^(2p) - BNV^(p))`` floored at zero.
    """
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    flags = []
    if variance < 0:
        flags.append("negative_variance")
        variance = 0.0
    q = normal_quantile(1 - alpha)
    core = nv + math.sqrt(variance) * q
    if mode == "nogap":
        return (8 / 15) * math.sqrt(h) * core, flags
    if mode == "gap":
        if gap_estimate is None or not gap_estimate > 0:
            raise InputError("gap mode needs a positive spectral gap estimate")
        return h / (3 * gap_estimate) * core, flags
    raise InputError("mode must be 'gap' or 'nogap'")


@dataclass
class CalibrationReport:
    mode: str
    h: float
    hprime: float
    alpha: float
    nv1: float
    nv2: float
    nv4: float
    bnv1: float
    bnv2: float
    variance_hat: float
    kappa: float
    gap_estimate: Optional[float] = None
    flags: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate(blocks_fine, blocks_coarse, alpha: float, mode: str = "nogap", gap_estimate: Optional[float] = None,
              norm: str = "spectral", normalization: str = "kernel", trailing: str = "error") -> CalibrationReport:
    """Vol-of-vol estimates and the data-driven critical value."""
    fine = as_blockset(blocks_fine, getattr(blocks_fine, "h", None))
    coarse = as_blockset(blocks_coarse, getattr(blocks_coarse, "h", None))
    if not fine.h < coarse.h:
        raise InputError("coarse blocks must be longer than fine blocks")
    kw = dict(norm=norm, normalization=normalization, trailing=trailing)
    nv1, nv2, nv4 = (nv_hat(coarse, p, **kw) for p in (1, 2, 4))
    bnv1, bnv2 = (bnv_hat(coarse, p, **kw) for p in (1, 2))
    if mode == "nogap":
        var = 3 * coarse.h * (nv2 - bnv1)
        nv = nv1
    else:
        var = 3 * coarse.h * (nv4 - bnv2)
        nv = nv2
    kappa, flags = kappa_from_estimates(fine.h, alpha, mode, nv, var, gap_estimate)
    if flags:
        warnings.warn("negative variance estimate floored at zero", stacklevel=2)
    diag = {}
    if coarse.n is not None:
        n = coarse.n
        diag = {"h_over_hprime": fine.h / coarse.h, "hprime_n_cuberoot": coarse.h * n ** (1 / 3),
                "n_h_hprime": n * fine.h * coarse.h}
    if len(coarse) % 6:
        flags.append("trailing_blocks_dropped")
    return CalibrationReport(mode, fine.h, coarse.h, alpha, nv1, nv2, nv4, bnv1, bnv2, var, kappa,
                             gap_estimate, flags, diag)


def datadriven_kappa(blocks_fine, blocks_coarse, alpha: float, mode: str = "nogap",
                     gap_estimate: Optional[float] = None, **kw) -> float:
    return calibrate(blocks_fine, blocks_coarse, alpha, mode, gap_estimate, **kw).kappa


def rho_p_oracle(gamma_map, p: float, mc_n: int, seed: int = 0) -> float:
    """Monte Carlo estimate of ``E||Gamma Z||^p`` (spectral norm).

    ``gamma_map`` has shape ``(d', d, d)``: ``Gamma z = sum_i z_i G_i``.
    """
    G = as_symmetric(gamma_map)
    if G.ndim != 3:
        raise InputError("gamma_map must have shape (d', d, d)")
    if mc_n < 1:
        raise InputError("mc_n must be positive")
    if not np.any(G):
        return 0.0
    g = _rng.stream(seed, _rng.ORACLE)
    total = 0.0
    for start in range(0, mc_n, 1 << 16):
        m = min(1 << 16, mc_n - start)
        Z = g.standard_normal((m, G.shape[0]))
        M = np.einsum("ni,ijk->njk", Z, G)
        total += float(np.sum(spectral_norm(M) ** p))
    return total / mc_n
