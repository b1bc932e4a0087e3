"""Rank test statistic, non-asymptotic critical values, and the rank estimator.

For a candidate rank ``r`` the statistic is ``T = sum_k h lambda_{r+1}``
over the block realized covariances.  Its critical value is a bias factor
times ``(1 + delta)(A + B/delta)``, minimized over ``delta > 0``.  The
minimum is ``(sqrt(A) + sqrt(B))^2`` and is attained at ``sqrt(B/A)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InputError, NumericalError
from .realized import as_blockset, eigen_totals


@dataclass(frozen=True)
class HypothesisParams:
    """Parameters of the null hypothesis and of the level-``alpha`` test.

    ``gap`` set means the spectral-gap critical value is used.  ``holder``
    switches to the sup-norm (Hölder) variant of the concentration terms.
    """

    r: int
    beta: float = 0.5
    L: float = 1.0
    eps: float = 0.0
    gap: Optional[float] = None
    alpha: float = 0.05
    holder: bool = False

    def __post_init__(self):
        if self.r < 0:
            raise InputError("r must be non-negative")
        if not 0 < self.beta <= 1:
            raise InputError("beta must lie in (0, 1]")
        if not self.L > 0:
            raise InputError("L must be positive")
        if self.eps < 0:
            raise InputError("eps must be non-negative")
        if self.gap is not None and not self.gap > 0:
            raise InputError("gap must be positive when given")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")

    @property
    def mode(self) -> str:
        return "gap" if self.gap is not None else "nogap"


def constants_C(rho: int) -> tuple[float, float]:
    """``C_{rho,1} = (1 + 2 sqrt(log rho)) sqrt(2 rho + 4)``, ``C_{rho,2} = (1 + log rho)(rho + 4)``."""
    if rho < 1 or int(rho) != rho:
        raise InputError("rho must be an integer >= 1")
    lr = math.log(rho)
    return (1 + 2 * math.sqrt(lr)) * math.sqrt(2 * rho + 4), (1 + lr) * (rho + 4)


class CriticalValue(NamedTuple):
    kappa: float
    delta_star: float
    terms: dict


def delta_minimum(A: float, B: float) -> tuple[float, float]:
    """``min_{delta>0} (1+delta)(A + B/delta)`` and its minimizer."""
    if A <= 0 or B < 0:
        raise InputError("need A > 0 and B >= 0")
    return (math.sqrt(A) + math.sqrt(B)) ** 2, math.sqrt(B / A)


def critical_value(params: HypothesisParams, n: int, h: float, d: int) -> CriticalValue:
    r = params.r
    if not 0 <= r < d:
        raise InputError(f"r must satisfy 0 <= r < d={d}")
    if not 0 < h <= 1:
        raise InputError("h must lie in (0, 1]")
    if n < 1:
        raise InputError("n must be positive")
    C1, C2 = constants_C(d - r)
    nh = n * h
    log_a = math.log(1 / params.alpha)
    if params.holder:
        nh_c1, nh_c2, n_pow = nh**-0.5, 1.0 / nh, 1.0 / n
    else:
        nh_c1 = nh_c2 = nh**-0.5
        n_pow = n**-0.5
    hb = h**params.beta
    if params.gap is None:
        bias = params.L * hb + params.eps
        nh_term = 2 * C1 * nh_c1 + 8 * C2 * nh_c2
        n_term = 8 * log_a * n_pow
    else:
        bias = 2 * params.L**2 * hb * hb / params.gap + params.eps
        nh_term = 0.5 * (r + 4) * (C1 * nh_c1 + 4 * C2 * nh_c2)
        n_term = (2 * r + 8) * log_a * n_pow
    A = 1.0 + nh_term
    factor, delta = delta_minimum(A, n_term)
    terms = dict(mode=params.mode, holder=params.holder, bias_factor=bias, A=A, B=n_term,
                 nh_term=nh_term, n_term=n_term, C1=C1, C2=C2, factor=factor)
    return CriticalValue(bias * factor, delta, terms)


def test_statistic(blocks, r: int, h: Optional[float] = None) -> float:
    """``T_{n,h} = sum_k h lambda_{r+1}`` of the block realized covariances."""
    bs = as_blockset(blocks, h)
    d = bs.d
    if not 0 <= r < d:
        raise InputError(f"r must satisfy 0 <= r < d={d}")
    if bs.n is not None and bs.n * bs.h < r + 1 - 1e-9:
        warnings.warn("fewer than r+1 observations per block: the statistic is identically 0", stacklevel=2)
    return float(bs.h * bs.eigenvalues[:, r].sum())


@dataclass
class TestReport:
    __test__ = False  # not a pytest class

    statistic: float
    kappa: float
    reject: bool
    delta_star: float
    terms: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def run_test(blocks, params: HypothesisParams, n: int, h: Optional[float] = None) -> TestReport:
    bs = as_blockset(blocks, h)
    T = test_statistic(bs, params.r)
    kappa, delta, terms = critical_value(params, n, bs.h, bs.d)
    return TestReport(T, kappa, bool(T > kappa), delta, terms, asdict(params))


def rank_critical_values(params: HypothesisParams, n: int, h: float, d: int, rank_specific: bool = False) -> np.ndarray:
    """Critical values ``kappa^{(j)}``, ``j = 0..d-1``.

    By default every rank uses the ``r = 0`` value.  With ``rank_specific``
    each rank uses its own constants ``C_{d-j}``; the rank estimator then
    rejects the sequence unless it is non-decreasing.
    """
    if not rank_specific:
        k0 = critical_value(HypothesisParams(**{**asdict(params), "r": 0}), n, h, d).kappa
        return np.full(d, k0)
    return np.array([critical_value(HypothesisParams(**{**asdict(params), "r": j}), n, h, d).kappa for j in range(d)])


class RankEstimate(NamedTuple):
    r_hat: int
    decisions: list
    lambda_hat: np.ndarray
    kappas: np.ndarray


def _argmin_rank(lam: Sequence[float], kap: Sequence[float]) -> int:
    """Smallest minimizer of ``sum_{j>r} lam_j + sum_{j<r} kap_j``, in exact arithmetic."""
    d = len(lam)
    lam_q = [Fraction(float(x)) for x in lam]
    kap_q = [Fraction(float(x)) for x in kap]
    best, best_val = 0, None
    for r in range(d + 1):
        val = sum(lam_q[r:], Fraction(0)) + sum(kap_q[:r], Fraction(0))
        if best_val is None or val < best_val:
            best, best_val = r, val
    return best


def rank_estimate(blocks, kappa, h: Optional[float] = None) -> RankEstimate:
    """Sequential rank estimator ``inf{j : lambda_hat_{j+1} <= kappa^{(j)}}`` capped at ``d``.

    ``blocks`` may also be a vector of totals ``lambda_hat`` (descending).
    The penalized argmin formulation is evaluated alongside and must agree.
    """
    if isinstance(blocks, np.ndarray) and blocks.ndim == 1:
        lam = np.asarray(blocks, dtype=float)
    else:
        bs = as_blockset(blocks, h)
        lam = eigen_totals(bs.eigenvalues, bs.h)
    d = lam.shape[0]
    kap = np.broadcast_to(np.asarray(kappa, dtype=float), (d,)).copy()
    if np.any(np.diff(kap) < 0):
        raise InputError("critical values must be non-decreasing in the rank")
    decisions = []
    r_hat = d
    for j in range(d):
        accept = bool(lam[j] <= kap[j])
        decisions.append(dict(rank=j, lambda_next=float(lam[j]), kappa=float(kap[j]), accepted=accept))
        if accept:
            r_hat = j
            break
    if _argmin_rank(lam, kap) != r_hat:
        raise NumericalError("sequential and argmin rank estimators disagree")
    return RankEstimate(r_hat, decisions, lam, kap)
