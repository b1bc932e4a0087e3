"""Matrix concentration bounds for sums of Gaussian outer products.

For independent ``Y_j ~ N(0, A_j)`` the sum ``sum_j Y_j Y_j^T`` is
compared with its mean ``sum_j A_j``.  The calculators below evaluate
Bernstein-type upper bounds, a bound for sums of top eigenvalues over the
columns of a triangular array, and a Laplace-transform lower-tail bound.
The ``mc_*`` helpers estimate the corresponding probabilities by exact
Gaussian simulation so the bounds can be checked numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as _rng
from .errors import InputError
from .specmat import as_symmetric, check_psd, spectral_norm, sqrtm_psd, sym_eigvals

DRAW_CHUNK = 20000


@dataclass
class WishartEnsemble:
    """Population covariances ``A_j`` (shape ``(J, d, d)``).

    With a triangular layout the array has shape ``(J, K, d, d)``: column
    ``k`` holds the ensemble ``(A_{jk})_j``.
    """

    A: np.ndarray

    def __post_init__(self):
        A = as_symmetric(self.A)
        if A.ndim not in (3, 4) or A.shape[0] < 1:
            raise InputError("A must have shape (J, d, d) or (J, K, d, d)")
        check_psd(A, "ensemble covariance")
        self.A = A

    @property
    def triangular(self) -> bool:
        return self.A.ndim == 4

    @property
    def d(self) -> int:
        return self.A.shape[-1]

    @property
    def J(self) -> int:
        return self.A.shape[0]

    def column(self, k: int) -> "WishartEnsemble":
        if not self.triangular:
            raise InputError("ensemble has no triangular layout")
        return WishartEnsemble(self.A[:, k])


@dataclass(frozen=True)
class BernsteinQuantities:
    sigma2: float
    R: float
    A_sum: np.ndarray


def bernstein_quantities(ens: WishartEnsemble) -> BernsteinQuantities:
    """``sigma^2 = lambda_max(sum_j tr(A_j) A_j + 2 A_j^2)`` and ``R = max_j tr(A_j) + 4||A_j||``."""
    if ens.triangular:
        raise InputError("use a single column of a triangular ensemble")
    A = ens.A
    tr = np.einsum("jii->j", A)
    M = np.einsum("j,jik->ik", tr, A) + 2 * np.einsum("jik,jkl->il", A, A)
    sigma2 = float(sym_eigvals(M)[0])
    R = float(np.max(tr + 4 * spectral_norm(A)))
    return BernsteinQuantities(max(sigma2, 0.0), R, A.sum(axis=0))


def upper_tail_bound(t: float, q: BernsteinQuantities, d: int) -> float:
    """``d exp(-t^2 / (2 sigma^2 + 2 R t))`` clipped to ``[0, 1]``."""
    if not t > 0:
        raise InputError("t must be positive")
    den = 2 * q.sigma2 + 2 * q.R * t
    if den <= 0:
        return 0.0
    return float(min(1.0, d * math.exp(-t * t / den)))


def expectation_bound(q: BernsteinQuantities, d: int) -> float:
    """``sigma (2 sqrt(log d) + 1) + 4 R (log d + 1)``."""
    ld = math.log(d)
    return math.sqrt(q.sigma2) * (2 * math.sqrt(ld) + 1) + 4 * q.R * (ld + 1)


def _triangular_parts(ens: WishartEnsemble):
    if not ens.triangular:
        raise InputError("triangular bound needs a (J, K, d, d) layout")
    K = ens.A.shape[1]
    S = 0.0
    for k in range(K):
        col = ens.column(k)
        q = bernstein_quantities(col)
        S += float(sym_eigvals(q.A_sum)[0]) + expectation_bound(q, ens.d)
    M = float(np.max(spectral_norm(ens.A)))
    return S, M


def triangular_upper_bound(ens: WishartEnsemble, delta: float, t: float) -> float:
    """``(1+delta) sum_k (lambda_max(A_k) + sigma_k c_1 + 4 R_k c_2) + 2(1 + 1/delta) max||A_jk|| t``.

    ``A_k = sum_j A_jk``, ``c_1 = 2 sqrt(log d) + 1``, ``c_2 = log d + 1``.
    Holds with probability at least ``1 - e^{-t}``.
    """
    if not (delta > 0 and t > 0):
        raise InputError("delta and t must be positive")
    S, M = _triangular_parts(ens)
    return (1 + delta) * S + 2 * (1 + 1 / delta) * M * t


def triangular_optimal_delta(ens: WishartEnsemble, t: float) -> tuple[float, float]:
    """Minimizer ``sqrt(2 M t / S)`` of the triangular bound in ``delta`` and the minimum."""
    S, M = _triangular_parts(ens)
    if S <= 0:
        raise InputError("degenerate ensemble")
    delta = math.sqrt(2 * M * t / S)
    return delta, (math.sqrt(S) + math.sqrt(2 * M * t)) ** 2


def laplace_lower_bound(theta: float, J: int, d: int, lam_min_A0: float) -> float:
    """Bound on ``E exp(-theta lambda_min(sum_j Y_j Y_j^T))`` when every ``A_j >= A_0``.

    ``Gamma(1/2) Gamma((J+1)/2) / (Gamma(d/2) Gamma((J-d+2)/2))
    (1 + 2 theta lambda_min(A_0))^{-(J-d+1)/2}``, evaluated through log-gamma.
    """
    if theta < 0:
        raise InputError("theta must be non-negative")
    if J < d:
        raise InputError("the bound needs J >= d")
    if lam_min_A0 < 0:
        raise InputError("lambda_min(A_0) must be non-negative")
    lg = math.lgamma
    log_c = lg(0.5) + lg((J + 1) / 2) - lg(d / 2) - lg((J - d + 2) / 2)
    return math.exp(log_c - 0.5 * (J - d + 1) * math.log1p(2 * theta * lam_min_A0))


# ---------------------------------------------------------------------------
# Monte Carlo


def _draw_sums(A: np.ndarray, draws: int, g: np.random.Generator) -> np.ndarray:
    """Samples of ``sum_j Y_j Y_j^T`` with ``Y_j = A_j^{1/2} Z_j`` (shape ``(draws, d, d)``)."""
    roots = sqrtm_psd(A)
    J, d, _ = A.shape
    Z = g.standard_normal((draws, J, d))
    Y = np.einsum("jab,njb->nja", roots, Z)
    return np.einsum("nja,njb->nab", Y, Y)


def sample_sums(ens: WishartEnsemble, draws: int, seed: int = 0) -> np.ndarray:
    """Monte Carlo draws of ``sum_j Y_j Y_j^T`` in chunks with per-chunk streams."""
    if ens.triangular:
        raise InputError("use sample_triangular for triangular ensembles")
    out = []
    for c, start in enumerate(range(0, draws, DRAW_CHUNK)):
        m = min(DRAW_CHUNK, draws - start)
        out.append(_draw_sums(ens.A, m, _rng.stream(seed, _rng.VALIDATION, c)))
    return np.concatenate(out)


def sample_triangular(ens: WishartEnsemble, draws: int, seed: int = 0) -> np.ndarray:
    """Draws of ``sum_k lambda_max(sum_j Y_jk Y_jk^T)``."""
    if not ens.triangular:
        raise InputError("need a triangular ensemble")
    J, K, d, _ = ens.A.shape
    roots = sqrtm_psd(ens.A)
    out = np.zeros(draws)
    chunk = max(1, DRAW_CHUNK // K)
    for c, start in enumerate(range(0, draws, chunk)):
        m = min(chunk, draws - start)
        g = _rng.stream(seed, _rng.VALIDATION, c)
        Z = g.standard_normal((m, J, K, d))
        Y = np.einsum("jkab,njkb->njka", roots, Z)
        S = np.einsum("njka,njkb->nkab", Y, Y)
        out[start:start + m] = sym_eigvals(S)[..., 0].sum(axis=-1)
    return out


def mc_upper_tail(ens: WishartEnsemble, t_grid, draws: int, seed: int = 0) -> np.ndarray:
    """Empirical ``P(lambda_max(sum_j Y_j Y_j^T - sum_j A_j) >= t)`` on a grid."""
    S = sample_sums(ens, draws, seed)
    dev = sym_eigvals(S - ens.A.sum(axis=0))[:, 0]
    t = np.asarray(t_grid, dtype=float)
    return (dev[None, :] >= t[:, None]).mean(axis=1)


def mc_mean_deviation(ens: WishartEnsemble, draws: int, seed: int = 0) -> float:
    S = sample_sums(ens, draws, seed)
    return float(np.mean(sym_eigvals(S - ens.A.sum(axis=0))[:, 0]))


def mc_laplace(ens: WishartEnsemble, theta, draws: int, seed: int = 0) -> np.ndarray:
    """Empirical ``E exp(-theta lambda_min(sum_j Y_j Y_j^T))`` for each theta."""
    S = sample_sums(ens, draws, seed)
    lmin = sym_eigvals(S)[:, -1]
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    return np.exp(-th[:, None] * lmin[None, :]).mean(axis=1)


def mc_fourth_moment(ens: WishartEnsemble, draws: int, seed: int = 0) -> float:
    """Monte Carlo ``lambda_max(sum_j E[(Y_j Y_j^T)^2])``."""
    roots = sqrtm_psd(ens.A)
    J, d, _ = ens.A.shape
    acc = np.zeros((d, d))
    for c, start in enumerate(range(0, draws, DRAW_CHUNK)):
        m = min(DRAW_CHUNK, draws - start)
        g = _rng.stream(seed, _rng.VALIDATION, c)
        Y = np.einsum("jab,njb->nja", roots, g.standard_normal((m, J, d)))
        sq = np.einsum("nja,nja->nj", Y, Y)
        acc += np.einsum("nj,nja,njb->ab", sq, Y, Y)
    return float(sym_eigvals(acc / draws)[0])


# ---------------------------------------------------------------------------
# Standard validation grids


def _binomial_se(p: float, draws: int) -> float:
    return math.sqrt(max(p * (1 - p), 1.0 / draws) / draws)


def validate(preset: str, draws: int = 100_000, seed: int = 0, surrogate_C: Optional[float] = None) -> list[dict]:
    """Run a validation grid and return one record per check.

    ``bernstein``: upper tail and mean for ``d in {2,3}``, ``J in {20,50}``;
    ``triangular``: exceedance of the triangular bound at ``t = 2``;
    ``lower``: Laplace-transform bound and stochastic-order comparison.
    """
    if draws < 100:
        raise InputError("need at least 100 draws")
    rows = []
    if preset == "bernstein":
        for d in (2, 3):
            for J in (20, 50):
                ens = _validation_ensemble(J, d, seed)
                q = bernstein_quantities(ens)
                ts = np.linspace(0.5, 4.0, 20) * math.sqrt(q.sigma2)
                emp = mc_upper_tail(ens, ts, draws, seed + 17 * J + d)
                worst = max(emp[i] - upper_tail_bound(t, q, d) - 3 * _binomial_se(emp[i], draws) for i, t in enumerate(ts))
                rows.append(dict(check="upper_tail", d=d, J=J, worst_margin=float(worst), ok=bool(worst <= 0)))
                mean = mc_mean_deviation(ens, min(draws, 10_000), seed + 1)
                eb = expectation_bound(q, d)
                rows.append(dict(check="expectation", d=d, J=J, empirical=mean, bound=eb, ok=bool(mean <= eb)))
    elif preset == "triangular":
        for d in (2, 3):
            for J in (20, 50):
                K = 25 if J == 20 else 10
                A = _validation_ensemble(J * K, d, seed).A.reshape(J, K, d, d)
                ens = WishartEnsemble(A)
                t = 2.0
                delta, bound = triangular_optimal_delta(ens, t)
                emp = sample_triangular(ens, draws, seed + d + J)
                freq = float(np.mean(emp > bound))
                limit = math.exp(-t) + 3 * _binomial_se(math.exp(-t), draws)
                rows.append(dict(check="triangular", d=d, J=J, K=K, t=t, delta=delta, bound=bound,
                                 exceedance=freq, ok=bool(freq <= limit)))
    elif preset == "lower":
        for d in (1, 2, 3):
            for J in (5, 20):
                ens = WishartEnsemble(np.broadcast_to(np.eye(d), (J, d, d)).copy())
                thetas = [0.1, 1.0, 10.0]
                emp = mc_laplace(ens, thetas, draws, seed + d + J)
                for th, e in zip(thetas, emp):
                    b = laplace_lower_bound(th, J, d, 1.0)
                    se = math.sqrt(max(e * (1 - e), 1.0 / draws) / draws)
                    rows.append(dict(check="laplace", d=d, J=J, theta=th, empirical=float(e), bound=b,
                                     ok=bool(e <= b + 3 * se)))
        for d in (2, 3):
            ok, gap = stochastic_order_check(d, 20, draws, seed)
            rows.append(dict(check="stochastic_order", d=d, J=20, max_excess=gap, ok=ok))
    else:
        raise InputError("preset must be bernstein, triangular or lower")
    return rows


def _validation_ensemble(J: int, d: int, seed: int) -> WishartEnsemble:
    g = _rng.stream(seed, _rng.VALIDATION, 10**6 + J * 10 + d)
    G = g.standard_normal((J, d, d)) / math.sqrt(d)
    return WishartEnsemble(np.einsum("jab,jcb->jac", G, G) + 0.1 * np.eye(d))


def stochastic_order_check(d: int, J: int, draws: int, seed: int = 0) -> tuple[bool, float]:
    """Compare the CDFs of ``lambda_min`` under inflated ``A_j >= I`` and under ``A_0 = I``.

    Returns ``(ok, worst)`` where ``worst`` is the largest amount by which
    the inflated CDF exceeds the baseline beyond three two-sample standard errors.
    """
    g = _rng.stream(seed, _rng.VALIDATION, 2 * 10**6 + d)
    G = g.standard_normal((J, d, d)) / math.sqrt(d)
    inflated = WishartEnsemble(np.eye(d) + np.einsum("jab,jcb->jac", G, G))
    base = WishartEnsemble(np.broadcast_to(np.eye(d), (J, d, d)).copy())
    l_inf = sym_eigvals(sample_sums(inflated, draws, seed + 1))[:, -1]
    l_base = sym_eigvals(sample_sums(base, draws, seed + 2))[:, -1]
    grid = np.quantile(l_base, np.linspace(0.01, 0.99, 50))
    F_inf = (l_inf[None, :] <= grid[:, None]).mean(axis=1)
    F_base = (l_base[None, :] <= grid[:, None]).mean(axis=1)
    se = np.sqrt((F_inf * (1 - F_inf) + F_base * (1 - F_base)) / draws + 1.0 / draws**2)
    worst = float(np.max(F_inf - F_base - 3 * se))
    return bool(worst <= 0), worst
