"""Spot covariance paths and exact Gaussian sampling of discrete observations.

Observations follow ``dX = sigma_X dB`` on ``[0, 1]``.  Conditionally on
the path, the increments over ``[(i-1)/n, i/n]`` are independent centred
Gaussians with covariance ``int Sigma_X``.  Whenever that integral is known
exactly, the sampler draws from this law directly.

Sampling goes through *increment factors*: for each interval a ``d x m``
matrix ``F_i`` with ``F_i F_i^T = int Sigma``, so that ``F_i xi_i`` with
``xi_i ~ N(0, I_m)`` is an exact draw.  Paths that are Gram matrices of a
piecewise-constant factor (the Wishart construction) supply ``F_i``
directly and never need a matrix square root.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as _rng
from .errors import InputError
from .specmat import check_psd, sqrtm_psd

#: Increments drawn per random stream; the stream for chunk ``c`` of
#: replication ``r`` is addressed by ``(seed, OBSERVATIONS, r, c)``.
CHUNK = 1 << 14
#: Refinement used when a path has no exact integral.
EULER_REFINEMENT = 10

KINDS = ("RotatingRankR", "Wishart", "Constant", "PiecewiseConstant", "Custom")


@dataclass
class CovariancePath:
    """A spot covariance function ``t -> Sigma_X(t)`` on ``[0, 1]``.

    ``evaluator`` maps an array of times of shape ``(m,)`` to matrices of
    shape ``(m, d, d)``.  ``integral_evaluator`` maps arrays ``a, b`` to
    ``int_a^b Sigma_X(t) dt``.  ``factor_grid`` optionally holds a
    piecewise-constant factor ``sigma`` of shape ``(n_steps, d, r)`` with
    ``Sigma = sigma sigma^T`` on the uniform grid.
    """

    kind: str
    d: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    integral_evaluator: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    params: dict = field(default_factory=dict)
    factor_grid: Optional[np.ndarray] = None
    _factor_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown path kind {self.kind!r}")
        if self.d < 1:
            raise InputError("dimension must be positive")

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.evaluator(t)

    def integral(self, a, b) -> np.ndarray:
        """``int_a^b Sigma_X``; exact if available, otherwise midpoint quadrature."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if self.integral_evaluator is not None:
            return self.integral_evaluator(a, b)
        return _midpoint_integral(self.evaluator, a, b, EULER_REFINEMENT)

    def scaled(self, c: float) -> "CovariancePath":
        """The path ``c * Sigma_X`` for ``c > 0``."""
        if not c > 0:
            raise InputError("scale must be positive")
        ev, ie = self.evaluator, self.integral_evaluator
        return CovariancePath(
            kind=self.kind,
            d=self.d,
            evaluator=lambda t: c * ev(t),
            integral_evaluator=None if ie is None else (lambda a, b: c * ie(a, b)),
            params={**self.params, "scale": c * self.params.get("scale", 1.0)},
            factor_grid=None if self.factor_grid is None else math.sqrt(c) * self.factor_grid,
        )

    def increment_factors(self, n: int) -> np.ndarray:
        """Factors ``F_i`` (shape ``(n, d, m)``) with ``F_i F_i^T = int_{(i-1)/n}^{i/n} Sigma``."""
        if n in self._factor_cache:
            return self._factor_cache[n]
        F = self._compute_factors(n)
        if self.factor_grid is None:
            # Deterministic paths are resampled many times; cache their factors.
            self._factor_cache.clear()
            self._factor_cache[n] = F
        return F

    def _compute_factors(self, n: int) -> np.ndarray:
        if self.factor_grid is not None:
            steps = self.factor_grid.shape[0]
            if steps % n == 0:
                c = steps // n
                g = self.factor_grid.reshape(n, c, self.d, -1)
                g = np.moveaxis(g, 1, 2).reshape(n, self.d, -1)
                return g / math.sqrt(steps)
        edges = np.arange(n + 1) / n
        M = self.integral(edges[:-1], edges[1:])
        return sqrtm_psd(M)


def _midpoint_integral(evaluator, a, b, refine):
    u = (np.arange(refine) + 0.5) / refine
    t = a[:, None] + (b - a)[:, None] * u[None, :]
    vals = evaluator(t.ravel())
    d = vals.shape[-1]
    vals = vals.reshape(a.shape[0], refine, d, d)
    return vals.mean(axis=1) * (b - a)[:, None, None]


# ---------------------------------------------------------------------------
# Models


def _embed(M2: np.ndarray, d: int) -> np.ndarray:
    if d == 2:
        return M2
    out = np.zeros(M2.shape[:-2] + (d, d))
    out[..., :2, :2] = M2
    return out


def rotating_model(lam: float, beta: float, h_rot: float, gamma: float = 0.0, d: int = 2) -> CovariancePath:
    """Rank-one-plus-gamma rotating covariance.

    ``Sigma = v1 v1^T + gamma v2 v2^T`` with
    ``v1 = (lam^{1/2}, h_rot^beta lam^{-1/2} sin(2 pi t / h_rot))`` and
    ``v2 = (h_rot^beta lam^{-1/2} sin(2 pi t / h_rot), -lam^{1/2})``.
    For ``beta = 1/2`` the second coordinate of ``v1`` is ``(h_rot/lam)^{1/2} sin``.
    Over any full period the average is ``diag(lam, h_rot^{2 beta}/(2 lam))``
    when ``gamma = 0``.  Dimensions beyond two are padded with zeros.
    """
    if not (lam > 0 and 0 < beta <= 1 and 0 < h_rot <= 1 and 0 <= gamma <= 1):
        raise InputError("need lam > 0, beta in (0,1], h_rot in (0,1], gamma in [0,1]")
    if d < 2:
        raise InputError("rotating model needs d >= 2")
    hb = h_rot**beta
    if lam < hb / math.sqrt(2) * (1 - 1e-12):
        raise InputError(f"need lam >= h_rot^beta/sqrt(2) = {hb / math.sqrt(2):.6g}")
    a2 = lam
    ab = hb
    b2 = hb * hb / lam
    omega = 2 * math.pi / h_rot

    def assemble(one, s, s2):
        M = np.empty(s.shape + (2, 2))
        M[..., 0, 0] = a2 * one + gamma * b2 * s2
        M[..., 0, 1] = M[..., 1, 0] = (1 - gamma) * ab * s
        M[..., 1, 1] = b2 * s2 + gamma * a2 * one
        return _embed(M, d)

    def evaluator(t):
        s = np.sin(omega * t)
        return assemble(np.ones_like(t), s, s * s)

    def integral(a, b):
        int_s = (np.cos(omega * a) - np.cos(omega * b)) / omega
        int_s2 = 0.5 * (b - a) - (np.sin(2 * omega * b) - np.sin(2 * omega * a)) / (4 * omega)
        return assemble(b - a, int_s, int_s2)

    params = dict(lam=lam, beta=beta, h_rot=h_rot, gamma=gamma)
    return CovariancePath("RotatingRankR", d, evaluator, integral, params)


def rotating_signal(lam: float, beta: float, h_rot: float, gamma: float) -> float:
    """Time-averaged second eigenvalue ``gamma (lam + h_rot^{2 beta}/(2 lam))``."""
    return gamma * (lam + h_rot ** (2 * beta) / (2 * lam))


def gamma_for_signal(signal: float, lam: float, beta: float, h_rot: float) -> float:
    """Inverse of :func:`rotating_signal` in ``gamma``."""
    return signal / (lam + h_rot ** (2 * beta) / (2 * lam))


def constant_path(S) -> CovariancePath:
    S = np.asarray(S, dtype=float)
    check_psd(S, "constant covariance")
    d = S.shape[0]
    return CovariancePath(
        "Constant",
        d,
        lambda t: np.broadcast_to(S, t.shape + (d, d)).copy(),
        lambda a, b: (b - a)[:, None, None] * S,
        {"matrix": S.tolist()},
    )


def piecewise_constant_path(values, factors=None, kind: str = "PiecewiseConstant", params=None) -> CovariancePath:
    """Left-endpoint piecewise-constant path on a uniform grid of ``[0, 1]``.

    ``values`` has shape ``(n_steps, d, d)``.  If ``factors`` (shape
    ``(n_steps, d, r)``) is given, ``values`` must equal ``F F^T``.
    """
    V = np.asarray(values, dtype=float)
    if V.ndim != 3 or V.shape[1] != V.shape[2]:
        raise InputError("values must have shape (n_steps, d, d)")
    steps, d, _ = V.shape
    if factors is None:
        check_psd(V, "piecewise-constant covariance")
    cum = np.concatenate([np.zeros((1, d, d)), np.cumsum(V, axis=0) / steps])

    def cell(t):
        return np.clip(np.floor(t * steps).astype(int), 0, steps - 1)

    def primitive(t):
        k = np.clip(np.floor(t * steps).astype(int), 0, steps)
        frac = t - k / steps
        part = V[np.minimum(k, steps - 1)] * frac[:, None, None]
        return cum[k] + part

    return CovariancePath(
        kind,
        d,
        lambda t: V[cell(t)],
        lambda a, b: primitive(b) - primitive(a),
        dict(params or {}, n_steps=steps),
        factor_grid=None if factors is None else np.asarray(factors, dtype=float),
    )


def custom_path(evaluator, d: int, integral_evaluator=None, params=None) -> CovariancePath:
    return CovariancePath("Custom", d, evaluator, integral_evaluator, dict(params or {}))


def wishart_path(d: int, r: int, b0, n_steps: int, seed: int, replication: int = 0) -> CovariancePath:
    """Gram-matrix Wishart path ``Sigma(t) = Bt(t)^T Bt(t)``.

    ``Bt = b0 + W`` where ``W`` is an ``r x d`` matrix of independent
    Brownian motions sampled on ``n_steps`` grid points and held constant
    between them.  Every ``Sigma(t)`` has rank at most ``r``.
    """
    b0 = np.asarray(b0, dtype=float)
    if b0.shape != (r, d) or not 1 <= r < d:
        raise InputError(f"b0 must have shape (r, d) with 1 <= r < d, got {b0.shape}")
    if np.linalg.matrix_rank(b0) != r:
        raise InputError("b0^T b0 must have rank r")
    if n_steps < 1:
        raise InputError("n_steps must be positive")
    g = _rng.stream(seed, _rng.PATH, replication)
    dW = g.standard_normal((n_steps - 1, r, d)) / math.sqrt(n_steps)
    B = np.concatenate([b0[None], b0[None] + np.cumsum(dW, axis=0)])
    factors = np.swapaxes(B, 1, 2)
    values = factors @ B
    return piecewise_constant_path(
        values, factors, kind="Wishart", params=dict(d=d, r=r, b0=b0.tolist(), seed=seed, replication=replication)
    )


def reflected_scalar_path(sigma0: float, gamma: float, n_steps: int, seed: int, replication: int = 0) -> CovariancePath:
    """Scalar spot variance ``|sigma0 + gamma W(t)|``: Brownian motion reflected at zero."""
    if sigma0 < 0 or gamma < 0:
        raise InputError("sigma0 and gamma must be non-negative")
    g = _rng.stream(seed, _rng.PATH, replication)
    w = np.concatenate([[0.0], np.cumsum(g.standard_normal(n_steps - 1)) / math.sqrt(n_steps)])
    v = np.abs(sigma0 + gamma * w)
    return piecewise_constant_path(
        v[:, None, None], np.sqrt(v)[:, None, None], kind="Custom",
        params=dict(model="reflected", sigma0=sigma0, gamma=gamma, seed=seed, replication=replication),
    )


def lower_bound_pair(n: int, beta: float, L: float, lam: float):
    """Two covariance paths whose discrete observations share the same law.

    The first is the rotating rank-one path with period ``1/n`` (rank one
    at every time, spectral gap ``lam``); the second is the constant
    ``diag(lam, c^2 n^{-2 beta} / (2 lam))`` with ``c = L/(4 pi)``, which
    has rank two.  Both are rescaled by ``c`` so that the first has Hölder
    constant ``L``; with ``L = 4 pi`` no rescaling happens.
    """
    if n < 1 or not 0 < beta <= 1 or L <= 0 or lam <= 0:
        raise InputError("need n >= 1, beta in (0,1], L > 0, lam > 0")
    c = L / (4 * math.pi)
    lam0 = lam / c
    if lam0 < n ** (-beta) / math.sqrt(2) * (1 - 1e-12):
        raise InputError("need lam >= c n^{-beta}/sqrt(2) for c = L/(4 pi)")
    rot = rotating_model(lam0, beta, 1.0 / n, 0.0, 2)
    const = constant_path(np.diag([lam0, n ** (-2 * beta) / (2 * lam0)]))
    if c != 1.0:
        rot, const = rot.scaled(c), const.scaled(c)
    return rot, const


# ---------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class JumpSpec:
    """Compound-Poisson overlay with ``N(0, scale^2 I_d)`` jump sizes."""

    rate: float = 0.0
    scale: float = 0.0


@dataclass
class SimulationSpec:
    n: int
    path: CovariancePath
    seed: int = 0
    idio_level: float = 0.0
    idio_cov: Optional[np.ndarray] = None
    drift: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jumps: JumpSpec = JumpSpec()

    def __post_init__(self):
        if self.n < 1:
            raise InputError("n must be at least 1")
        if self.idio_level < 0:
            raise InputError("idiosyncratic level must be non-negative")

    @property
    def d(self) -> int:
        return self.path.d

    def describe(self) -> dict:
        return dict(
            n=self.n, d=self.d, seed=self.seed, kind=self.path.kind,
            params={k: v for k, v in self.path.params.items()},
            idio_level=self.idio_level, jump_rate=self.jumps.rate, jump_scale=self.jumps.scale,
        )


@dataclass
class ObservationSet:
    """Observations ``X(i/n)``, ``i = 0..n``, on the uniform grid."""

    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.times.shape[0] or self.times.shape[0] < 2:
            raise InputError("values must be (n+1, d) with matching times, n >= 1")
        if not np.all(np.isfinite(self.values)):
            raise InputError("observations must be finite")
        n = self.times.shape[0] - 1
        if np.max(np.abs(self.times - np.arange(n + 1) / n)) > 1e-9:
            raise InputError("times must be the uniform grid i/n on [0, 1]")

    @property
    def n(self) -> int:
        return self.times.shape[0] - 1

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    @classmethod
    def from_increments(cls, dx, meta=None, x0=None) -> "ObservationSet":
        dx = np.asarray(dx, dtype=float)
        n, d = dx.shape
        start = np.zeros((1, d)) if x0 is None else np.asarray(x0, dtype=float).reshape(1, d)
        values = np.concatenate([start, start + np.cumsum(dx, axis=0)])
        return cls(np.arange(n + 1) / n, values, dict(meta or {}))


def sample_increments(spec: SimulationSpec, replication: int = 0) -> np.ndarray:
    """Exact Gaussian increments (shape ``(n, d)``) for one replication."""
    n, d = spec.n, spec.d
    F = spec.path.increment_factors(n)
    m = F.shape[-1]
    out = np.empty((n, d))
    for c, start in enumerate(range(0, n, CHUNK)):
        stop = min(start + CHUNK, n)
        g = _rng.stream(spec.seed, _rng.OBSERVATIONS, replication, c)
        xi = g.standard_normal((stop - start, m))
        out[start:stop] = np.einsum("nij,nj->ni", F[start:stop], xi)
    if spec.idio_level > 0:
        SZ = np.eye(d) if spec.idio_cov is None else np.asarray(spec.idio_cov, dtype=float)
        root = sqrtm_psd(SZ) * (spec.idio_level / math.sqrt(n))
        for c, start in enumerate(range(0, n, CHUNK)):
            stop = min(start + CHUNK, n)
            g = _rng.stream(spec.seed, _rng.NOISE, replication, c)
            out[start:stop] += g.standard_normal((stop - start, d)) @ root.T
    if spec.drift is not None:
        mid = (np.arange(n) + 0.5) / n
        mu = np.asarray(spec.drift(mid), dtype=float).reshape(n, d)
        out += mu / n
    if spec.jumps.rate > 0:
        g = _rng.stream(spec.seed, _rng.JUMPS, replication)
        count = g.poisson(spec.jumps.rate)
        where = np.minimum((g.uniform(size=count) * n).astype(int), n - 1)
        sizes = spec.jumps.scale * g.standard_normal((count, d))
        np.add.at(out, where, sizes)
    return out


def sample_observations(spec: SimulationSpec, replication: int = 0) -> ObservationSet:
    """Draw ``X(i/n)``, ``i = 0..n``, with ``X(0) = 0``; deterministic in ``(spec.seed, replication)``."""
    dx = sample_increments(spec, replication)
    return ObservationSet.from_increments(dx, meta=dict(spec.describe(), replication=replication))


# ---------------------------------------------------------------------------
# CSV exchange


def write_csv(obs: ObservationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"asset_{j + 1}" for j in range(obs.d)])
        for t, row in zip(obs.times, obs.values):
            w.writerow([format(t, ".17g")] + [format(x, ".17g") for x in row])


def read_csv(path) -> ObservationSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError("empty CSV file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header[0] != "time" or header[1:] != [f"asset_{j + 1}" for j in range(d)]:
        raise InputError("CSV header must be time,asset_1,...,asset_d")
    try:
        data = np.array([[float(x) for x in row] for row in rows[1:] if row], dtype=float)
    except ValueError as exc:
        raise InputError(f"non-numeric CSV entry: {exc}") from None
    if data.ndim != 2 or data.shape[1] != d + 1:
        raise InputError("ragged CSV rows")
    return ObservationSet(data[:, 0], data[:, 1:], {"source": str(path)})
