"""Small dense symmetric matrices: eigendecomposition, ordered spectra, norms.

All spectra are computed by a cyclic Jacobi rotation scheme.  Jacobi keeps
small eigenvalues accurate relative to their own size, which matters here
because the rank statistics are sums of the *smallest* eigenvalues of
nearly singular realized covariance matrices.

Every function accepts a single ``(d, d)`` matrix or a stack of shape
``(..., d, d)``; stacks are processed in one vectorized pass, which is how
the Monte Carlo code gets through hundreds of thousands of small matrices.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InputError, ModelError, NumericalError

#: Off-diagonal Frobenius threshold, relative to ``||S||_F``.
JACOBI_TOL = 1e-13
#: Hard cap on the number of cyclic sweeps.
JACOBI_MAX_SWEEPS = 50
#: Relative asymmetry tolerated before a matrix is rejected.
SYM_TOL = 1e-12
#: Eigenvalue tolerance (relative to ``max(1, ||S||)``) for PSD checks.
PSD_TOL = 1e-10

SymMatrix = np.ndarray


class Spectrum(NamedTuple):
    """Descending eigenvalues with eigenvectors stored column-wise."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_symmetric(S) -> SymMatrix:
    """Validate ``S`` as a (stack of) finite symmetric matrix and return ``(S + S^T)/2``."""
    A = np.asarray(S, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise InputError(f"expected square matrices, got shape {A.shape}")
    if A.shape[-1] < 1:
        raise InputError("matrix dimension must be at least 1")
    if not np.all(np.isfinite(A)):
        raise InputError("matrix has non-finite entries")
    At = np.swapaxes(A, -1, -2)
    scale = np.max(np.abs(A), axis=(-2, -1), initial=0.0)
    asym = np.max(np.abs(A - At), axis=(-2, -1), initial=0.0)
    if np.any(asym > SYM_TOL * scale):
        raise InputError("matrix is not symmetric")
    return 0.5 * (A + At)


def _offdiag_norm(A: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(A.shape[-1], 1)
    upper = A[:, iu[0], iu[1]]
    return np.sqrt(2.0 * np.einsum("ni,ni->n", upper, upper))


def _jacobi(A: np.ndarray, vectors: bool):
    """Cyclic Jacobi on a stack ``(N, d, d)``; modifies ``A`` in place."""
    N, d, _ = A.shape
    V = np.broadcast_to(np.eye(d), (N, d, d)).copy() if vectors else None
    if d == 1 or N == 0:
        return np.einsum("nii->ni", A).copy(), V
    thresh = JACOBI_TOL * np.sqrt(np.einsum("nij,nij->n", A, A))
    active = np.arange(N)
    pairs = [(p, q) for p in range(d - 1) for q in range(p + 1, d)]
    for _ in range(JACOBI_MAX_SWEEPS):
        sub = A[active]
        done = _offdiag_norm(sub) <= thresh[active]
        if np.all(done):
            active = active[:0]
            break
        active = active[~done]
        sub = sub[~done]
        Vs = V[active] if vectors else None
        for p, q in pairs:
            apq = sub[:, p, q]
            tau = sub[:, q, q] - sub[:, p, p]
            sgn = np.where(tau >= 0.0, 1.0, -1.0)
            den = np.abs(tau) + np.hypot(tau, 2.0 * apq)
            safe = np.where(den > 0.0, den, 1.0)
            t = np.where(den > 0.0, 2.0 * apq * sgn / safe, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = (t * c)[:, None]
            c = c[:, None]
            colp = sub[:, :, p].copy()
            colq = sub[:, :, q].copy()
            sub[:, :, p] = c * colp - s * colq
            sub[:, :, q] = s * colp + c * colq
            rowp = sub[:, p, :].copy()
            rowq = sub[:, q, :].copy()
            sub[:, p, :] = c * rowp - s * rowq
            sub[:, q, :] = s * rowp + c * rowq
            sub[:, p, q] = 0.0
            sub[:, q, p] = 0.0
            if vectors:
                vp = Vs[:, :, p].copy()
                vq = Vs[:, :, q].copy()
                Vs[:, :, p] = c * vp - s * vq
                Vs[:, :, q] = s * vp + c * vq
        A[active] = sub
        if vectors:
            V[active] = Vs
    if active.size:
        if np.any(_offdiag_norm(A[active]) > thresh[active]):
            raise NumericalError("Jacobi iteration did not converge")
    return np.einsum("nii->ni", A).copy(), V


def _flatten(S):
    A = as_symmetric(S)
    batch = A.shape[:-2]
    d = A.shape[-1]
    return A.reshape(-1, d, d).copy(), batch, d


def sym_eigen(S) -> Spectrum:
    """Eigendecomposition with eigenvalues sorted in descending order.

    Ties keep the order in which the rotations left them.  Tiny negative
    eigenvalues of PSD inputs are returned unchanged.
    """
    A, batch, d = _flatten(S)
    w, V = _jacobi(A, vectors=True)
    order = np.argsort(-w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    return Spectrum(w.reshape(batch + (d,)), V.reshape(batch + (d, d)))


def sym_eigvals(S) -> np.ndarray:
    """Descending eigenvalues only (skips the eigenvector accumulation)."""
    A, batch, d = _flatten(S)
    w, _ = _jacobi(A, vectors=False)
    w = -np.sort(-w, axis=-1)
    return w.reshape(batch + (d,))


def partial_trace_gt(S, r: int):
    """Sum of all but the ``r`` largest eigenvalues, ``sum_{j>r} lambda_j(S)``."""
    A = as_symmetric(S)
    d = A.shape[-1]
    if not 0 <= r < d:
        raise InputError(f"r must satisfy 0 <= r < d={d}, got {r}")
    w = sym_eigvals(A)
    return w[..., r:].sum(axis=-1)


def spectral_norm(S):
    """Largest absolute eigenvalue."""
    w = sym_eigvals(S)
    return np.maximum(np.abs(w[..., 0]), np.abs(w[..., -1]))


def frobenius_norm(S):
    A = as_symmetric(S)
    return np.sqrt(np.einsum("...ij,...ij->...", A, A))


def check_psd(S, what: str = "matrix") -> np.ndarray:
    """Return descending eigenvalues, raising :class:`ModelError` below ``-PSD_TOL``."""
    w = sym_eigvals(S)
    scale = np.maximum(1.0, np.maximum(np.abs(w[..., 0]), np.abs(w[..., -1])))
    if np.any(w[..., -1] < -PSD_TOL * scale):
        raise ModelError(f"{what} is not positive semi-definite")
    return w


def sqrtm_psd(S) -> np.ndarray:
    """Symmetric square root of a (stack of) PSD matrix.

    Eigenvalues below ``-PSD_TOL`` (relative) raise :class:`ModelError`;
    the remaining negative roundoff is clipped to zero.
    """
    w, V = sym_eigen(S)
    scale = np.maximum(1.0, np.max(np.abs(w), axis=-1, initial=0.0))
    if np.any(w[..., -1] < -PSD_TOL * scale):
        raise ModelError("matrix is not positive semi-definite")
    root = np.sqrt(np.clip(w, 0.0, None))
    return np.einsum("...ij,...j,...kj->...ik", V, root, V)
