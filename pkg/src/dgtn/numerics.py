"""Dense matrix/vector kernels and independent numeric oracles.

Everything here operates on plain float64 numpy arrays and is pure. The
differentiable counterparts used by the model live in `dgtn.autodiff`;
the functions in this module serve as forward references and oracles
(direct linear solve, power iteration, finite differences).
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import NonFinite, Singular, ZeroDegree

__all__ = [
    "softmax_rows",
    "gelu",
    "gelu_grad",
    "sigmoid",
    "rbf_expand",
    "sym_normalize",
    "spectral_radius",
    "solve_linear",
    "fd_gradient",
    "row_normalize",
    "frobenius",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit, x * Phi(x), with the exact normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx gelu(x) = Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rbf_expand(x: float, centers: np.ndarray, gamma: float) -> np.ndarray:
    """Gaussian radial basis expansion exp(-gamma * (x - mu_k)^2)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size == 0:
        raise ValueError("centers must be nonempty")
    d = np.asarray(x, dtype=np.float64)[..., None] - centers
    return np.exp(-gamma * d * d)


def sym_normalize(s: np.ndarray, self_loops: bool = False) -> np.ndarray:
    """Symmetric degree normalization D^{-1/2} S D^{-1/2}.

    `s` must be square, symmetric and nonnegative. Rows with zero degree
    raise ZeroDegree unless `self_loops` is set, in which case a unit
    self-loop is injected into those rows first.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected square matrix, got shape {s.shape}")
    if not np.allclose(s, s.T, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    if s.min() < 0:
        raise ValueError("matrix has negative entries")
    deg = s.sum(axis=1)
    zero = deg <= 0.0
    if zero.any():
        if not self_loops:
            raise ZeroDegree(int(np.argmax(zero)))
        s = s.copy()
        idx = np.where(zero)[0]
        s[idx, idx] = 1.0
        deg = s.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return s * inv_sqrt[:, None] * inv_sqrt[None, :]


def spectral_radius(
    m: np.ndarray, iters: int = 1000, tol: float = 1e-12, seed: int = 0
) -> tuple[float, bool]:
    """Power-iteration estimate of the spectral radius |lambda_max|.

    Returns (estimate, converged). Convergence is declared once the norm-growth
    estimate stabilizes to `tol`; symmetric matrices with eigenvalues of equal
    magnitude and opposite sign are handled by the absolute-value convention
    (the growth factor, not the Rayleigh quotient, is tracked).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected square matrix, got shape {m.shape}")
    n = m.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max(1, iters)):
        y = m @ x
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            x = rng.standard_normal(n)
            x /= np.linalg.norm(x)
            lam_new = 0.0
            continue
        lam_new = ny
        x = y / ny
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new, True
        lam = lam_new
    return lam, False


def solve_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A X = B by Gaussian elimination with partial pivoting.

    Raises Singular when the pivot magnitude falls below 1e-12.
    """
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    vec = b.ndim == 1
    if vec:
        b = b[:, None]
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("incompatible right-hand side")
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) <= 1e-12:
            raise Singular(f"pivot magnitude {abs(a[p, k]):.3e} at column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            b[[k, p]] = b[[p, k]]
        factors = a[k + 1 :, k] / a[k, k]
        a[k + 1 :, k:] -= factors[:, None] * a[k, k:]
        b[k + 1 :] -= factors[:, None] * b[k]
    x = np.empty_like(b)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1 :] @ x[k + 1 :]) / a[k, k]
    return x[:, 0] if vec else x


def fd_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    probe = x.copy()
    for i in range(x.size):
        probe[i] = x[i] + eps
        hi = float(f(probe))
        probe[i] = x[i] - eps
        lo = float(f(probe))
        probe[i] = x[i]
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFinite(f"probe at coordinate {i} returned a non-finite value")
        g[i] = (hi - lo) / (2.0 * eps)
    return g


def row_normalize(m: np.ndarray) -> np.ndarray:
    """Divide each row by its sum (rows must have positive sums)."""
    m = np.asarray(m, dtype=np.float64)
    sums = m.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("row sums must be positive for renormalization")
    return m / sums


def frobenius(m: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(m), ord="fro"))
