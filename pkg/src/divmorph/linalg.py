"""Dense real-matrix primitives: thin SVD, Cayley transform, finite differences.

Everything operates on plain numpy float64 arrays and is pure, so all
functions here are safe to call from concurrent contexts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    EvaluationError,
    NumericalFailureError,
    SingularMatrixError,
)

# Relative reconstruction tolerance guaranteed by thin_svd.
SVD_RTOL = 1e-10
# Condition-number threshold above which (I + S) is treated as singular.
CAYLEY_COND_LIMIT = 1e12


def _as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolationError(f"{name} contains non-finite entries")
    return a


@dataclass
class SkewParam:
    """Strictly-upper-triangular parametrization of an n x n skew-symmetric matrix.

    Only the n(n-1)/2 strictly-upper entries are stored; the full matrix is
    S = upper - upper.T, so S + S.T == 0 holds exactly by construction.
    """

    n: int
    upper: np.ndarray  # shape (n*(n-1)//2,)

    def __post_init__(self):
        self.upper = np.asarray(self.upper, dtype=np.float64)
        want = self.n * (self.n - 1) // 2
        if self.upper.shape != (want,):
            raise ContractViolationError(
                f"skew parameter for n={self.n} needs {want} entries, got {self.upper.shape}"
            )

    @classmethod
    def zeros(cls, n):
        return cls(n, np.zeros(n * (n - 1) // 2))

    def to_dense(self):
        s = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n, k=1)
        s[iu] = self.upper
        return s - s.T


def skew_to_dense(upper, n):
    """Vector of strictly-upper entries -> dense skew-symmetric matrix."""
    s = np.zeros((n, n), dtype=np.float64)
    s[np.triu_indices(n, k=1)] = upper
    return s - s.T


def thin_svd(w):
    """Thin SVD of an m x n matrix: returns (U, s, V) with W = U @ diag(s) @ V.T.

    U is m x r, V is n x r, r = min(m, n); s is sorted descending and
    non-negative.  Reconstruction is accurate to SVD_RTOL relative Frobenius
    error.  Raises NumericalFailureError if the underlying iteration fails.
    """
    w = _as_matrix(w, "W")
    m, n = w.shape
    if min(m, n) < 1:
        raise ContractViolationError("thin_svd requires min(m, n) >= 1")
    try:
        u, s, vt = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # iteration cap exceeded in LAPACK
        raise NumericalFailureError(f"SVD did not converge: {exc}") from exc
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(s)) and np.all(np.isfinite(vt))):
        raise NumericalFailureError("SVD produced non-finite factors")
    return u, s, vt.T


def cayley(skew, q0):
    """Cayley transform: Q = (I - S)(I + S)^(-1) Q0 with S skew-symmetric.

    `skew` may be a SkewParam or a dense skew-symmetric matrix.  Q0 must be
    orthogonal (within 1e-8); the result is orthogonal to the same order.
    Raises SingularMatrixError when (I + S) is ill-conditioned.
    """
    s = skew.to_dense() if isinstance(skew, SkewParam) else _as_matrix(skew, "S")
    q0 = _as_matrix(q0, "Q0")
    n = s.shape[0]
    if s.shape != (n, n) or q0.shape != (n, n):
        raise ContractViolationError("cayley requires square S and Q0 of matching size")
    if np.linalg.norm(q0.T @ q0 - np.eye(n)) > 1e-8:
        raise ContractViolationError("Q0 is not orthogonal within 1e-8")
    a = np.eye(n) + s
    if np.linalg.cond(a) > CAYLEY_COND_LIMIT:
        raise SingularMatrixError("(I + S) is numerically singular")
    return (np.eye(n) - s) @ np.linalg.solve(a, q0)


def fd_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function at x.

    Returns (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.  Raises
    EvaluationError if f returns a non-finite value anywhere it is probed.
    """
    x = np.asarray(x, dtype=np.float64)
    if h <= 0:
        raise ContractViolationError("fd step h must be positive")
    flat = x.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"objective non-finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def softmax(z, axis=-1):
    """Numerically stable softmax; output sums to 1 and is shift-invariant."""
    z = np.asarray(z, dtype=np.float64)
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    return e / np.sum(e, axis=axis, keepdims=True)


# GELU, tanh approximation (Hendrycks & Gimpel):
#   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def matmul(a, b):
    """Matrix product with an explicit dimension check."""
    a = _as_matrix(a, "A")
    b = _as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ContractViolationError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return a @ b
