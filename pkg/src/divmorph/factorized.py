"""SVD-derived factor units partitioned into learngenes and tailor groups.

A weight matrix W (m x n) is stored as a free "tall" factor plus a
Cayley-parametrized orthogonal square factor.  Columns [0, n_learngene)
are shared learngenes, the next block morphology tailors, and the last
block task tailors; a sigma vector supplies the per-column scaling during
reconstruction (ones for learngenes, gated soft weights for tailors).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolationError
from .linalg import SkewParam, cayley, thin_svd


@dataclass(frozen=True)
class DiversionConfig:
    """Column budget of one rank class: learngenes + two tailor groups."""

    n_learngene: int
    n_morph_tailor: int
    n_task_tailor: int
    k_morph: int
    k_task: int

    def __post_init__(self):
        if self.n_learngene < 0 or self.n_morph_tailor < 1 or self.n_task_tailor < 1:
            raise ContractViolationError("group sizes out of range")
        if not (1 <= self.k_morph <= self.n_morph_tailor):
            raise ContractViolationError("k_morph must lie in [1, n_morph_tailor]")
        if not (1 <= self.k_task <= self.n_task_tailor):
            raise ContractViolationError("k_task must lie in [1, n_task_tailor]")

    @property
    def rank(self):
        return self.n_learngene + self.n_morph_tailor + self.n_task_tailor

    def slices(self):
        """(learngene, morph-tailor, task-tailor) column index ranges."""
        a = self.n_learngene
        b = a + self.n_morph_tailor
        return slice(0, a), slice(a, b), slice(b, self.rank)


@dataclass
class FactorizedMatrix:
    """One weight matrix in factor-unit form.

    The square factor (U when m < n, V otherwise) is cayley(skew, seed)
    and stays orthogonal by construction; `seed` is frozen, `tall` and
    `skew` are the trainable parameters.
    """

    m: int
    n: int
    config: DiversionConfig
    tall: np.ndarray       # max(m, n) x r, trains freely
    seed: np.ndarray       # r x r orthogonal, frozen
    skew: SkewParam        # trainable residual on the orthogonal manifold
    square_is_u: bool      # True iff m < n (tie m == n constrains V)

    @property
    def rank(self):
        return min(self.m, self.n)

    def square(self):
        """Effective orthogonal square factor."""
        return cayley(self.skew, self.seed)

    def factors(self):
        """(U, V) with W = U diag(sigma) V^T."""
        q = self.square()
        return (q, self.tall) if self.square_is_u else (self.tall, q)

    def param_count(self):
        # Frozen seed excluded: stored once, never trained.
        return self.tall.size + self.skew.upper.size


def init_factorized(m, n, config, rng):
    """Sample W uniform in +-sqrt(6/(m+n)), SVD it, keep only the factors.

    Initial singular values are discarded: sigma is supplied by gates from
    then on.  skew starts at zero so the square factor reproduces the SVD
    factor exactly.
    """
    r = min(m, n)
    if config.rank != r:
        raise ContractViolationError(
            f"config rank {config.rank} != min({m}, {n})"
        )
    bound = np.sqrt(6.0 / (m + n))
    w = rng.uniform(-bound, bound, size=(m, n))
    u, _, v = thin_svd(w)
    square_is_u = m < n
    tall = v if square_is_u else u
    seed = u if square_is_u else v
    return FactorizedMatrix(m, n, config, tall.copy(), seed.copy(),
                            SkewParam.zeros(r), square_is_u)


def assemble_sigma(config, g_kappa, g_tau):
    """Place unit learngene scales and the two gate outputs into one vector."""
    g_kappa = np.asarray(g_kappa, dtype=np.float64)
    g_tau = np.asarray(g_tau, dtype=np.float64)
    if g_kappa.shape != (config.n_morph_tailor,) or g_tau.shape != (config.n_task_tailor,):
        raise ContractViolationError("gate output length does not match tailor groups")
    sig = np.empty(config.rank)
    lg, mt, tt = config.slices()
    sig[lg] = 1.0
    sig[mt] = g_kappa
    sig[tt] = g_tau
    return sig


def validate_sigma(config, sigma, atol=1e-9):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (config.rank,):
        raise ContractViolationError("sigma length != rank")
    lg, mt, tt = config.slices()
    if not np.all(sigma[lg] == 1.0):
        raise ContractViolationError("learngene scales must be exactly 1")
    for sl, k in ((mt, config.k_morph), (tt, config.k_task)):
        block = sigma[sl]
        if np.any(block < 0):
            raise ContractViolationError("sigma entries must be non-negative")
        nz = np.count_nonzero(block)
        if nz != k:
            raise ContractViolationError(f"tailor group has {nz} nonzeros, expected {k}")
        if abs(block.sum() - 1.0) > atol:
            raise ContractViolationError("tailor group weights must sum to 1")
    return sigma


def reconstruct(fm, sigma):
    """W = U diag(sigma) V^T = sum_i u_i sigma_i v_i^T."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (fm.rank,):
        raise ContractViolationError("sigma length != rank")
    u, v = fm.factors()
    return (u * sigma) @ v.T


def materialize_t(fm, tall_t, skew_t, sigma_t):
    """Autodiff version of reconstruct.

    tall_t / skew_t are Tensors over fm's trainable parameters, sigma_t a
    Tensor of length rank.  Returns W as a Tensor (m x n).
    """
    q = ad.cayley(skew_t, fm.rank, ad.constant(fm.seed))
    u, v = (q, tall_t) if fm.square_is_u else (tall_t, q)
    return (u * sigma_t) @ v.T


@dataclass
class CompactMatrix:
    """Pruned low-rank form: W~ = left @ right.T with left columns pre-scaled."""

    m: int
    n: int
    left: np.ndarray   # m x r', columns sigma_i * u_i for sigma_i > 0
    right: np.ndarray  # n x r'

    @property
    def rank(self):
        return self.left.shape[1]

    def dense(self):
        return self.left @ self.right.T

    def param_count(self):
        return (self.m + self.n) * self.rank


def prune(fm, sigma):
    """Drop factor units with zero sigma; keep scaled left and raw right vectors."""
    sigma = np.asarray(sigma, dtype=np.float64)
    u, v = fm.factors()
    keep = sigma > 0
    return CompactMatrix(fm.m, fm.n, u[:, keep] * sigma[keep], v[:, keep].copy())
