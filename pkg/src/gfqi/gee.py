"""Working covariances for cluster-wise TD errors and the linear GEE solve."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import (
    CorrelationFallbackWarning,
    Dataset,
    DegradedConditioningWarning,
    InputError,
    SingularSystemError,
)
from .features import FeatureMap

__all__ = [
    "WorkingCorrelation",
    "WorkingCovariance",
    "TdBatch",
    "max_target",
    "td_residuals",
    "estimate_exchangeable",
    "estimate_identity",
    "invert_covariance",
    "solve_estimating_equation",
]

RHO_MARGIN = 1e-6
SIGMA_FLOOR = 1e-6
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class WorkingCorrelation:
    kind: str = "identity"
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "exchangeable"):
            raise InputError(f"unknown working correlation {self.kind!r}")
        if self.kind == "identity" and self.rho != 0.0:
            raise InputError("identity correlation has rho = 0")

    @classmethod
    def exchangeable(cls, rho: float, m: int) -> "WorkingCorrelation":
        return cls("exchangeable", clamp_rho(rho, m))

    def matrix(self, m: int) -> np.ndarray:
        c = np.full((m, m), self.rho)
        np.fill_diagonal(c, 1.0)
        return c


def clamp_rho(rho: float, m: int) -> float:
    """Clamp rho into the range where an m x m exchangeable matrix is PD."""
    lo = -1.0 / (m - 1) + RHO_MARGIN if m > 1 else -1.0 + RHO_MARGIN
    return float(min(max(rho, lo), 1.0 - RHO_MARGIN))


@dataclass(frozen=True, eq=False)
class WorkingCovariance:
    """V = B C B with B = diag(sigma).

    ``sigma`` is either one vector of length M shared by every block or an
    (N, M) array of per-block standard deviations.
    """

    sigma: np.ndarray
    correlation: WorkingCorrelation = WorkingCorrelation()

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim not in (1, 2) or not np.all(sigma > 0) or not np.all(np.isfinite(sigma)):
            raise InputError("sigma must be a positive finite vector or (blocks, M) array")
        object.__setattr__(self, "sigma", sigma)

    @property
    def cluster_size(self) -> int:
        return self.sigma.shape[-1]

    @property
    def rho(self) -> float:
        return self.correlation.rho

    def matrix(self) -> np.ndarray:
        c = self.correlation.matrix(self.cluster_size)
        return self.sigma[..., :, None] * c * self.sigma[..., None, :]


@dataclass(frozen=True, eq=False)
class TdBatch:
    """Cluster-wise TD residuals, one length-M row per dataset block."""

    residuals: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.residuals.shape[0]

    @property
    def cluster_size(self) -> int:
        return self.residuals.shape[1]


def _check_beta(fmap: FeatureMap, *betas):
    out = []
    for beta in betas:
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (fmap.d,):
            raise InputError(f"coefficient vector of shape {beta.shape}, expected ({fmap.d},)")
        out.append(beta)
    return out


def max_target(data: Dataset, fmap: FeatureMap, beta) -> np.ndarray:
    """max_a phi(a, S')^T beta for every tuple, shape (N, M)."""
    (beta,) = _check_beta(fmap, beta)
    coef = beta.reshape(fmap.action_count, fmap.block_size)
    return (fmap.state_features(data.next_states) @ coef.T).max(axis=-1)


def td_residuals(data: Dataset, fmap: FeatureMap, beta_eval, beta_target, gamma: float) -> TdBatch:
    """R + gamma max_a phi(a, S')^T beta_target - phi(A, S)^T beta_eval per tuple."""
    beta_eval, beta_target = _check_beta(fmap, beta_eval, beta_target)
    q = fmap(data.actions, data.states) @ beta_eval
    target = data.rewards + gamma * max_target(data, fmap, beta_target) if gamma else data.rewards
    return TdBatch(target - q)


def _pairwise_mean(d: np.ndarray) -> float:
    """Mean over blocks and pairs j < k of d_j d_k."""
    m = d.shape[1]
    s = d.sum(axis=1)
    pair_sums = 0.5 * (s**2 - (d**2).sum(axis=1))
    return float(pair_sums.mean() / (m * (m - 1) / 2))


def estimate_identity(td: TdBatch) -> WorkingCovariance:
    """Pooled TD standard deviation with identity working correlation."""
    sigma2 = max(float(np.mean(td.residuals**2)), SIGMA_FLOOR**2)
    return WorkingCovariance(np.full(td.cluster_size, np.sqrt(sigma2)))


def estimate_exchangeable(td: TdBatch, sigma=None) -> WorkingCovariance:
    """Moment estimates of a pooled sigma and an exchangeable rho.

    sigma^2 is the mean squared residual; rho is the mean within-block
    cross product over pairs divided by sigma^2. If per-block standard
    deviations ``sigma`` (N, M) are supplied, rho is computed from the
    standardised residuals and those deviations are kept.
    """
    m = td.cluster_size
    if td.n_blocks < 1:
        raise InputError("no TD residuals")
    if sigma is None:
        cov = estimate_identity(td)
        z = td.residuals
        scale2 = cov.sigma[0] ** 2
        sig = cov.sigma
    else:
        sig = np.asarray(sigma, dtype=np.float64)
        z = td.residuals / sig
        scale2 = float(np.mean(z**2))
    if m < 2:
        warnings.warn(
            "exchangeable correlation needs at least two members; using identity",
            CorrelationFallbackWarning,
            stacklevel=2,
        )
        return WorkingCovariance(sig)
    rho = _pairwise_mean(z) / scale2 if scale2 > 0 else 0.0
    return WorkingCovariance(sig, WorkingCorrelation.exchangeable(rho, m))


def _exchangeable_inverse(m: int, rho: float) -> np.ndarray:
    inv = np.full((m, m), -rho / (1 + (m - 1) * rho))
    inv[np.diag_indices(m)] += 1.0
    return inv / (1 - rho)


def invert_covariance(cov: WorkingCovariance) -> np.ndarray:
    """V^{-1} via the closed form B^{-1} C^{-1} B^{-1}.

    Returns (M, M), or (N, M, M) for per-block deviations. If V is worse
    conditioned than 1e12 the inverse of ``V + 1e-8 tr(V)/M I`` is
    returned instead and a DegradedConditioningWarning is issued.
    """
    m = cov.cluster_size
    rho = cov.rho
    sigma = cov.sigma
    # cond(V) <= cond(B)^2 cond(C); the bound is exact for constant sigma.
    c_eig = (1 + (m - 1) * rho, 1 - rho) if m > 1 else (1.0, 1.0)
    b_ratio = sigma.max(axis=-1) / sigma.min(axis=-1)
    cond = float(np.max(b_ratio**2)) * max(c_eig) / min(c_eig)
    if cond > MAX_CONDITION:
        v = cov.matrix()
        warnings.warn(
            f"working covariance condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}; "
            "adding diagonal jitter",
            DegradedConditioningWarning,
            stacklevel=2,
        )
        jitter = 1e-8 * np.trace(v, axis1=-2, axis2=-1) / m
        v = v + jitter[..., None, None] * np.eye(m)
        return np.linalg.inv(v)
    c_inv = _exchangeable_inverse(m, rho) if cov.correlation.kind == "exchangeable" else np.eye(m)
    b_inv = 1.0 / sigma
    return b_inv[..., :, None] * c_inv * b_inv[..., None, :]


def solve_linear(a: np.ndarray, b: np.ndarray, what: str = "estimating equation") -> np.ndarray:
    """Solve a small dense system, refusing singular or ill-conditioned ones."""
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
        raise SingularSystemError(f"{what} has non-finite entries")
    sv = np.linalg.svd(a, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if not cond <= MAX_CONDITION:
        raise SingularSystemError(f"{what} matrix is singular or ill-conditioned", cond)
    lu = scipy.linalg.lu_factor(a, check_finite=False)
    x = scipy.linalg.lu_solve(lu, b, check_finite=False)
    # one step of iterative refinement keeps the equation residual tiny
    x = x + scipy.linalg.lu_solve(lu, b - a @ x, check_finite=False)
    return x


def system_condition(a: np.ndarray) -> float:
    sv = np.linalg.svd(a, compute_uv=False)
    return float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")


def solve_estimating_equation(data: Dataset, fmap: FeatureMap, instrument: np.ndarray,
                              beta_target, gamma: float) -> np.ndarray:
    """Solve sum_b Phi_b (R_b + gamma maxQ_b(beta_target) - phi_b^T beta) = 0.

    ``instrument`` holds one d x M matrix per block, shape (N, d, M).
    """
    (beta_target,) = _check_beta(fmap, beta_target)
    inst = np.asarray(instrument, dtype=np.float64)
    n, m = data.actions.shape
    if inst.shape != (n, fmap.d, m):
        raise InputError(f"instrument of shape {inst.shape}, expected {(n, fmap.d, m)}")
    phi = fmap(data.actions, data.states)  # (N, M, d)
    y = data.rewards + gamma * max_target(data, fmap, beta_target) if gamma else data.rewards
    a = np.einsum("bdm,bme->de", inst, phi)
    rhs = np.einsum("bdm,bm->d", inst, y)
    return solve_linear(a, rhs)
