"""Fitted Q-iteration, adapted generalised TD and generalised FQI.

All three learners model Q(a, s) = phi(a, s)^T beta, start from beta = 0
and repeat a single linear solve per iteration in which the bootstrap
target ``max_a phi(a, S')^T beta`` uses the previous iterate. They stop
when ``||beta_k - beta_{k-1}||_2 <= tol`` or after ``max_iters`` solves.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import CorrelationFallbackWarning, Dataset, InputError, SingularSystemError
from .envs import GreedyPolicy
from .features import FeatureMap
from .gee import (
    SIGMA_FLOOR,
    TdBatch,
    WorkingCovariance,
    estimate_exchangeable,
    estimate_identity,
    invert_covariance,
    solve_linear,
    system_condition,
    td_residuals,
)

__all__ = [
    "FitControls",
    "FitReport",
    "QEstimate",
    "PhiStarModel",
    "default_max_iters",
    "estimate_phi_star",
    "fqi_fit",
    "agtd_fit",
    "gfqi_fit",
    "fit",
    "instrument_at",
    "iteration_map",
    "LEARNERS",
]

MAX_CONDITION = 1e12


def default_max_iters(n_blocks: int, gamma: float) -> int:
    """max(ceil(2 log N / log(1/gamma)), 100)."""
    if gamma <= 0 or n_blocks <= 1:
        return 100
    return max(math.ceil(2 * math.log(n_blocks) / math.log(1 / gamma)), 100)


@dataclass(frozen=True)
class FitControls:
    max_iters: int | None = None
    tol: float = 1e-6
    # "pooled": one TD standard deviation for all tuples; "regression":
    # sigma^2(a, s) from regressing squared TD errors on phi.
    sigma_model: str = "pooled"

    def __post_init__(self):
        if self.sigma_model not in ("pooled", "regression"):
            raise InputError(f"unknown sigma_model {self.sigma_model!r}")
        if not self.tol > 0:
            raise InputError("tol must be positive")

    def iterations_for(self, data: Dataset, gamma: float) -> int:
        if self.max_iters is not None:
            return self.max_iters
        return default_max_iters(data.n_blocks, gamma)


@dataclass(frozen=True, eq=False)
class QEstimate:
    beta: np.ndarray
    fmap: FeatureMap
    gamma: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.fmap.d,) or not np.all(np.isfinite(beta)):
            raise InputError("beta must be a finite vector of length d")
        object.__setattr__(self, "beta", beta)

    def q_values(self, states) -> np.ndarray:
        return self.policy().q_values(states)

    def policy(self) -> GreedyPolicy:
        return GreedyPolicy(self.fmap, self.beta)

    def greedy(self, states) -> np.ndarray:
        return self.policy()(states)


@dataclass
class FitReport:
    learner: str
    beta: np.ndarray
    iterations: int
    converged: bool
    final_delta: float
    sigma_hat: float = float("nan")
    rho_hat: float = float("nan")
    condition_diag: float = float("nan")
    warnings: list = field(default_factory=list)

    def q_estimate(self, fmap: FeatureMap, gamma: float) -> QEstimate:
        return QEstimate(self.beta, fmap, gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = [float(x) for x in self.beta]
        return d

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        # json writes floats with repr, which round-trips exactly
        return json.dumps(d, indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        known["beta"] = np.asarray(known["beta"], dtype=np.float64)
        return cls(**known)

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class PhiStarModel:
    """Linear model for E[phi(pi(S'), S') | A, S] given [1, phi(A, S)].

    ``coef`` has shape (d + 1, d); row 0 multiplies the intercept.
    """

    coef: np.ndarray
    fmap: FeatureMap
    gamma: float

    def _design(self, actions, states):
        phi = self.fmap(actions, states)
        return phi, np.concatenate([np.ones(phi.shape[:-1] + (1,)), phi], axis=-1)

    def predict(self, actions, states) -> np.ndarray:
        return self._design(actions, states)[1] @ self.coef

    def phi_star(self, actions, states) -> np.ndarray:
        """phi(A, S) - gamma * E[phi(pi(S'), S') | A, S]."""
        phi, x = self._design(actions, states)
        return phi - self.gamma * (x @ self.coef)


class _Regressor:
    """Least squares on a fixed design, factorised once per dataset."""

    def __init__(self, data: Dataset, fmap: FeatureMap):
        self.fmap = fmap
        self.phi = fmap(data.actions, data.states)  # (N, M, d)
        flat = self.phi.reshape(-1, fmap.d)
        cond = system_condition(flat) if flat.shape[0] >= fmap.d else float("inf")
        if not cond <= MAX_CONDITION:
            raise SingularSystemError("feature design is rank deficient", cond)
        self.condition = cond
        x = np.concatenate([np.ones((flat.shape[0], 1)), flat], axis=1)
        # the intercept duplicates the sum of per-action intercepts; the
        # minimum-norm pseudo-inverse drops that direction
        self.pinv = np.linalg.pinv(x, rcond=1e-12)
        self.next_features_all = fmap.all_actions(data.next_states)  # (N, M, A, d)
        self.next_blocks = fmap.state_features(data.next_states)  # (N, M, bs)

    def greedy_next(self, beta) -> np.ndarray:
        coef = beta.reshape(self.fmap.action_count, self.fmap.block_size)
        return np.argmax(self.next_blocks @ coef.T, axis=-1)

    def phi_star_model(self, beta, gamma) -> PhiStarModel:
        pi = self.greedy_next(beta)
        target = np.take_along_axis(self.next_features_all, pi[..., None, None], axis=-2)[..., 0, :]
        coef = self.pinv @ target.reshape(-1, self.fmap.d)
        return PhiStarModel(coef, self.fmap, gamma)


def estimate_phi_star(data: Dataset, fmap: FeatureMap, policy, gamma: float = 0.0) -> PhiStarModel:
    """Regress phi(pi(S'), S') on (1, phi(A, S)) over all tuples.

    ``policy`` is a QEstimate, a GreedyPolicy or a coefficient vector.
    """
    if isinstance(policy, (QEstimate, GreedyPolicy)):
        beta = np.asarray(policy.beta)
    else:
        beta = np.asarray(policy, dtype=np.float64)
    if beta.shape != (fmap.d,):
        raise InputError("policy coefficients must have length d")
    return _Regressor(data, fmap).phi_star_model(beta, gamma)


def _targets(data: Dataset, reg: _Regressor, beta, gamma):
    if not gamma:
        return data.rewards
    coef = beta.reshape(reg.fmap.action_count, reg.fmap.block_size)
    return data.rewards + gamma * (reg.next_blocks @ coef.T).max(axis=-1)


def _td(data, reg, beta_eval, beta_target, gamma) -> TdBatch:
    return TdBatch(_targets(data, reg, beta_target, gamma) - reg.phi @ beta_eval)


def _sigma_surface(td: TdBatch, reg: _Regressor) -> np.ndarray:
    """Per-tuple TD standard deviations from regressing delta^2 on phi."""
    flat = reg.phi.reshape(-1, reg.fmap.d)
    coef, *_ = np.linalg.lstsq(flat, td.residuals.reshape(-1) ** 2, rcond=None)
    var = np.maximum(reg.phi @ coef, SIGMA_FLOOR)
    return np.sqrt(var)


class _Iteration:
    """One learner's iteration map beta_k, beta_{k-1} -> beta_{k+1}."""

    def __init__(self, data: Dataset, fmap: FeatureMap, gamma: float, controls: FitControls):
        if data.action_count != fmap.action_count or data.state_dim != fmap.state_dim:
            raise InputError("feature map does not match the dataset")
        self.data, self.fmap, self.gamma, self.controls = data, fmap, gamma, controls
        self.reg = _Regressor(data, fmap)
        self.sigma_hat = float("nan")
        self.rho_hat = float("nan")
        self.condition = float("nan")
        self.notes: list[str] = []

    def _solve(self, a, b):
        self.condition = system_condition(a)
        return solve_linear(a, b)


class _Fqi(_Iteration):
    name = "fqi"

    def __init__(self, *args):
        super().__init__(*args)
        flat = self.reg.phi.reshape(-1, self.fmap.d)
        self.q, self.r = np.linalg.qr(flat)
        self.condition = self.reg.condition

    def step(self, beta, beta_prev):
        y = _targets(self.data, self.reg, beta, self.gamma).reshape(-1)
        return np.linalg.solve(self.r, self.q.T @ y)


class _Agtd(_Iteration):
    name = "agtd"

    def _nuisance(self, beta, beta_prev):
        phis = self.reg.phi_star_model(beta, self.gamma)
        phi_star = phis.phi_star(self.data.actions, self.data.states)  # (N, M, d)
        td = _td(self.data, self.reg, beta, beta_prev, self.gamma)
        if self.controls.sigma_model == "pooled":
            sigma = estimate_identity(td).sigma  # (M,)
            sigma = np.broadcast_to(sigma, td.residuals.shape)
        else:
            sigma = _sigma_surface(td, self.reg)
        self.sigma_hat = float(np.sqrt(np.mean(sigma**2)))
        return phi_star, td, sigma

    def step(self, beta, beta_prev):
        phi_star, _, sigma = self._nuisance(beta, beta_prev)
        w = (phi_star / (sigma**2)[..., None]).reshape(-1, self.fmap.d)
        phi = self.reg.phi.reshape(-1, self.fmap.d)
        y = _targets(self.data, self.reg, beta, self.gamma).reshape(-1)
        return self._solve(w.T @ phi, w.T @ y)


class _Gfqi(_Agtd):
    name = "gfqi"

    def __init__(self, data, fmap, gamma, controls, correlation="exchangeable"):
        super().__init__(data, fmap, gamma, controls)
        if correlation not in ("identity", "exchangeable"):
            raise InputError(f"unknown working correlation {correlation!r}")
        self.correlation = correlation
        self.name = f"gfqi-{correlation}"

    def covariance(self, td: TdBatch, sigma) -> WorkingCovariance:
        per_block = None if self.controls.sigma_model == "pooled" else sigma
        if self.correlation == "identity":
            return WorkingCovariance(sigma[0] if per_block is None else per_block)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cov = estimate_exchangeable(td, per_block)
        for w in caught:
            if issubclass(w.category, CorrelationFallbackWarning):
                if "correlation fallback" not in self.notes:
                    self.notes.append("correlation fallback")
            else:
                warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
        return cov

    def instrument(self, beta, beta_prev):
        phi_star, td, sigma = self._nuisance(beta, beta_prev)
        cov = self.covariance(td, sigma)
        self.rho_hat = cov.rho
        v_inv = invert_covariance(cov)
        if v_inv.ndim == 2:
            return np.einsum("bmd,mk->bdk", phi_star, v_inv)
        return np.einsum("bmd,bmk->bdk", phi_star, v_inv)

    def step(self, beta, beta_prev):
        inst = self.instrument(beta, beta_prev)
        y = _targets(self.data, self.reg, beta, self.gamma)
        a = np.einsum("bdm,bme->de", inst, self.reg.phi)
        b = np.einsum("bdm,bm->d", inst, y)
        return self._solve(a, b)


def _iterate(it: _Iteration, data: Dataset, controls: FitControls) -> FitReport:
    max_iters = controls.iterations_for(data, it.gamma)
    beta_prev = beta = np.zeros(it.fmap.d)
    delta = float("inf")
    converged = False
    k = 0
    while k < max_iters:
        new = it.step(beta, beta_prev)
        if not np.all(np.isfinite(new)):
            raise SingularSystemError(f"{it.name} iterates diverged at iteration {k + 1}")
        delta = float(np.linalg.norm(new - beta))
        beta_prev, beta = beta, new
        k += 1
        if delta <= controls.tol:
            converged = True
            break
    return FitReport(
        learner=it.name,
        beta=beta,
        iterations=k,
        converged=converged,
        final_delta=delta,
        sigma_hat=it.sigma_hat,
        rho_hat=it.rho_hat,
        condition_diag=it.condition,
        warnings=list(it.notes),
    )


def fqi_fit(data: Dataset, fmap: FeatureMap, gamma: float, controls: FitControls = FitControls()) -> FitReport:
    """Least-squares regression of R + gamma max_a Q_{k-1}(a, S') on phi(A, S)."""
    return _iterate(_Fqi(data, fmap, gamma, controls), data, controls)


def agtd_fit(data: Dataset, fmap: FeatureMap, gamma: float, controls: FitControls = FitControls()) -> FitReport:
    """Tuple-wise estimating equation with instrument phi*(A, S) / sigma^2(A, S)."""
    return _iterate(_Agtd(data, fmap, gamma, controls), data, controls)


def gfqi_fit(data: Dataset, fmap: FeatureMap, gamma: float, correlation: str = "exchangeable",
             controls: FitControls = FitControls()) -> FitReport:
    """Cluster-wise estimating equation with instrument [phi*(A^(1), S^(1)), ...] V^{-1}.

    phi*, the greedy policy and V = B C B are re-estimated at every
    iteration from the current coefficients.
    """
    return _iterate(_Gfqi(data, fmap, gamma, controls, correlation), data, controls)


def iteration_map(learner: str, data: Dataset, fmap: FeatureMap, gamma: float,
                  controls: FitControls = FitControls()):
    """The learner's one-step update as a function ``(beta, beta_prev) -> beta_next``."""
    it = _make(learner, data, fmap, gamma, controls)
    return it.step


def _make(learner, data, fmap, gamma, controls) -> _Iteration:
    if learner == "fqi":
        return _Fqi(data, fmap, gamma, controls)
    if learner == "agtd":
        return _Agtd(data, fmap, gamma, controls)
    if learner in ("gfqi-identity", "gfqi-exchangeable"):
        return _Gfqi(data, fmap, gamma, controls, learner.split("-", 1)[1])
    raise InputError(f"unknown learner {learner!r}")


def instrument_at(learner: str, data: Dataset, fmap: FeatureMap, beta, gamma: float,
                  controls: FitControls = FitControls()) -> np.ndarray:
    """The (N, d, M) instrument a learner would use at coefficients ``beta``."""
    it = _make(learner, data, fmap, gamma, controls)
    beta = np.asarray(beta, dtype=np.float64)
    if isinstance(it, _Gfqi):
        return it.instrument(beta, beta)
    if isinstance(it, _Agtd):
        phi_star, _, sigma = it._nuisance(beta, beta)
        return (phi_star / (sigma**2)[..., None]).transpose(0, 2, 1)
    return it.reg.phi.transpose(0, 2, 1)


LEARNERS = ("fqi", "agtd", "gfqi-identity", "gfqi-exchangeable")


def fit(learner: str, data: Dataset, fmap: FeatureMap, gamma: float,
        controls: FitControls = FitControls()) -> FitReport:
    """Dispatch on a learner name from ``LEARNERS``."""
    it = _make(learner, data, fmap, gamma, controls)
    return _iterate(it, data, controls)
