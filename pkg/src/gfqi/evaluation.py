"""Policy evaluation, a grid value-iteration oracle, regret and sandwich variance."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .core import (
    ConfigurationError,
    Dataset,
    InputError,
    OracleError,
    RngStream,
    SingularSystemError,
    StabilityError,
    derive_stream,
)
from .envs import rollout_policy
from .features import FeatureMap
from .gee import MAX_CONDITION, system_condition, td_residuals

__all__ = [
    "ValueEstimate",
    "EvalProtocol",
    "truncation_horizon",
    "mc_evaluate",
    "GridSpec",
    "grid_for_env",
    "OraclePolicy",
    "OracleSolution",
    "value_iteration_oracle",
    "policy_grid_value",
    "load_or_build_oracle",
    "regret",
    "SandwichEstimate",
    "sandwich_variance",
    "select_degree",
]


@dataclass(frozen=True)
class ValueEstimate:
    mean_discounted: float
    mean_average_reward: float
    std_error: float
    n_traj: int
    horizon: int
    gamma: float
    std_error_average: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def truncation_horizon(gamma: float, r_max: float = 10.0, tol: float = 1e-6) -> int:
    """Smallest H with gamma^H * r_max < tol."""
    if gamma <= 0:
        return 1
    return max(1, math.floor(math.log(tol / r_max) / math.log(gamma)) + 1)


@dataclass(frozen=True)
class EvalProtocol:
    """How policies are rolled out for Monte-Carlo evaluation.

    ``horizon=None`` truncates the discounted sum once gamma^H * r_max
    drops below 1e-6; ``literal()`` gives 100 trajectories of 1000 steps.
    """

    n_traj: int = 100
    horizon: int | None = None
    r_max: float = 10.0
    omit_reward_residuals: bool = True

    @classmethod
    def literal(cls) -> "EvalProtocol":
        return cls(n_traj=100, horizon=1000)

    def resolve_horizon(self, gamma: float) -> int:
        return self.horizon if self.horizon is not None else truncation_horizon(gamma, self.r_max)


def mc_evaluate(env, policy, gamma: float, n_traj: int = 100, horizon: int | None = None,
                rng: RngStream | None = None, omit_reward_residuals: bool = True,
                r_max: float = 10.0) -> ValueEstimate:
    if not 0 <= gamma < 1:
        raise ConfigurationError("gamma must lie in [0, 1)")
    if horizon is None:
        horizon = truncation_horizon(gamma, r_max)
    if horizon < 1 or n_traj < 1:
        raise ConfigurationError("horizon and n_traj must be >= 1")
    rng = rng if rng is not None else derive_stream(0)
    rewards = rollout_policy(env, policy, n_traj, horizon, rng, omit_reward_residuals)
    disc = rewards @ (gamma ** np.arange(horizon))
    avg = rewards.mean(axis=1)
    ddof = 1 if n_traj > 1 else 0
    return ValueEstimate(
        mean_discounted=float(disc.mean()),
        mean_average_reward=float(avg.mean()),
        std_error=float(disc.std(ddof=ddof) / math.sqrt(n_traj)),
        n_traj=n_traj,
        horizon=horizon,
        gamma=gamma,
        std_error_average=float(avg.std(ddof=ddof) / math.sqrt(n_traj)),
    )


@dataclass(frozen=True)
class GridSpec:
    lower: float = -6.0
    upper: float = 6.0
    points: int = 601
    quadrature_nodes: int = 21
    explicit: tuple | None = None

    def grid(self) -> np.ndarray:
        if self.explicit is not None:
            g = np.asarray(self.explicit, dtype=np.float64)
            if g.ndim != 1 or np.any(np.diff(g) <= 0):
                raise ConfigurationError("explicit grid must be strictly increasing")
            return g
        if self.points < 2 or not self.upper > self.lower:
            raise ConfigurationError("grid needs >= 2 points on a nonempty interval")
        return np.linspace(self.lower, self.upper, self.points)

    def refined(self) -> "GridSpec":
        """Same interval with the spacing halved."""
        return GridSpec(self.lower, self.upper, 2 * self.points - 1, self.quadrature_nodes)


def grid_for_env(env, points: int = 601, quadrature_nodes: int = 21) -> GridSpec:
    """A state grid covering where uniform-behaviour trajectories spend time.

    The synthetic environment keeps the fixed [-6, 6] grid. Otherwise the
    0.01%/99.99% quantiles of states visited by 2000 uniform-policy
    trajectories of 200 steps are padded by half their range on each side.
    """
    from .envs import SyntheticEnvParams

    if isinstance(env, SyntheticEnvParams):
        return GridSpec(points=points, quadrature_nodes=quadrature_nodes)
    gen = derive_stream(0, [0x6D1D]).generator()
    sd = math.sqrt(env.state_noise_var)
    s = env.init_state_mean + env.init_state_std * gen.standard_normal(2000)
    seen = [s]
    for _ in range(200):
        a = gen.integers(0, env.action_count, size=s.shape)
        s = env.transition_mean(s, a) + sd * gen.standard_normal(s.shape)
        seen.append(s)
    lo, hi = np.quantile(np.concatenate(seen), [1e-4, 1 - 1e-4])
    pad = 0.5 * max(hi - lo, 1.0)
    return GridSpec(float(lo - pad), float(hi + pad), points, quadrature_nodes)


def _gauss_hermite(n: int):
    z, w = np.polynomial.hermite_e.hermegauss(n)
    return z, w / math.sqrt(2 * math.pi)


def _interp_matrix(grid: np.ndarray, points: np.ndarray, weights: np.ndarray) -> scipy.sparse.csr_matrix:
    """Sparse P with (P v)_i = sum_k weights_k * interp(v, points[i, k]).

    Points outside the grid are clamped to the nearest end.
    """
    g = len(grid)
    x = np.clip(points, grid[0], grid[-1])
    j = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, g - 2)
    frac = (x - grid[j]) / (grid[j + 1] - grid[j])
    rows = np.repeat(np.arange(points.shape[0]), points.shape[1])
    w = np.broadcast_to(weights, points.shape)
    data = np.concatenate([(w * (1 - frac)).ravel(), (w * frac).ravel()])
    cols = np.concatenate([j.ravel(), (j + 1).ravel()])
    p = scipy.sparse.coo_matrix((data, (np.tile(rows, 2), cols)), shape=(points.shape[0], g))
    return p.tocsr()


def _transition_matrices(env, grid: np.ndarray, nodes: int):
    sd = math.sqrt(env.state_noise_var)
    z, w = _gauss_hermite(nodes)
    mats, rewards = [], []
    for a in range(env.action_count):
        mean = env.transition_mean(grid, a)
        mats.append(_interp_matrix(grid, mean[:, None] + sd * z[None, :], w[None, :]))
        rewards.append(np.broadcast_to(env.mean_reward(grid, a), grid.shape).astype(np.float64))
    return mats, np.stack(rewards, axis=1)


@dataclass(frozen=True, eq=False)
class OraclePolicy:
    """Greedy policy of a grid Q-table, linearly interpolated in the state."""

    grid: np.ndarray
    q_table: np.ndarray

    def q_values(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)[..., 0]
        return np.stack([np.interp(s, self.grid, self.q_table[:, a])
                         for a in range(self.q_table.shape[1])], axis=-1)

    def __call__(self, states, gen=None):
        return np.argmax(self.q_values(states), axis=-1)


@dataclass(eq=False)
class OracleSolution:
    grid: np.ndarray
    q_table: np.ndarray
    value: float
    gamma: float
    bellman_residual: float
    grid_value: float
    evaluation: ValueEstimate | None = None
    sweeps: int = 0

    def policy(self) -> OraclePolicy:
        return OraclePolicy(self.grid, self.q_table)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "q_table": self.q_table.tolist(),
            "value": self.value,
            "gamma": self.gamma,
            "bellman_residual": self.bellman_residual,
            "grid_value": self.grid_value,
            "evaluation": None if self.evaluation is None else self.evaluation.to_dict(),
            "sweeps": self.sweeps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSolution":
        ev = d.get("evaluation")
        return cls(
            grid=np.asarray(d["grid"], dtype=np.float64),
            q_table=np.asarray(d["q_table"], dtype=np.float64),
            value=d["value"],
            gamma=d["gamma"],
            bellman_residual=d["bellman_residual"],
            grid_value=d["grid_value"],
            evaluation=None if ev is None else ValueEstimate(**ev),
            sweeps=d.get("sweeps", 0),
        )


def _expected_over_init(env, grid: np.ndarray, values: np.ndarray, nodes: int) -> float:
    z, w = _gauss_hermite(nodes)
    s0 = env.init_state_mean + env.init_state_std * z
    return float(w @ np.interp(s0, grid, values))


def value_iteration_oracle(env, gamma: float, grid_spec: GridSpec = GridSpec(),
                           protocol: EvalProtocol | None = EvalProtocol(),
                           rng: RngStream | None = None, tol: float = 1e-10,
                           max_sweeps: int = 100_000) -> OracleSolution:
    """Optimal Q on a state grid with Gauss-Hermite transition integrals.

    Next-state values are linearly interpolated on the grid. The greedy
    oracle policy is then rolled out under ``protocol`` (skipped when
    ``protocol`` is None) and its discounted Monte-Carlo value is
    stored as ``value``; ``grid_value`` is E[V*(S_0)] from the table.
    """
    if not 0 <= gamma < 1:
        raise ConfigurationError("gamma must lie in [0, 1)")
    if getattr(env, "state_dim", 1) != 1:
        raise ConfigurationError("the grid oracle handles scalar states only")
    grid = grid_spec.grid()
    mats, r = _transition_matrices(env, grid, grid_spec.quadrature_nodes)

    def bellman(q):
        v = q.max(axis=1)
        return r + gamma * np.stack([p @ v for p in mats], axis=1)

    q = r.copy()
    sweeps = 0
    while True:
        q_new = bellman(q)
        sweeps += 1
        resid = float(np.max(np.abs(q_new - q)))
        q = q_new
        if resid <= tol:
            break
        if sweeps >= max_sweeps:
            raise OracleError(f"value iteration did not converge in {max_sweeps} sweeps "
                              f"(residual {resid:.3e})")
    residual = float(np.max(np.abs(bellman(q) - q)))
    if residual > 1e-8:
        raise OracleError(f"oracle Bellman residual {residual:.3e} exceeds 1e-8")
    grid_value = _expected_over_init(env, grid, q.max(axis=1), grid_spec.quadrature_nodes)
    sol = OracleSolution(grid, q, float("nan"), gamma, residual, grid_value, sweeps=sweeps)
    if protocol is not None:
        ev = mc_evaluate(env, sol.policy(), gamma, protocol.n_traj, protocol.resolve_horizon(gamma),
                         rng if rng is not None else derive_stream(0, [0x0AC1E]),
                         protocol.omit_reward_residuals)
        sol.evaluation = ev
        sol.value = ev.mean_discounted
    return sol


def policy_grid_value(env, policy, gamma: float, grid_spec: GridSpec = GridSpec()) -> float:
    """E[V^pi(S_0)] for a deterministic policy, solved on the oracle grid."""
    grid = grid_spec.grid()
    mats, r = _transition_matrices(env, grid, grid_spec.quadrature_nodes)
    acts = np.asarray(policy(grid[:, None]), dtype=np.int64)
    rows = scipy.sparse.vstack([mats[a][i] for i, a in enumerate(acts)]).tocsr()
    lhs = scipy.sparse.identity(len(grid), format="csc") - gamma * rows.tocsc()
    v = scipy.sparse.linalg.spsolve(lhs, r[np.arange(len(grid)), acts])
    return _expected_over_init(env, grid, v, grid_spec.quadrature_nodes)


def _params_dict(env) -> dict:
    d = asdict(env) if is_dataclass(env) else dict(vars(env))
    d = {k: v for k, v in d.items() if not k.startswith("_")}
    d["kind"] = type(env).__name__
    return d


def oracle_cache_key(env, gamma: float, grid_spec: GridSpec, protocol: EvalProtocol | None,
                     rng: RngStream | None) -> str:
    payload = {
        "env": _params_dict(env),
        "gamma": gamma,
        "grid": asdict(grid_spec),
        "protocol": None if protocol is None else asdict(protocol),
        "rng": None if rng is None else [rng.seed, list(rng.labels)],
    }
    blob = json.dumps(payload, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def load_or_build_oracle(env, gamma: float, cache_dir: str | Path, grid_spec: GridSpec = GridSpec(),
                         protocol: EvalProtocol | None = EvalProtocol(),
                         rng: RngStream | None = None) -> OracleSolution:
    """value_iteration_oracle with a JSON cache keyed by its inputs."""
    cache_dir = Path(cache_dir)
    path = cache_dir / f"oracle-{oracle_cache_key(env, gamma, grid_spec, protocol, rng)}.json"
    if path.exists():
        return OracleSolution.from_dict(json.loads(path.read_text()))
    sol = value_iteration_oracle(env, gamma, grid_spec, protocol, rng)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sol.to_dict()))
    return sol


def regret(oracle, policy_value: ValueEstimate, metric: str = "discounted") -> float:
    """Oracle value minus policy value; not clipped at zero."""
    ref = oracle.evaluation if isinstance(oracle, OracleSolution) else oracle
    if ref is None:
        raise InputError("oracle has no Monte-Carlo evaluation")
    for attr in ("gamma", "horizon", "n_traj"):
        if getattr(ref, attr) != getattr(policy_value, attr):
            raise InputError(f"evaluation protocols differ in {attr}: "
                             f"{getattr(ref, attr)} vs {getattr(policy_value, attr)}")
    if metric == "discounted":
        return ref.mean_discounted - policy_value.mean_discounted
    if metric == "average":
        return ref.mean_average_reward - policy_value.mean_average_reward
    raise InputError(f"unknown metric {metric!r}")


@dataclass(frozen=True, eq=False)
class SandwichEstimate:
    """Plug-in pieces of the asymptotic covariance of beta-hat.

    ``W_hat`` and ``Sigma_hat`` carry the (1 - gamma)^{-1} M^{-1} and M^{-1}
    normalisations; ``covariance`` is the variance of beta-hat itself,
    ``A^{-1} S A^{-T}`` with ``A = sum_b Phi_b (phi_b - gamma phi'_b)^T`` and
    ``S = sum_b Phi_b delta_b delta_b^T Phi_b^T``.
    """

    W_hat: np.ndarray
    Sigma_hat: np.ndarray
    covariance: np.ndarray
    n_blocks: int


def sandwich_variance(data: Dataset, fmap: FeatureMap, beta_hat, instrument, gamma: float,
                      controls=None) -> SandwichEstimate:
    """Robust covariance of a converged estimate.

    ``instrument`` is an (N, d, M) array or a learner name, in which case
    that learner's instrument is rebuilt at ``beta_hat``.
    """
    from .learners import FitControls, instrument_at

    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    if isinstance(instrument, str):
        instrument = instrument_at(instrument, data, fmap, beta_hat, gamma,
                                   controls if controls is not None else FitControls())
    inst = np.asarray(instrument, dtype=np.float64)
    n, m = data.actions.shape
    if inst.shape != (n, fmap.d, m):
        raise InputError(f"instrument of shape {inst.shape}, expected {(n, fmap.d, m)}")
    phi = fmap(data.actions, data.states)  # (N, M, d)
    coef = beta_hat.reshape(fmap.action_count, fmap.block_size)
    next_act = np.argmax(fmap.state_features(data.next_states) @ coef.T, axis=-1)
    phi_next = fmap(next_act, data.next_states)
    delta = td_residuals(data, fmap, beta_hat, beta_hat, gamma).residuals  # (N, M)

    a_sum = np.einsum("bdm,bme->de", inst, phi - gamma * phi_next)
    u = np.einsum("bdm,bm->bd", inst, delta)
    s_sum = u.T @ u
    cond = system_condition(a_sum)
    if not cond <= MAX_CONDITION:
        raise StabilityError("estimating-equation Jacobian is singular", cond)
    a_inv = np.linalg.inv(a_sum)
    cov = a_inv @ s_sum @ a_inv.T
    cov = 0.5 * (cov + cov.T)
    w_hat = a_sum / n / ((1 - gamma) * m)
    sigma_hat = s_sum / n / m
    return SandwichEstimate(w_hat, sigma_hat, cov, n)


def select_degree(data: Dataset, learner, degrees=(1, 2, 3, 4), folds: int = 5,
                  rng: RngStream | None = None, gamma: float = 0.9, controls=None) -> int:
    """Cluster-wise K-fold choice of the polynomial degree.

    The score is the held-out mean squared TD residual with the fitted
    coefficients used for both the evaluation and the bootstrap target.
    A degree whose fit fails on any fold is skipped with a warning.
    """
    from .learners import FitControls, fit

    controls = controls if controls is not None else FitControls()
    degrees = sorted(set(int(g) for g in degrees))
    if len(degrees) == 1:
        return degrees[0]
    k = min(folds, data.n_clusters)
    if k < 2:
        raise InputError("cross-validation needs at least two clusters")
    gen = (rng if rng is not None else derive_stream(0)).generator()
    parts = np.array_split(gen.permutation(data.n_clusters), k)
    scores = {}
    for g in degrees:
        fmap = FeatureMap(data.action_count, data.state_dim, g)
        losses = []
        try:
            for i in range(k):
                held = data.select_clusters(parts[i])
                train = data.select_clusters(np.concatenate([parts[j] for j in range(k) if j != i]))
                if callable(learner):
                    rep = learner(train, fmap, gamma, controls)
                else:
                    rep = fit(learner, train, fmap, gamma, controls)
                td = td_residuals(held, fmap, rep.beta, rep.beta, gamma)
                losses.append(float(np.mean(td.residuals**2)))
        except SingularSystemError as exc:
            warnings.warn(f"degree {g} disqualified: {exc}", RuntimeWarning, stacklevel=2)
            continue
        scores[g] = float(np.mean(losses))
    if not scores:
        raise SingularSystemError("every candidate degree was rank deficient")
    best = min(scores.values())
    return min(g for g, s in scores.items() if s == best)
