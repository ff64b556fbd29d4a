"""Clustered-MDP simulators and behaviour policies.

Both shipped environments have scalar states and two actions. Each one
is described by its mean transition ``f(s, a)``, its mean reward
``r(s, a)`` and four Gaussian noise variances: a cluster-level and a
member-level component for the state and for the reward. Cluster-level
shocks are drawn once per (cluster, time) and added to every member,
which is what makes members of a cluster dependent. All shocks are
drawn fresh at every time step, so each trajectory is marginally Markov.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, Dataset, ExperimentConfig, InputError, RngStream

__all__ = [
    "SyntheticEnvParams",
    "SemiSyntheticEnvParams",
    "UniformPolicy",
    "ConstantPolicy",
    "GreedyPolicy",
    "EpsilonGreedyPolicy",
    "simulate",
    "simulate_synthetic",
    "simulate_semi_synthetic",
    "rollout_policy",
    "env_from_dict",
]


class _ScalarEnv:
    action_count = 2
    state_dim = 1

    def initial_states(self, gen: np.random.Generator, shape) -> np.ndarray:
        return self.init_state_mean + self.init_state_std * gen.standard_normal(shape)

    @property
    def state_noise_var(self) -> float:
        """Marginal (per-trajectory) variance of the transition noise."""
        return self.state_cluster_var + self.state_member_var

    @property
    def reward_noise_var(self) -> float:
        return self.reward_cluster_var + self.reward_member_var


@dataclass(frozen=True)
class SyntheticEnvParams(_ScalarEnv):
    """S' = c_s S (2A - 1) + beta_t,  R = c_r S^2 (2A - 1) + S + alpha_t + eps.

    ``beta_t`` (variance ``sigma1_sq``) and ``alpha_t`` (``sigma3_sq``)
    are shared by every member of a cluster at time t; ``eps``
    (``sigma2_sq``) is drawn per member.
    """

    state_coef: float = 0.5
    reward_quad_coef: float = 0.25
    sigma1_sq: float = 0.25
    sigma2_sq: float = 0.25
    sigma3_sq: float = 4.0
    init_state_std: float = 1.0
    init_state_mean: float = 0.0

    def __post_init__(self):
        if min(self.sigma1_sq, self.sigma2_sq, self.sigma3_sq, self.init_state_std) < 0:
            raise ConfigurationError("variances must be nonnegative")

    def transition_mean(self, s, a):
        return self.state_coef * s * (2 * np.asarray(a) - 1)

    def mean_reward(self, s, a):
        return self.reward_quad_coef * s**2 * (2 * np.asarray(a) - 1) + s

    state_cluster_var = property(lambda self: self.sigma1_sq)
    state_member_var = property(lambda self: 0.0)
    reward_cluster_var = property(lambda self: self.sigma3_sq)
    reward_member_var = property(lambda self: self.sigma2_sq)


# Illustrative mean models on the cube-root step-count scale (mean near 20)
# with mood-like rewards; not fitted to any real data.
DEFAULT_TRANSITION_COEFS = ((5.0, 0.75, 0.0), (5.6, 0.75, -0.001))
DEFAULT_REWARD_COEFS = ((5.0, 0.1, -0.002), (4.9, 0.12, -0.0022))


def _poly(coefs: np.ndarray, s, a):
    a = np.asarray(a)
    c = coefs[a]
    return c[..., 0] + c[..., 1] * s + c[..., 2] * s**2


@dataclass(frozen=True)
class SemiSyntheticEnvParams(_ScalarEnv):
    """Quadratic-in-state mean models with a psi-controlled variance split.

    With marginal state variance ``sigma_s_sq`` and intra-cluster share
    ``rho_s_sq``, the member-level state noise has variance
    ``sigma_s_sq * (1 - psi * rho_s_sq)`` and the cluster-level one
    ``sigma_s_sq * psi * rho_s_sq``; rewards are split the same way.
    The marginal variances therefore do not depend on ``psi``.

    ``transition_coefs[a] = (c0, c1, c2)`` gives ``f(s, a) = c0 + c1 s + c2 s^2``;
    ``reward_coefs`` does the same for the mean reward.
    """

    transition_coefs: tuple = DEFAULT_TRANSITION_COEFS
    reward_coefs: tuple = DEFAULT_REWARD_COEFS
    sigma_s_sq: float = 11.5
    rho_s_sq: float = 0.07
    sigma_r_sq: float = 2.2
    rho_r_sq: float = 0.09
    psi: float = 1.0
    init_state_mean: float = 20.0
    init_state_std: float = 11.5**0.5
    _tc: np.ndarray = field(init=False, repr=False, compare=False)
    _rc: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tc = np.asarray(self.transition_coefs, dtype=np.float64)
        rc = np.asarray(self.reward_coefs, dtype=np.float64)
        if tc.shape != (2, 3) or rc.shape != (2, 3):
            raise ConfigurationError("coefficients must be 2 actions x (c0, c1, c2)")
        if min(self.sigma_s_sq, self.sigma_r_sq, self.psi, self.init_state_std) < 0:
            raise ConfigurationError("variances and psi must be nonnegative")
        for name in ("rho_s_sq", "rho_r_sq"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.psi * self.rho_s_sq > 1 or self.psi * self.rho_r_sq > 1:
            raise ConfigurationError(
                f"psi * rho^2 must not exceed 1 (psi={self.psi}, "
                f"rho_s^2={self.rho_s_sq}, rho_r^2={self.rho_r_sq})"
            )
        object.__setattr__(self, "transition_coefs", tuple(map(tuple, tc.tolist())))
        object.__setattr__(self, "reward_coefs", tuple(map(tuple, rc.tolist())))
        object.__setattr__(self, "_tc", tc)
        object.__setattr__(self, "_rc", rc)

    def transition_mean(self, s, a):
        return _poly(self._tc, s, a)

    def mean_reward(self, s, a):
        return _poly(self._rc, s, a)

    state_cluster_var = property(lambda self: self.sigma_s_sq * self.psi * self.rho_s_sq)
    state_member_var = property(lambda self: self.sigma_s_sq * (1 - self.psi * self.rho_s_sq))
    reward_cluster_var = property(lambda self: self.sigma_r_sq * self.psi * self.rho_r_sq)
    reward_member_var = property(lambda self: self.sigma_r_sq * (1 - self.psi * self.rho_r_sq))


def env_from_dict(d: dict):
    """Build an environment from a JSON-style section with a ``kind`` key."""
    d = dict(d)
    kind = d.pop("kind", "synthetic")
    try:
        if kind == "synthetic":
            return SyntheticEnvParams(**d)
        if kind == "semi_synthetic":
            return SemiSyntheticEnvParams(**d)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    raise ConfigurationError(f"unknown environment kind {kind!r}")


# Policies map states (..., p) to integer actions (...). Randomised
# policies draw from the generator they are handed.


@dataclass(frozen=True)
class UniformPolicy:
    action_count: int = 2

    def __call__(self, states, gen):
        return gen.integers(0, self.action_count, size=np.shape(states)[:-1])

    def probabilities(self, states):
        shape = np.shape(states)[:-1] + (self.action_count,)
        return np.full(shape, 1.0 / self.action_count)


@dataclass(frozen=True)
class ConstantPolicy:
    action: int

    def __call__(self, states, gen=None):
        return np.full(np.shape(states)[:-1], self.action, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class GreedyPolicy:
    """argmax_a phi(a, s)^T beta with ties going to the lowest action index."""

    fmap: object
    beta: np.ndarray

    def q_values(self, states) -> np.ndarray:
        coef = np.asarray(self.beta).reshape(self.fmap.action_count, self.fmap.block_size)
        return self.fmap.state_features(states) @ coef.T

    def __call__(self, states, gen=None):
        return np.argmax(self.q_values(states), axis=-1)


@dataclass(frozen=True, eq=False)
class EpsilonGreedyPolicy:
    greedy: GreedyPolicy
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ConfigurationError("epsilon must lie in [0, 1]")

    def __call__(self, states, gen):
        shape = np.shape(states)[:-1]
        explore = gen.random(shape) < self.epsilon
        rand = gen.integers(0, self.greedy.fmap.action_count, size=shape)
        return np.where(explore, rand, self.greedy(states))

    def probabilities(self, states):
        k = self.greedy.fmap.action_count
        probs = np.full(np.shape(states)[:-1] + (k,), self.epsilon / k)
        g = self.greedy(states)
        np.put_along_axis(probs, g[..., None], 1 - self.epsilon + self.epsilon / k, axis=-1)
        return probs


def _run(env, policy, n_clusters, cluster_size, horizon, gen, omit_reward_residuals=False):
    shape = (n_clusters, cluster_size)
    states = np.empty((horizon + 1,) + shape)
    actions = np.empty((horizon,) + shape, dtype=np.int64)
    rewards = np.empty((horizon,) + shape)
    states[0] = env.initial_states(gen, shape)
    sc, sm = np.sqrt(env.state_cluster_var), np.sqrt(env.state_member_var)
    rc, rm = np.sqrt(env.reward_cluster_var), np.sqrt(env.reward_member_var)
    for t in range(horizon):
        s = states[t]
        a = np.asarray(policy(s[..., None], gen), dtype=np.int64)
        if a.shape != shape:
            raise InputError(f"policy returned shape {a.shape}, expected {shape}")
        if a.min() < 0 or a.max() >= env.action_count:
            raise InputError("policy returned an invalid action")
        actions[t] = a
        state_noise = sc * gen.standard_normal((n_clusters, 1)) + sm * gen.standard_normal(shape)
        reward_noise = rc * gen.standard_normal((n_clusters, 1)) + rm * gen.standard_normal(shape)
        states[t + 1] = env.transition_mean(s, a) + state_noise
        rewards[t] = env.mean_reward(s, a)
        if not omit_reward_residuals:
            rewards[t] += reward_noise
    return states, actions, rewards


def simulate(env, config: ExperimentConfig, rng: RngStream, policy=None) -> Dataset:
    """Offline dataset of ``config.n_clusters`` clusters over ``config.horizon`` steps."""
    if policy is None:
        policy = UniformPolicy(env.action_count)
    n, m, horizon = config.n_clusters, config.cluster_size, config.horizon
    states, actions, rewards = _run(env, policy, n, m, horizon, rng.generator())
    # (T+1, n, M) -> blocks ordered cluster-major: (n*T, M, 1)
    s = states[:-1].transpose(1, 0, 2).reshape(n * horizon, m, 1)
    s_next = states[1:].transpose(1, 0, 2).reshape(n * horizon, m, 1)
    return Dataset(
        states=s,
        actions=actions.transpose(1, 0, 2).reshape(n * horizon, m),
        rewards=rewards.transpose(1, 0, 2).reshape(n * horizon, m),
        next_states=s_next,
        n_clusters=n,
        horizon=horizon,
        action_count=env.action_count,
    )


def simulate_synthetic(params: SyntheticEnvParams, config: ExperimentConfig, rng: RngStream,
                       policy=None) -> Dataset:
    if not isinstance(params, SyntheticEnvParams):
        raise ConfigurationError("expected SyntheticEnvParams")
    return simulate(params, config, rng, policy)


def simulate_semi_synthetic(params: SemiSyntheticEnvParams, config: ExperimentConfig,
                            rng: RngStream, policy=None) -> Dataset:
    if not isinstance(params, SemiSyntheticEnvParams):
        raise ConfigurationError("expected SemiSyntheticEnvParams")
    if config.psi != params.psi:
        params = _with_psi(params, config.psi)
    return simulate(params, config, rng, policy)


def _with_psi(params: SemiSyntheticEnvParams, psi: float) -> SemiSyntheticEnvParams:
    from dataclasses import replace

    return replace(params, psi=psi)


def rollout_policy(env, policy, n_traj: int, horizon: int, rng: RngStream,
                   omit_reward_residuals: bool = True, cluster_size: int = 1) -> np.ndarray:
    """Reward sequences of shape (n_traj, horizon).

    Trajectories are grouped into clusters of ``cluster_size`` that share
    cluster shocks; the default treats every trajectory as its own cluster.
    With ``omit_reward_residuals`` the rewards are their conditional means
    while state noise is kept.
    """
    if n_traj < 1 or horizon < 1:
        raise ConfigurationError("n_traj and horizon must be >= 1")
    if n_traj % cluster_size:
        raise ConfigurationError("n_traj must be a multiple of cluster_size")
    _, _, rewards = _run(env, policy, n_traj // cluster_size, cluster_size, horizon,
                         rng.generator(), omit_reward_residuals)
    return rewards.reshape(horizon, n_traj).T.copy()
