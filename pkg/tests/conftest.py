from dataclasses import dataclass

import numpy as np
import pytest

from gfqi.core import Dataset
from gfqi.envs import SemiSyntheticEnvParams


@dataclass(frozen=True)
class TwoStateMDP:
    """States {0, 1}, actions {0, 1}; action 1 flips the state."""

    rewards: tuple = ((0.0, 1.0), (2.0, 0.5))  # rewards[s][a]
    action_count = 2
    state_dim = 1
    state_noise_var = 0.0
    init_state_mean = 0.0
    init_state_std = 0.0

    def transition_mean(self, s, a):
        s, a = np.asarray(s), np.asarray(a)
        return np.where(a == 1, 1 - s, s).astype(np.float64)

    def mean_reward(self, s, a):
        r = np.asarray(self.rewards)
        return r[np.rint(s).astype(int), np.asarray(a)]

    def q_star(self, gamma, sweeps=5000):
        """Tabular value iteration, Q[s, a]."""
        r = np.asarray(self.rewards)
        q = np.zeros((2, 2))
        for _ in range(sweeps):
            v = q.max(axis=1)
            q = np.array([[r[s, a] + gamma * v[1 - s if a else s] for a in (0, 1)] for s in (0, 1)])
        return q

    def dataset(self, copies=3):
        pairs = [(s, a) for s in (0, 1) for a in (0, 1)] * copies
        s = np.array([p[0] for p in pairs], dtype=float)
        a = np.array([p[1] for p in pairs])
        return Dataset(s[:, None, None], a[:, None], self.mean_reward(s, a)[:, None],
                       self.transition_mean(s, a)[:, None, None],
                       n_clusters=len(pairs), horizon=1, action_count=2)


@pytest.fixture
def two_state():
    return TwoStateMDP()


def constant_next_state_env(c=0.5):
    """Noiseless environment whose next state is always ``c``.

    With quadratic rewards, Q*(a, s) = r(a, s) + gamma V*(c) is exactly
    linear in degree-2 features.
    """
    return SemiSyntheticEnvParams(
        transition_coefs=((c, 0, 0), (c, 0, 0)),
        reward_coefs=((0.5, 1.0, -0.3), (0.2, -0.4, 0.6)),
        sigma_s_sq=0.0, sigma_r_sq=0.0, psi=0.0,
        init_state_mean=0.0, init_state_std=1.0,
    )


def constant_next_state_beta(env, gamma):
    rc = np.asarray(env.reward_coefs)
    c = env.transition_coefs[0][0]
    v_c = max(env.mean_reward(c, a) for a in (0, 1)) / (1 - gamma)
    beta = rc.copy()
    beta[:, 0] += gamma * v_c
    return beta.ravel()
