import numpy as np
import pytest

from gfqi.core import ConfigurationError, ExperimentConfig, derive_stream
from gfqi.envs import (
    ConstantPolicy,
    EpsilonGreedyPolicy,
    GreedyPolicy,
    SemiSyntheticEnvParams,
    SyntheticEnvParams,
    UniformPolicy,
    env_from_dict,
    rollout_policy,
    simulate_semi_synthetic,
    simulate_synthetic,
)
from gfqi.features import FeatureMap

QUIET = dict(sigma1_sq=0.0, sigma2_sq=0.0, sigma3_sq=0.0, init_state_std=0.0, init_state_mean=1.0)


def _cfg(n, m, t, **kw):
    return ExperimentConfig(n_clusters=n, cluster_size=m, horizon=t, **kw)


def _within_block_corr(resid):
    """Pearson correlation over all within-block member pairs."""
    m = resid.shape[1]
    x = np.concatenate([resid[:, j] for j in range(m) for k in range(m) if j != k])
    y = np.concatenate([resid[:, k] for j in range(m) for k in range(m) if j != k])
    return np.corrcoef(x, y)[0, 1]


def test_noiseless_state_law():
    data = simulate_synthetic(SyntheticEnvParams(**QUIET), _cfg(1, 1, 2), derive_stream(0), ConstantPolicy(1))
    np.testing.assert_allclose(data.states[:, 0, 0], [1.0, 0.5])
    np.testing.assert_allclose(data.next_states[:, 0, 0], [0.5, 0.25])


def test_noiseless_reward_law():
    data = simulate_synthetic(SyntheticEnvParams(**QUIET), _cfg(1, 1, 1), derive_stream(0), ConstantPolicy(1))
    assert data.rewards[0, 0] == pytest.approx(1.25)


def test_reward_residual_correlation_default_params():
    env = SyntheticEnvParams()
    data = simulate_synthetic(env, _cfg(200, 5, 5), derive_stream(11))
    resid = data.rewards - env.mean_reward(data.states[..., 0], data.actions)
    assert _within_block_corr(resid) == pytest.approx(4 / 4.25, abs=0.02)


def test_state_shock_shared_within_cluster():
    env = SyntheticEnvParams()
    data = simulate_synthetic(env, _cfg(20, 4, 3), derive_stream(12))
    shock = data.next_states[..., 0] - env.transition_mean(data.states[..., 0], data.actions)
    np.testing.assert_allclose(shock, shock[:, :1].repeat(4, axis=1), atol=1e-12)


def test_lag_one_autocorrelation_of_shocks():
    env = SyntheticEnvParams()
    data = simulate_synthetic(env, _cfg(1000, 1, 100), derive_stream(13))
    shock = (data.next_states[..., 0] - env.transition_mean(data.states[..., 0], data.actions)).reshape(1000, 100)
    assert abs(np.corrcoef(shock[:, :-1].ravel(), shock[:, 1:].ravel())[0, 1]) < 0.02
    alpha = (data.rewards - env.mean_reward(data.states[..., 0], data.actions)).reshape(1000, 100)
    assert abs(np.corrcoef(alpha[:, :-1].ravel(), alpha[:, 1:].ravel())[0, 1]) < 0.02


def test_member_permutation_preserves_moments():
    data = simulate_synthetic(SyntheticEnvParams(), _cfg(50, 5, 4), derive_stream(14))
    perm = np.array([np.random.default_rng(b).permutation(5) for b in range(data.n_blocks)])
    r = data.rewards
    rp = np.take_along_axis(r, perm, axis=1)
    np.testing.assert_allclose(rp.mean(), r.mean(), rtol=1e-12)
    np.testing.assert_allclose(rp.var(), r.var(), rtol=1e-12)
    np.testing.assert_allclose(_within_block_corr(rp), _within_block_corr(r), rtol=1e-10)


def test_psi_zero_has_no_cluster_shocks():
    env = SemiSyntheticEnvParams(psi=0.0)
    assert env.state_cluster_var == 0 and env.reward_cluster_var == 0
    data = simulate_semi_synthetic(env, _cfg(300, 4, 2, psi=0.0), derive_stream(15))
    resid = data.rewards - env.mean_reward(data.states[..., 0], data.actions)
    assert abs(_within_block_corr(resid)) < 0.05


def test_variance_split_arithmetic():
    env = SemiSyntheticEnvParams(sigma_s_sq=11.5, rho_s_sq=0.07, psi=5)
    assert env.state_cluster_var == pytest.approx(4.025)
    assert env.state_member_var == pytest.approx(11.5 - 4.025)


def test_psi_controls_reward_correlation():
    env = SemiSyntheticEnvParams(psi=9, rho_r_sq=0.09)
    data = simulate_semi_synthetic(env, _cfg(500, 5, 1, psi=9), derive_stream(16))
    resid = data.rewards - env.mean_reward(data.states[..., 0], data.actions)
    assert _within_block_corr(resid) == pytest.approx(0.81, abs=0.03)


def test_config_psi_overrides_env_psi():
    env = SemiSyntheticEnvParams(psi=1.0)
    data = simulate_semi_synthetic(env, _cfg(400, 5, 1, psi=9), derive_stream(17))
    resid = data.rewards - env.mean_reward(data.states[..., 0], data.actions)
    assert _within_block_corr(resid) > 0.7


def test_marginal_state_variance_invariant_to_psi():
    variances = []
    for psi in (0.0, 1.0, 5.0, 9.0, 11.0):
        env = SemiSyntheticEnvParams(psi=psi)
        data = simulate_semi_synthetic(env, _cfg(20_000, 5, 1, psi=psi), derive_stream(18, [int(psi)]))
        noise = data.next_states[..., 0] - env.transition_mean(data.states[..., 0], data.actions)
        variances.append(noise.var())
    np.testing.assert_allclose(variances, 11.5, rtol=0.03)


def test_invalid_split_rejected():
    with pytest.raises(ConfigurationError):
        SemiSyntheticEnvParams(psi=15, rho_s_sq=0.07)
    with pytest.raises(ConfigurationError):
        SyntheticEnvParams(sigma1_sq=-1)


def test_env_from_dict():
    assert env_from_dict({"kind": "synthetic", "sigma3_sq": 1.0}).sigma3_sq == 1.0
    assert env_from_dict({"kind": "semi_synthetic", "psi": 3}).psi == 3
    with pytest.raises(ConfigurationError):
        env_from_dict({"kind": "nope"})
    with pytest.raises(ConfigurationError):
        env_from_dict({"kind": "synthetic", "bogus": 1})


def test_constant_reward_rollout():
    env = SemiSyntheticEnvParams(reward_coefs=((1, 0, 0), (1, 0, 0)), sigma_s_sq=0.0, sigma_r_sq=0.0)
    rewards = rollout_policy(env, UniformPolicy(), 7, 10, derive_stream(0), omit_reward_residuals=False)
    np.testing.assert_array_equal(rewards, np.ones((7, 10)))


def test_omitted_residuals_give_deterministic_rewards():
    env = SyntheticEnvParams(sigma1_sq=0.0, init_state_std=0.0, init_state_mean=1.0)
    rewards = rollout_policy(env, ConstantPolicy(0), 3, 6, derive_stream(1), omit_reward_residuals=True)
    s, expected = 1.0, []
    for _ in range(6):
        expected.append(-0.25 * s**2 + s)
        s = -0.5 * s
    np.testing.assert_allclose(rewards, np.tile(expected, (3, 1)))


def test_long_evaluation_rollout_shape():
    rewards = rollout_policy(SyntheticEnvParams(), UniformPolicy(), 100, 1000, derive_stream(2))
    assert rewards.shape == (100, 1000)


def test_rollout_clusters_share_shocks():
    env = SyntheticEnvParams()
    a = rollout_policy(env, ConstantPolicy(1), 20, 5, derive_stream(3), False, cluster_size=10)
    assert a.shape == (20, 5)
    with pytest.raises(ConfigurationError):
        rollout_policy(env, ConstantPolicy(1), 15, 5, derive_stream(3), cluster_size=10)


def test_policy_probabilities_sum_to_one():
    s = np.linspace(-3, 3, 11)[:, None]
    np.testing.assert_allclose(UniformPolicy(3).probabilities(s).sum(axis=-1), 1)
    greedy = GreedyPolicy(FeatureMap(2, 1, 1), np.array([0.0, 1.0, 0.0, -1.0]))
    eps = EpsilonGreedyPolicy(greedy, 0.2)
    probs = eps.probabilities(s)
    np.testing.assert_allclose(probs.sum(axis=-1), 1)
    assert probs[-1, 0] == pytest.approx(0.9)


def test_epsilon_greedy_explores_at_rate():
    greedy = GreedyPolicy(FeatureMap(2, 1, 1), np.array([1.0, 0.0, 0.0, 0.0]))
    acts = EpsilonGreedyPolicy(greedy, 0.3)(np.zeros((20_000, 1)), np.random.default_rng(0))
    assert acts.mean() == pytest.approx(0.15, abs=0.01)


def test_simulation_reproducible():
    env, cfg = SyntheticEnvParams(), _cfg(4, 3, 5)
    assert simulate_synthetic(env, cfg, derive_stream(9, [1])).equals(simulate_synthetic(env, cfg, derive_stream(9, [1])))
    assert not simulate_synthetic(env, cfg, derive_stream(9, [2])).equals(simulate_synthetic(env, cfg, derive_stream(9, [1])))
