"""Action-blocked polynomial state-action features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClusterBlock, ConfigurationError, InputError

__all__ = ["FeatureMap", "featurize", "featurize_block"]


@dataclass(frozen=True)
class FeatureMap:
    """phi(a, s): one polynomial block per action, zero outside block ``a``.

    Each block is ``[1, s_0, s_0^2, ..., s_0^g, s_1, ..., s_{p-1}^g]``,
    i.e. an intercept followed by per-coordinate powers (no cross terms).
    """

    action_count: int
    state_dim: int = 1
    degree: int = 2

    def __post_init__(self):
        if self.action_count < 1 or self.state_dim < 1 or self.degree < 1:
            raise ConfigurationError("action_count, state_dim and degree must be >= 1")

    @property
    def block_size(self) -> int:
        return 1 + self.state_dim * self.degree

    @property
    def d(self) -> int:
        return self.action_count * self.block_size

    def state_features(self, states) -> np.ndarray:
        """Polynomial block for states of shape (..., p); returns (..., block_size)."""
        s = np.asarray(states, dtype=np.float64)
        if s.ndim == 0 or s.shape[-1] != self.state_dim:
            if self.state_dim == 1:
                s = s[..., None]
            else:
                raise InputError(f"state dimension {s.shape[-1:]} != {self.state_dim}")
        powers = s[..., None] ** np.arange(1, self.degree + 1)
        powers = powers.reshape(s.shape[:-1] + (self.state_dim * self.degree,))
        return np.concatenate([np.ones(s.shape[:-1] + (1,)), powers], axis=-1)

    def __call__(self, actions, states) -> np.ndarray:
        """Vectorised featurisation; ``actions`` (...) and ``states`` (..., p) -> (..., d)."""
        block = self.state_features(states)
        a = np.asarray(actions)
        if a.shape != block.shape[:-1]:
            raise InputError(f"actions shape {a.shape} does not match states {block.shape[:-1]}")
        if a.size and (a.min() < 0 or a.max() >= self.action_count):
            raise InputError(f"action index outside [0, {self.action_count})")
        out = np.zeros(block.shape[:-1] + (self.action_count, self.block_size))
        np.put_along_axis(out, a[..., None, None].astype(np.intp), block[..., None, :], axis=-2)
        return out.reshape(block.shape[:-1] + (self.d,))

    def all_actions(self, states) -> np.ndarray:
        """Features of every action at each state: (..., action_count, d)."""
        block = self.state_features(states)
        lead = block.shape[:-1]
        out = np.zeros(lead + (self.action_count, self.action_count, self.block_size))
        for a in range(self.action_count):
            out[..., a, a, :] = block
        return out.reshape(lead + (self.action_count, self.d))


def featurize(fmap: FeatureMap, action: int, state) -> np.ndarray:
    s = np.atleast_1d(np.asarray(state, dtype=np.float64))
    if s.shape != (fmap.state_dim,):
        raise InputError(f"state of shape {s.shape} for state_dim {fmap.state_dim}")
    if not 0 <= int(action) < fmap.action_count:
        raise InputError(f"action {action} outside [0, {fmap.action_count})")
    return fmap(np.int64(action), s)


def featurize_block(fmap: FeatureMap, block: ClusterBlock) -> np.ndarray:
    """d x M matrix whose column m is phi(A^(m), S^(m))."""
    return fmap(block.actions, block.states).T
