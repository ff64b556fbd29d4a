"""Shared data model, configuration, seeded streams and errors."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "GfqiError",
    "ConfigurationError",
    "InputError",
    "SingularSystemError",
    "StabilityError",
    "OracleError",
    "DegradedConditioningWarning",
    "CorrelationFallbackWarning",
    "Transition",
    "ClusterBlock",
    "Dataset",
    "ExperimentConfig",
    "RngStream",
    "derive_stream",
    "write_dataset_csv",
    "read_dataset_csv",
]


class GfqiError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(GfqiError, ValueError):
    pass


class InputError(GfqiError, ValueError):
    pass


class SingularSystemError(GfqiError, np.linalg.LinAlgError):
    """A linear system is singular or too ill-conditioned to trust.

    The estimated 2-norm condition number is kept on ``condition``.
    """

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition number {condition:.3e})")
        self.condition = condition


class StabilityError(SingularSystemError):
    """The linearised estimating-equation matrix is not invertible."""


class OracleError(GfqiError, RuntimeError):
    pass


class DegradedConditioningWarning(RuntimeWarning):
    pass


class CorrelationFallbackWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


@dataclass(frozen=True)
class ClusterBlock:
    """All members of one cluster at one decision time."""

    cluster_id: int
    time: int
    members: tuple[Transition, ...]

    @property
    def states(self) -> np.ndarray:
        return np.stack([m.state for m in self.members])

    @property
    def actions(self) -> np.ndarray:
        return np.array([m.action for m in self.members], dtype=np.int64)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([m.reward for m in self.members], dtype=np.float64)

    @property
    def next_states(self) -> np.ndarray:
        return np.stack([m.next_state for m in self.members])


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Clustered transitions stored as dense arrays.

    Arrays are indexed ``[block, member, ...]`` where blocks are ordered
    cluster-major then by time, so block ``b`` belongs to cluster
    ``b // horizon`` at time ``b % horizon``.

    states, next_states : (N, M, p) float64
    actions : (N, M) int64
    rewards : (N, M) float64
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    n_clusters: int
    horizon: int
    action_count: int
    cluster_ids: np.ndarray = field(default=None)  # type: ignore[assignment]
    times: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        next_states = np.asarray(self.next_states, dtype=np.float64)
        if states.ndim == 2:
            states = states[..., None]
        if next_states.ndim == 2:
            next_states = next_states[..., None]
        actions = np.asarray(self.actions)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if states.ndim != 3 or states.shape != next_states.shape:
            raise InputError(
                f"states {states.shape} and next_states {next_states.shape} "
                "must both be (blocks, members, state_dim)"
            )
        n_blocks, m = states.shape[:2]
        if actions.shape != (n_blocks, m) or rewards.shape != (n_blocks, m):
            raise InputError("actions and rewards must be (blocks, members)")
        if n_blocks != self.n_clusters * self.horizon:
            raise InputError(
                f"{n_blocks} blocks but n_clusters*horizon = "
                f"{self.n_clusters * self.horizon}"
            )
        if not np.issubdtype(actions.dtype, np.integer):
            if not np.all(actions == np.round(actions)):
                raise InputError("actions must be integer indices")
        actions = actions.astype(np.int64)
        if actions.size and (actions.min() < 0 or actions.max() >= self.action_count):
            raise InputError(f"action index outside [0, {self.action_count})")
        cluster_ids = self.cluster_ids
        times = self.times
        if cluster_ids is None:
            cluster_ids = np.repeat(np.arange(self.n_clusters), self.horizon)
        if times is None:
            times = np.tile(np.arange(self.horizon), self.n_clusters)
        set_ = object.__setattr__
        set_(self, "states", _readonly(states))
        set_(self, "next_states", _readonly(next_states))
        set_(self, "actions", _readonly(actions))
        set_(self, "rewards", _readonly(rewards))
        set_(self, "cluster_ids", _readonly(np.asarray(cluster_ids, dtype=np.int64)))
        set_(self, "times", _readonly(np.asarray(times, dtype=np.int64)))

    @property
    def n_blocks(self) -> int:
        """N, the number of cluster-time tuple batches."""
        return self.states.shape[0]

    @property
    def cluster_size(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    def __len__(self) -> int:
        return self.n_blocks

    def blocks(self) -> Iterator[ClusterBlock]:
        for b in range(self.n_blocks):
            members = tuple(
                Transition(
                    self.states[b, j],
                    int(self.actions[b, j]),
                    float(self.rewards[b, j]),
                    self.next_states[b, j],
                )
                for j in range(self.cluster_size)
            )
            yield ClusterBlock(int(self.cluster_ids[b]), int(self.times[b]), members)

    @classmethod
    def from_blocks(cls, blocks: Sequence[ClusterBlock], action_count: int) -> "Dataset":
        if not blocks:
            raise InputError("no blocks")
        sizes = {len(b.members) for b in blocks}
        if len(sizes) != 1:
            raise InputError(f"ragged clusters are not supported (sizes {sorted(sizes)})")
        ids = np.array([b.cluster_id for b in blocks])
        times = np.array([b.time for b in blocks])
        order = np.lexsort((times, ids))
        ids, times = ids[order], times[order]
        uniq = np.unique(ids)
        horizon = len(blocks) // len(uniq)
        if horizon * len(uniq) != len(blocks) or not np.all(np.bincount(np.searchsorted(uniq, ids)) == horizon):
            raise InputError("every cluster must contribute the same number of blocks")
        blocks = [blocks[i] for i in order]
        return cls(
            states=np.stack([b.states for b in blocks]),
            actions=np.stack([b.actions for b in blocks]),
            rewards=np.stack([b.rewards for b in blocks]),
            next_states=np.stack([b.next_states for b in blocks]),
            n_clusters=len(uniq),
            horizon=horizon,
            action_count=action_count,
            cluster_ids=ids,
            times=times,
        )

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flattened ``(states, actions, rewards, next_states)`` over all tuples."""
        p = self.state_dim
        return (
            self.states.reshape(-1, p),
            self.actions.reshape(-1),
            self.rewards.reshape(-1),
            self.next_states.reshape(-1, p),
        )

    def select_clusters(self, clusters: Sequence[int]) -> "Dataset":
        """Sub-dataset holding the given cluster positions (0..n_clusters-1)."""
        clusters = np.asarray(sorted(clusters), dtype=np.int64)
        idx = (clusters[:, None] * self.horizon + np.arange(self.horizon)).ravel()
        return Dataset(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            n_clusters=len(clusters),
            horizon=self.horizon,
            action_count=self.action_count,
            cluster_ids=self.cluster_ids[idx],
            times=self.times[idx],
        )

    def permute_blocks(self, order: Sequence[int]) -> "Dataset":
        """Reorder blocks; only meaningful for order-invariant statistics."""
        order = np.asarray(order)
        return dataclasses.replace(
            self,
            states=self.states[order],
            actions=self.actions[order],
            rewards=self.rewards[order],
            next_states=self.next_states[order],
            cluster_ids=self.cluster_ids[order],
            times=self.times[order],
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_clusters == other.n_clusters
            and self.horizon == other.horizon
            and self.action_count == other.action_count
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("states", "actions", "rewards", "next_states", "cluster_ids", "times")
            )
        )


@dataclass(frozen=True)
class ExperimentConfig:
    n_clusters: int = 5
    cluster_size: int = 5
    horizon: int = 5
    psi: float = 1.0
    gamma: float = 0.9
    degree: int = 2
    max_iters: int | None = None
    tol: float = 1e-6
    seed: int = 0
    replications: int = 50

    def __post_init__(self):
        for name in ("n_clusters", "cluster_size", "horizon", "degree", "replications"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if self.psi < 0:
            raise ConfigurationError("psi must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by a seed and a label path.

    Streams are derived by hashing, never by advancing shared state, so
    any two streams can be created in any order or process.
    """

    seed: int
    labels: tuple[int, ...] = ()

    @property
    def stream_id(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<Q", self.seed))
        for lab in self.labels:
            h.update(struct.pack("<q", lab))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.labels)
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, *labels: int) -> "RngStream":
        return RngStream(self.seed, self.labels + tuple(int(x) for x in labels))


def derive_stream(seed: int, labels: Sequence[int] = ()) -> RngStream:
    if not 0 <= int(seed) < 2**64:
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    return RngStream(int(seed), tuple(int(x) for x in labels))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_dataset_csv(data: Dataset, path: str | Path) -> None:
    p = data.state_dim
    header = ["cluster_id", "time", "member", "action", "reward"]
    header += [f"state_{k}" for k in range(p)] + [f"next_state_{k}" for k in range(p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for b in range(data.n_blocks):
            for j in range(data.cluster_size):
                w.writerow(
                    [int(data.cluster_ids[b]), int(data.times[b]), j, int(data.actions[b, j]),
                     _fmt(data.rewards[b, j])]
                    + [_fmt(v) for v in data.states[b, j]]
                    + [_fmt(v) for v in data.next_states[b, j]]
                )


def read_dataset_csv(path: str | Path, action_count: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [row for row in r if row]
    p = sum(1 for h in header if h.startswith("state_"))
    if header[:5] != ["cluster_id", "time", "member", "action", "reward"] or len(header) != 5 + 2 * p:
        raise InputError(f"{path}: unexpected header {header}")
    if not rows:
        raise InputError(f"{path}: no rows")
    arr = np.array([[float(v) for v in row] for row in rows])
    cid, t, mem = arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64)
    m = int(mem.max()) + 1
    if len(arr) % m:
        raise InputError(f"{path}: ragged clusters are not supported")
    order = np.lexsort((mem, t, cid))
    arr = arr[order]
    n_blocks = len(arr) // m
    arr = arr.reshape(n_blocks, m, -1)
    if np.any(arr[:, :, 2] != np.arange(m)) or np.any(arr[:, :, 0] != arr[:, :1, 0]) or np.any(arr[:, :, 1] != arr[:, :1, 1]):
        raise InputError(f"{path}: every (cluster, time) needs members 0..{m - 1}")
    actions = arr[:, :, 3].astype(np.int64)
    ids = arr[:, 0, 0].astype(np.int64)
    n_clusters = len(np.unique(ids))
    return Dataset(
        states=arr[:, :, 5:5 + p],
        actions=actions,
        rewards=arr[:, :, 4],
        next_states=arr[:, :, 5 + p:],
        n_clusters=n_clusters,
        horizon=n_blocks // n_clusters,
        action_count=int(action_count if action_count is not None else actions.max() + 1),
        cluster_ids=ids,
        times=arr[:, 0, 1].astype(np.int64),
    )
