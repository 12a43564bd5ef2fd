"""Replay storage and running state statistics for the learners."""
from typing import Optional

import numpy as np


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be at least 1.")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self._position = 0
        self._size = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self._size

    def add(self, states, actions, rewards, next_states, terminals) -> None:
        """Adds a batch of transitions, overwriting the oldest when full."""
        states = np.atleast_2d(states)
        for i in range(states.shape[0]):
            slot = self._position
            self.states[slot] = states[i]
            self.actions[slot] = np.atleast_2d(actions)[i]
            self.rewards[slot] = np.atleast_1d(rewards)[i]
            self.next_states[slot] = np.atleast_2d(next_states)[i]
            self.terminals[slot] = np.atleast_1d(terminals)[i]
            self._position = (slot + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer.")
        index = self._rng.integers(0, self._size, size=batch_size)
        return {
            "states": self.states[index],
            "actions": self.actions[index],
            "rewards": self.rewards[index],
            "next_states": self.next_states[index],
            "terminals": self.terminals[index],
        }


class RunningNormalizer:
    """Running mean and variance of states, merged batch by batch.

    Normalized values are clipped to +-clip. While `frozen`, `update` is a
    no-op so that evaluation sees fixed statistics.
    """

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.eps = eps
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        if batch.shape[0] == 0:
            return
        batch_mean = batch.mean(axis=0)
        batch_var = batch.var(axis=0)
        batch_count = batch.shape[0]
        delta = batch_mean - self.mean
        total = self.count + batch_count
        self.mean = self.mean + delta * batch_count / total
        m2 = self.var * self.count + batch_var * batch_count + delta * delta * self.count * batch_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, states: np.ndarray) -> np.ndarray:
        normalized = (np.asarray(states, dtype=float) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(normalized, -self.clip, self.clip)

    def state_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count, "clip": self.clip}

    @classmethod
    def from_state_dict(cls, values: dict, frozen: Optional[bool] = None) -> "RunningNormalizer":
        normalizer = cls(len(values["mean"]), clip=values["clip"])
        normalizer.mean = np.asarray(values["mean"], dtype=float)
        normalizer.var = np.asarray(values["var"], dtype=float)
        normalizer.count = float(values["count"])
        if frozen is not None:
            normalizer.frozen = frozen
        return normalizer
