from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray | int
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    """Stacked transitions; ``a`` is (B,) int for discrete actions, else (B, act_dim)."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        items = list(items)
        return cls(
            s=np.array([t.s for t in items], dtype=float),
            a=np.array([t.a for t in items]),
            r=np.array([t.r for t in items], dtype=float),
            s_next=np.array([t.s_next for t in items], dtype=float),
            done=np.array([t.done for t in items], dtype=float),
        )


class ReplayBuffer:
    """Fixed-capacity ring buffer; once full the oldest transition is overwritten."""

    def __init__(self, capacity: int, obs_dim: int, action_shape: tuple = (), discrete: bool = False):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.s_next = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity,) + tuple(action_shape), dtype=np.int64 if discrete else float)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r, s_next, done) -> None:
        s = np.asarray(s, dtype=float)
        if s.shape != self.s.shape[1:]:
            raise ShapeError(f"observation shape {s.shape} does not match buffer {self.s.shape[1:]}")
        i = self._next
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.done[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def oldest_index(self) -> int:
        return self._next if self._size == self.capacity else 0

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Distinct indices (sampling without replacement within a batch)."""
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} transitions")
        return rng.choice(self._size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])
