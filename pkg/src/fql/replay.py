"""Replay storage and orthonormal heterogeneous actions.

Actions live in an axis-aligned box ``[low, high]``. Orthogonality is measured
after centring and scaling the box to ``[-1, 1]^n``; the generated vectors
are unit length there, so mapping them back always lands inside the box.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ActionBoxFrame:
    """Shift/scale between an action box and the centred unit box."""

    def __init__(self, low, high):
        low = np.asarray(low, dtype=float)
        high = np.asarray(high, dtype=float)
        if low.shape != high.shape or not np.all(high > low):
            raise ValueError("action box needs high > low in every dimension")
        self.low, self.high = low, high
        self.shift = (low + high) / 2.0
        self.radius = (high - low) / 2.0

    @property
    def dim(self) -> int:
        return len(self.shift)

    def to_centered(self, action: np.ndarray) -> np.ndarray:
        return (np.asarray(action, dtype=float) - self.shift) / self.radius

    def from_centered(self, centered: np.ndarray) -> np.ndarray:
        return np.asarray(centered, dtype=float) * self.radius + self.shift

    def contains(self, action: np.ndarray, tol: float = 1e-12) -> bool:
        action = np.asarray(action)
        return bool(np.all(action >= self.low - tol) and np.all(action <= self.high + tol))


def orthonormal_complement(centered: np.ndarray) -> np.ndarray:
    """Unit vectors orthogonal to each row of ``centered`` and to each other.

    Input (N, n) -> output (N, n-1, n). In 2-D the single vector is the +90
    degree rotation of the normalised input. For n > 2 the Householder
    reflection taking e1 onto the input direction supplies the remaining
    columns. A zero row (action at the box centre) gets e2..en.
    """
    x = np.atleast_2d(np.asarray(centered, dtype=float))
    n_rows, n = x.shape
    if n < 2:
        raise ValueError("orthonormal actions need action_dim >= 2")
    norms = np.linalg.norm(x, axis=1)
    degenerate = norms < 1e-12
    u = np.zeros_like(x)
    u[~degenerate] = x[~degenerate] / norms[~degenerate, None]
    if n == 2:
        out = np.stack([-u[:, 1], u[:, 0]], axis=1)[:, None, :]
    else:
        sign = np.where(u[:, 0] >= 0, 1.0, -1.0)
        w = u.copy()
        w[:, 0] += sign
        ww = np.einsum("ij,ij->i", w, w)
        ww[degenerate] = 1.0
        eye = np.eye(n)[1:]  # e2..en
        out = eye[None, :, :] - 2.0 * (w[:, 1:] / ww[:, None])[:, :, None] * w[:, None, :]
    out[degenerate] = np.eye(n)[1:]
    return out


def orthonormal_actions(action, frame: ActionBoxFrame, count: int | None = None) -> np.ndarray:
    """Heterogeneous actions for one action (n,) or a batch (N, n).

    Returns (count, n) or (N, count, n) in environment coordinates; ``count``
    defaults to the full n-1 completion.
    """
    action = np.asarray(action, dtype=float)
    single = action.ndim == 1
    if action.shape[-1] < 2:
        raise ValueError("orthonormal actions need action_dim >= 2")
    vhat = orthonormal_complement(frame.to_centered(np.atleast_2d(action)))
    if count is not None:
        if not 1 <= count <= vhat.shape[1]:
            raise ValueError(f"count must lie in [1, {vhat.shape[1]}]")
        vhat = vhat[:, :count]
    v = frame.from_centered(vhat)
    return v[0] if single else v


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, state_dim: int, action_dim: int, action_low, action_high, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.state_dim, self.action_dim, self.capacity = state_dim, action_dim, capacity
        self.frame = ActionBoxFrame(action_low, action_high)
        if self.frame.dim != action_dim:
            raise ValueError("action bounds do not match action_dim")
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, state, action, reward, next_state, done) -> None:
        state, action, next_state = (np.asarray(x, dtype=float) for x in (state, action, next_state))
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise ValueError(f"state must have shape ({self.state_dim},)")
        if action.shape != (self.action_dim,):
            raise ValueError(f"action must have shape ({self.action_dim},)")
        i = self.cursor
        self.states[i], self.actions[i], self.rewards[i] = state, action, reward
        self.next_states[i], self.dones[i] = next_state, done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_transition(self, t: Transition) -> None:
        self.push(t.state, t.action, t.reward, t.next_state, t.done)

    def _physical(self, i: int) -> int:
        if not -self.size <= i < self.size:
            raise IndexError(i)
        i %= self.size
        start = self.cursor - self.size if self.size == self.capacity else 0
        return (start + i) % self.capacity

    def __getitem__(self, i: int) -> Transition:
        """Logical indexing: 0 is the oldest stored transition."""
        j = self._physical(i)
        return Transition(self.states[j].copy(), self.actions[j].copy(), float(self.rewards[j]),
                          self.next_states[j].copy(), bool(self.dones[j]))

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """``n`` uniform draws with replacement from the filled region."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return self.gather(idx)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx])

    def filled_actions(self) -> np.ndarray:
        return self.actions[: self.size] if self.size < self.capacity else self.actions

    # -- snapshot export ----------------------------------------------------
    def header(self) -> list[str]:
        sd, ad = self.state_dim, self.action_dim
        cols = [f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)] + ["r"]
        cols += [f"ns{i}" for i in range(sd)] + ["done"]
        cols += [f"v{j}_{i}" for j in range(ad - 1) for i in range(ad)]
        return cols

    def to_csv(self, path: str | Path) -> None:
        """One row per transition, oldest first, plus the derived orthonormal actions."""
        order = [self._physical(i) for i in range(self.size)]
        v = orthonormal_actions(self.actions[order], self.frame) if order else np.zeros((0, self.action_dim - 1, self.action_dim))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for row, j in enumerate(order):
                values = [*self.states[j], *self.actions[j], self.rewards[j], *self.next_states[j]]
                writer.writerow([repr(float(x)) for x in values] + [int(self.dones[j])]
                                + [repr(float(x)) for x in v[row].ravel()])

    @classmethod
    def from_csv(cls, path: str | Path, action_low, action_high, capacity: int | None = None) -> "ReplayBuffer":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        sd = sum(1 for h in header if h.startswith("s") and h[1:].isdigit())
        ad = sum(1 for h in header if h.startswith("a") and h[1:].isdigit())
        buf = cls(sd, ad, action_low, action_high, capacity or max(len(rows), 1))
        for row in rows:
            vals = [float(x) for x in row[: 2 * sd + ad + 1]]
            buf.push(vals[:sd], vals[sd : sd + ad], vals[sd + ad], vals[sd + ad + 1 : 2 * sd + ad + 1],
                     bool(int(row[2 * sd + ad + 1])))
        return buf


@dataclass
class DensityHistogram:
    edges: np.ndarray  # (n, bins + 1)
    action: np.ndarray  # (n, bins), each row sums to 1
    orthonormal: np.ndarray  # (n, bins)

    def overlap(self) -> np.ndarray:
        """Per-dimension overlap coefficient sum_b min(p_b, q_b)."""
        return np.minimum(self.action, self.orthonormal).sum(axis=1)


def histogram_pair(actions: np.ndarray, others: np.ndarray, frame: ActionBoxFrame, bins: int) -> DensityHistogram:
    """Normalised per-dimension histograms of two action populations over the box."""
    if len(actions) == 0 or len(others) == 0:
        raise ValueError("histograms need nonempty populations")
    n = frame.dim
    edges = np.stack([np.linspace(frame.low[i], frame.high[i], bins + 1) for i in range(n)])
    h_a = np.stack([np.histogram(actions[:, i], bins=edges[i])[0] for i in range(n)]).astype(float)
    h_v = np.stack([np.histogram(others[:, i], bins=edges[i])[0] for i in range(n)]).astype(float)
    return DensityHistogram(edges, h_a / h_a.sum(axis=1, keepdims=True), h_v / h_v.sum(axis=1, keepdims=True))


def density_histogram(buffer: ReplayBuffer, bins: int = 50) -> DensityHistogram:
    """Histograms of stored actions and of all their orthonormal counterparts."""
    if len(buffer) == 0:
        raise ValueError("cannot histogram an empty buffer")
    actions = buffer.filled_actions()
    v = orthonormal_actions(actions, buffer.frame).reshape(-1, buffer.action_dim)
    return histogram_pair(actions, v, buffer.frame, bins)
