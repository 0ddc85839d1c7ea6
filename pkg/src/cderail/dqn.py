"""Replay buffer, exploration schedule and the temporal-difference update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from cderail.errors import ShapeMismatchError, UnderfullError
from cderail.neuralnet import QNetwork, OptState, adam_step, backward, forward, soft_update

EPSILON_BASE = 1.000005


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.99
    batch_size: int = 128
    update_every: int = 8
    lr: float = 5e-5
    target_tau: float = 1e-3
    use_target: bool = True
    buffer_capacity: int = 1_000_000
    epsilon_base: float = EPSILON_BASE

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch_size < 1 or self.update_every < 1:
            raise ValueError("batch_size and update_every must be positive")


def epsilon(step: int, base: float = EPSILON_BASE) -> float:
    """Exploration rate after ``step`` environment steps: ``base ** -step``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return 1.0 / base**step


def select_actions(net: QNetwork, obs, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Epsilon-greedy actions for a batch; greedy ties go to the lowest index."""
    obs = np.atleast_2d(obs)
    n_actions = net.sizes[-1]
    explore = rng.random(len(obs)) < eps
    randoms = rng.integers(0, n_actions, size=len(obs))
    if explore.all():
        return randoms
    q, _ = forward(net, obs)
    return np.where(explore, randoms, np.argmax(q, axis=1))


def select_action(net: QNetwork, obs, eps: float, rng: np.random.Generator) -> int:
    return int(select_actions(net, np.asarray(obs)[None, :], eps, rng)[0])


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Ring buffer of transitions. Storage grows on demand up to ``capacity``."""

    def __init__(self, capacity: int = 1_000_000, obs_dim: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.size = 0
        self.cursor = 0
        self._alloc = 0
        self._s = self._s2 = self._a = self._r = self._d = None

    def __len__(self):
        return self.size

    def _grow(self, needed: int):
        new = min(self.capacity, max(needed, 2 * self._alloc, 1024))
        def grow(arr, shape, dtype):
            out = np.zeros((new, *shape), dtype=dtype)
            if arr is not None:
                out[: self._alloc] = arr[: self._alloc]
            return out
        self._s = grow(self._s, (self.obs_dim,), np.float32)
        self._s2 = grow(self._s2, (self.obs_dim,), np.float32)
        self._a = grow(self._a, (), np.int64)
        self._r = grow(self._r, (), np.float64)
        self._d = grow(self._d, (), np.bool_)
        self._alloc = new

    def push(self, t: Transition) -> None:
        self.push_many([t.s], [t.a], [t.r], [t.s_next], [t.done])

    def push_many(self, s, a, r, s_next, done) -> None:
        s = np.asarray(s, dtype=np.float32)
        if self.obs_dim is None:
            self.obs_dim = s.shape[1]
        for i in range(len(s)):
            if self.cursor >= self._alloc:
                self._grow(self.cursor + 1)
            j = self.cursor
            self._s[j] = s[i]
            self._s2[j] = s_next[i]
            self._a[j] = a[i]
            self._r[j] = r[i]
            self._d[j] = done[i]
            self.cursor = (j + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size:
            raise UnderfullError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.take(idx)

    def take(self, idx) -> Batch:
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])

    def reset(self) -> None:
        self.size = 0
        self.cursor = 0


def buffer_push(buf: ReplayBuffer, t: Transition) -> None:
    buf.push(t)


def buffer_sample(buf: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    return buf.sample(batch_size, rng)


def reset_buffer(buf: ReplayBuffer) -> ReplayBuffer:
    buf.reset()
    return buf


def td_targets(net: QNetwork, target_net: QNetwork | None, batch: Batch, gamma: float) -> np.ndarray:
    bootstrap_net = target_net if target_net is not None else net
    q_next, _ = forward(bootstrap_net, batch.s_next)
    return batch.r + gamma * (1.0 - batch.done.astype(np.float64)) * q_next.max(axis=1)


def td_errors(net: QNetwork, target_net: QNetwork | None, batch: Batch, gamma: float):
    """``(q(s)[a] - y, cache)`` for every row of ``batch``."""
    y = td_targets(net, target_net, batch, gamma)
    q, cache = forward(net, batch.s)
    rows = np.arange(len(batch))
    return q[rows, batch.a] - y, cache, q.shape


EwcHook = Callable[[QNetwork], tuple[float, list]]


def td_update(
    net: QNetwork,
    target_net: QNetwork | None,
    opt: OptState,
    batch: Batch,
    cfg: DqnConfig,
    ewc_hook: EwcHook | None = None,
) -> float:
    """One Adam step on the mean squared TD error (plus an optional penalty).

    Returns the loss before the step. The target network, if given and
    enabled, is then soft-updated towards ``net``.
    """
    if len(batch) != cfg.batch_size:
        raise ShapeMismatchError(f"batch of {len(batch)} rows, config expects {cfg.batch_size}")
    if batch.s.shape[1] != net.sizes[0] or batch.s_next.shape != batch.s.shape:
        raise ShapeMismatchError(f"observation width {batch.s.shape[1]} != network input {net.sizes[0]}")
    bootstrap = target_net if cfg.use_target else None
    delta, cache, q_shape = td_errors(net, bootstrap, batch, cfg.gamma)
    n = len(batch)
    loss = float(np.mean(delta.astype(np.float64) ** 2))
    dq = np.zeros(q_shape, dtype=net.dtype)
    dq[np.arange(n), batch.a] = 2.0 * delta / n
    grads = backward(net, cache, dq)
    if ewc_hook is not None:
        penalty, pen_grads = ewc_hook(net)
        loss += penalty
        grads = [g + pg.astype(g.dtype) for g, pg in zip(grads, pen_grads)]
    adam_step(net, grads, opt)
    if target_net is not None and cfg.use_target:
        soft_update(target_net, net, cfg.target_tau)
    return loss
