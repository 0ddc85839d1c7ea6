"""Learners driven by the curriculum runner: plain/EWC/PAU DQN variants and CDE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cderail.continual import (
    CdeConfig,
    Consolidation,
    begin_task,
    best_anchor_index,
    cde_init,
    cde_learn,
    consolidate,
    estimate_fisher_diagonal,
    ewc_hook,
    expansion_and_pruning,
    load_subspace,
    record_episode,
    save_subspace,
)
from cderail.dqn import DqnConfig, ReplayBuffer, epsilon, select_actions, td_update
from cderail.neuralnet import PAU, RELU, OptState, QNetwork, load_network, mlp_init, save_network

ALGOS = ("dqn", "dqn_ewc", "dqn_pau", "dqn_pau_ewc", "cde")


@dataclass(frozen=True)
class AgentConfig:
    algo: str = "dqn"
    hidden: tuple[int, ...] = (1024, 1024)
    dtype: str = "float32"
    lam: float = 0.5
    fisher_samples: int = 1000
    n_anchors: int = 2
    epsilon_threshold: float = 1.0
    cde_act: str = "rotation"
    window: int = 10
    # environment steps are multiplied by this before entering the epsilon schedule
    epsilon_time_scale: float = 1.0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}; expected one of {ALGOS}")


class Agent:
    """Shared replay/exploration bookkeeping. Subclasses supply the networks."""

    def __init__(self, d_in: int, config: AgentConfig, dqn: DqnConfig, seed: int):
        self.config = config
        self.dqn = dqn
        self.d_in = d_in
        self.rng = np.random.default_rng([seed, 0xA6E])
        self.buffer = ReplayBuffer(dqn.buffer_capacity, d_in)
        self.env_steps = 0
        self.updates = 0
        self.boundaries = 0
        self.last_loss = float("nan")

    @property
    def epsilon(self) -> float:
        return epsilon(int(self.env_steps * self.config.epsilon_time_scale), self.dqn.epsilon_base)

    def behaviour_net(self) -> QNetwork:
        raise NotImplementedError

    def eval_net(self) -> QNetwork:
        raise NotImplementedError

    def act(self, obs: np.ndarray) -> np.ndarray:
        if len(obs) == 0:
            return np.zeros(0, dtype=np.int64)
        return select_actions(self.behaviour_net(), obs.astype(self.dtype), self.epsilon, self.rng)

    def greedy(self, obs: np.ndarray) -> np.ndarray:
        if len(obs) == 0:
            return np.zeros(0, dtype=np.int64)
        return select_actions(self.eval_net(), obs.astype(self.dtype), 0.0, self.rng)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def observe_tick(self, s, a, r, s_next, done) -> None:
        """Store this tick's transitions and learn on the fixed cadence."""
        if len(s):
            self.buffer.push_many(s, a, r, s_next, done)
        self.env_steps += 1
        if self.env_steps % self.dqn.update_every == 0 and len(self.buffer) >= self.dqn.batch_size:
            self.learn(self.buffer.sample(self.dqn.batch_size, self.rng))
            self.updates += 1

    def learn(self, batch) -> None:
        raise NotImplementedError

    def end_episode(self, score: float, completion: float) -> None:
        pass

    def task_boundary(self) -> None:
        """Called between tasks; the replay buffer is emptied afterwards."""
        self.boundaries += 1
        self.buffer.reset()

    def finish(self) -> None:
        pass

    def summary(self) -> dict:
        return {"anchors": 1}

    def save(self, path) -> None:
        raise NotImplementedError


class DqnAgent(Agent):
    """DQN with optional learnable activations and optional EWC at task boundaries."""

    def __init__(self, d_in: int, config: AgentConfig, dqn: DqnConfig, seed: int, d_out: int = 5):
        super().__init__(d_in, config, dqn, seed)
        activation = PAU if config.algo in ("dqn_pau", "dqn_pau_ewc") else RELU
        self.net = mlp_init(d_in, config.hidden, d_out, activation=activation, seed=seed, dtype=self.dtype)
        self.target = self.net.copy()
        self.opt = OptState.for_network(self.net, lr=dqn.lr)
        self.use_ewc = config.algo in ("dqn_ewc", "dqn_pau_ewc")
        self.consolidations: list[Consolidation] = []

    def behaviour_net(self):
        return self.net

    def eval_net(self):
        return self.net

    def learn(self, batch) -> None:
        hook = ewc_hook(self.consolidations, self.config.lam) if self.consolidations else None
        self.last_loss = td_update(self.net, self.target, self.opt, batch, self.dqn, hook)

    def task_boundary(self) -> None:
        if self.use_ewc and len(self.buffer):
            fisher = estimate_fisher_diagonal(
                self.net, self.buffer, self.config.fisher_samples, self.rng, self.dqn.gamma, self.target
            )
            self.consolidations.append(consolidate(self.net, fisher, self.boundaries))
        super().task_boundary()

    def summary(self) -> dict:
        return {"anchors": 1, "consolidations": len(self.consolidations)}

    def save(self, path) -> None:
        save_network(self.net, path)


class CdeAgent(Agent):
    """Continual DQN Expansion: a small set of anchor networks sharing one buffer."""

    def __init__(self, d_in: int, config: AgentConfig, dqn: DqnConfig, seed: int, d_out: int = 5):
        super().__init__(d_in, config, dqn, seed)
        self.cde = CdeConfig(
            n_anchors=config.n_anchors,
            epsilon_threshold=config.epsilon_threshold,
            lam=config.lam,
            window=config.window,
            act_mode=config.cde_act,
            fisher_samples=config.fisher_samples,
            hidden=tuple(config.hidden),
            lr=dqn.lr,
            seed=seed,
            dtype=config.dtype,
        )
        self.set = cde_init(d_in, d_out, self.cde)

    def behaviour_net(self):
        return self.set.anchors[self.set.act_rotation].net

    def eval_net(self):
        return self.set.anchors[best_anchor_index(self.set)].net

    def learn(self, batch) -> None:
        self.last_loss = float(np.mean(cde_learn(self.set, batch, self.dqn)))

    def end_episode(self, score: float, completion: float) -> None:
        record_episode(self.set, score, completion)

    def task_boundary(self) -> None:
        self.finish()
        begin_task(self.set, self.buffer, self.dqn.gamma)
        super().task_boundary()

    def finish(self) -> None:
        """Settle the trial anchor of the task that just ended."""
        if self.set.has_trial and self.set.trial.episode_completions:
            expansion_and_pruning(self.set)
        elif self.set.has_trial:
            # the trial never acted: keep the incumbents as they were
            self.set.anchors.pop()
            self.set.has_trial = False
            self.set.act_rotation = 0

    def summary(self) -> dict:
        return {"anchors": len(self.set.anchors), "has_trial": self.set.has_trial}

    def save(self, path) -> None:
        save_subspace(self.set, path)


def make_agent(d_in: int, config: AgentConfig, dqn: DqnConfig, seed: int) -> Agent:
    if config.algo == "cde":
        return CdeAgent(d_in, config, dqn, seed)
    return DqnAgent(d_in, config, dqn, seed)


def load_policy(path):
    """Greedy ``obs -> actions`` callable from a saved network or subspace checkpoint."""
    with np.load(path) as data:
        is_subspace = "meta" in data.files
    if is_subspace:
        s = load_subspace(path)
        net = s.anchors[best_anchor_index(s)].net
    else:
        net = load_network(path)
    rng = np.random.default_rng(0)
    return lambda obs: select_actions(net, np.asarray(obs, dtype=net.dtype), 0.0, rng)
