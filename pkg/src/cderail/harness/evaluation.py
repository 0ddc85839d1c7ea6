"""Episode rollouts and greedy evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cderail.observation import ObsConfig, observe_all, observe_many
from cderail.railsim import StageSpec, Status, episode_log, episode_score, reset, step


@dataclass
class EvalResult:
    score_mean: float
    score_std: float
    completion_mean: float
    completion_std: float
    episodes: int
    scores: list[float]
    completions: list[float]

    def as_dict(self) -> dict:
        return {
            "score_mean": self.score_mean,
            "score_std": self.score_std,
            "completion_mean": self.completion_mean,
            "completion_std": self.completion_std,
            "episodes": self.episodes,
        }


def _choose(policy, state, ids, obs):
    if hasattr(policy, "act_state"):
        return policy.act_state(state, ids)
    return policy(obs)


def run_episode(policy, spec: StageSpec, seed: int, obs_config: ObsConfig | None = None, train: bool = False):
    """Play one episode; returns ``(ticks, score, completion)``.

    With ``train=True`` the policy is an agent: it acts epsilon-greedily and
    receives every tick's transitions through ``observe_tick``.
    """
    obs_config = obs_config or ObsConfig()
    state = reset(spec, seed)
    ids, obs = observe_all(state, obs_config)
    done = False
    while not done:
        actions = policy.act(obs) if train else _choose(policy, state, ids, obs)
        state, rewards, done = step(state, dict(zip(ids, (int(a) for a in actions))), inplace=True)
        nxt = observe_many(state, ids, obs_config)
        finished = np.array([done or state.train(i).status is Status.DONE for i in ids], dtype=bool)
        if train:
            r = np.array([rewards[i] for i in ids])
            policy.observe_tick(obs, np.asarray(actions), r, nxt, finished)
        keep = ~finished
        ids = [i for i, k in zip(ids, keep) if k]
        obs = nxt[keep]
    score, completion = episode_score(episode_log(state))
    return state.tick, score, completion


def evaluate(policy, spec: StageSpec, episodes: int, seed: int, obs_config: ObsConfig | None = None) -> EvalResult:
    """Greedy rollouts on environments seeded ``seed .. seed + episodes - 1``.

    ``policy`` maps an observation matrix to actions, or exposes
    ``act_state(state, ids)`` when it needs the full simulator state.
    Standard deviations are sample deviations (0 for a single episode).
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    scores, comps = [], []
    for k in range(episodes):
        _, score, completion = run_episode(policy, spec, seed + k, obs_config)
        scores.append(score)
        comps.append(completion)
    ddof = 1 if episodes > 1 else 0
    return EvalResult(
        float(np.mean(scores)),
        float(np.std(scores, ddof=ddof)),
        float(np.mean(comps)),
        float(np.std(comps, ddof=ddof)),
        episodes,
        scores,
        comps,
    )
