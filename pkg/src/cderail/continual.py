"""Elastic weight consolidation and the Continual DQN Expansion subspace set."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from cderail.dqn import Batch, DqnConfig, ReplayBuffer, select_actions, td_errors, td_update
from cderail.errors import BadConfigError, EmptyBufferError, NoDataError, ShapeMismatchError
from cderail.neuralnet import (
    PAU,
    OptState,
    QNetwork,
    average_weights,
    backward,
    forward,
    mlp_init,
    network_arrays,
    network_from_arrays,
)

SUBSPACE_FORMAT = "cderail.subspace"
SUBSPACE_VERSION = 1


@dataclass
class Consolidation:
    theta_star: list[np.ndarray]
    fisher: list[np.ndarray]
    task_id: int = 0


def estimate_fisher_diagonal(
    net: QNetwork,
    buffer: ReplayBuffer,
    samples: int = 1000,
    rng: np.random.Generator | None = None,
    gamma: float = 0.99,
    target_net: QNetwork | None = None,
    chunk: int = 256,
) -> list[np.ndarray]:
    """Mean squared per-transition gradient of the squared TD error.

    Draws ``samples`` transitions without replacement (the whole buffer if it
    holds fewer).
    """
    if len(buffer) == 0:
        raise EmptyBufferError("cannot estimate Fisher information from an empty buffer")
    rng = rng if rng is not None else np.random.default_rng(0)
    m = min(samples, len(buffer))
    idx = np.sort(rng.choice(len(buffer), size=m, replace=False))
    fisher = [np.zeros(p.shape, dtype=np.float64) for p in net.params()]
    for start in range(0, m, chunk):
        batch = buffer.take(idx[start : start + chunk])
        fisher_accumulate(net, target_net, batch, gamma, fisher)
    return [f / m for f in fisher]


def fisher_accumulate(net, target_net, batch: Batch, gamma: float, fisher: list[np.ndarray]) -> None:
    delta, cache, q_shape = td_errors(net, target_net, batch, gamma)
    dq = np.zeros(q_shape, dtype=net.dtype)
    dq[np.arange(len(batch)), batch.a] = 2.0 * delta
    for f, g in zip(fisher, backward(net, cache, dq, per_sample_squares=True)):
        f += g


def consolidate(net: QNetwork, fisher, task_id: int = 0) -> Consolidation:
    return Consolidation([p.astype(np.float64) for p in net.params()], [np.asarray(f, np.float64) for f in fisher], task_id)


def ewc_penalty(net: QNetwork, consolidations, lam: float) -> tuple[float, list[np.ndarray]]:
    """Sum of ``lam/2 * F * (theta - theta*)^2`` over every consolidation."""
    params = net.params()
    penalty = 0.0
    grads = [np.zeros(p.shape, dtype=np.float64) for p in params]
    for c in consolidations:
        if len(c.theta_star) != len(params):
            raise ShapeMismatchError("consolidation does not match the network")
        for g, p, star, f in zip(grads, params, c.theta_star, c.fisher):
            if p.shape != star.shape or f.shape != p.shape:
                raise ShapeMismatchError(f"consolidation shape {star.shape} != parameter shape {p.shape}")
            diff = p.astype(np.float64) - star
            penalty += 0.5 * lam * float(np.sum(f * diff * diff))
            g += lam * f * diff
    return penalty, grads


def ewc_hook(consolidations, lam: float):
    return lambda net: ewc_penalty(net, consolidations, lam)


class Mode(str, enum.Enum):
    EWC_STABLE = "ewc_stable"
    PAU_PLASTIC = "pau_plastic"


@dataclass
class Anchor:
    net: QNetwork
    target: QNetwork
    opt: OptState
    mode: Mode = Mode.PAU_PLASTIC
    consolidations: list[Consolidation] = field(default_factory=list)
    episode_scores: list[float] = field(default_factory=list)
    episode_completions: list[float] = field(default_factory=list)
    uid: int = 0


@dataclass(frozen=True)
class CdeConfig:
    n_anchors: int = 2
    epsilon_threshold: float = 1.0
    lam: float = 0.5
    window: int = 10
    act_mode: str = "rotation"
    fisher_samples: int = 1000
    hidden: tuple[int, ...] = (1024, 1024)
    lr: float = 5e-5
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_anchors < 1:
            raise BadConfigError(f"need at least one anchor, got N={self.n_anchors}")
        if self.act_mode not in ("rotation", "random"):
            raise BadConfigError(f"unknown act mode {self.act_mode!r}")
        if self.window < 1:
            raise BadConfigError("performance window must be positive")


@dataclass
class SubspaceSet:
    anchors: list[Anchor]
    config: CdeConfig
    act_rotation: int = 0
    has_trial: bool = False
    task_id: int = 0
    next_uid: int = 1
    history: list[dict] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def n_max(self) -> int:
        return self.config.n_anchors

    @property
    def trial(self) -> Anchor | None:
        return self.anchors[-1] if self.has_trial else None

    @property
    def incumbents(self) -> list[Anchor]:
        return self.anchors[:-1] if self.has_trial else list(self.anchors)


def _new_anchor(net: QNetwork, lr: float, uid: int, mode=Mode.PAU_PLASTIC) -> Anchor:
    return Anchor(net=net, target=net.copy(), opt=OptState.for_network(net, lr=lr), mode=mode, uid=uid)


def cde_init(d_in: int, d_out: int = 5, config: CdeConfig | None = None) -> SubspaceSet:
    config = config or CdeConfig()
    net = mlp_init(d_in, config.hidden, d_out, activation=PAU, seed=config.seed, dtype=np.dtype(config.dtype))
    return SubspaceSet(
        anchors=[_new_anchor(net, config.lr, 0)],
        config=config,
        rng=np.random.default_rng([config.seed, 0xCDE]),
    )


def begin_task(s: SubspaceSet, buffer: ReplayBuffer | None, gamma: float = 0.99) -> SubspaceSet:
    """Consolidate and freeze every anchor, then add a plastic trial anchor.

    The caller empties the replay buffer afterwards.
    """
    s.task_id += 1
    for anchor in s.anchors:
        if buffer is not None and len(buffer) > 0:
            fisher = estimate_fisher_diagonal(
                anchor.net, buffer, s.config.fisher_samples, s.rng, gamma, anchor.target
            )
            anchor.consolidations.append(consolidate(anchor.net, fisher, s.task_id - 1))
        anchor.net.set_pau_trainable(False)
        anchor.target.set_pau_trainable(False)
        anchor.mode = Mode.EWC_STABLE
        anchor.episode_scores.clear()
        anchor.episode_completions.clear()
    trial_net = average_weights([a.net for a in s.anchors], [1.0] * len(s.anchors))
    s.anchors.append(_new_anchor(trial_net, s.config.lr, s.next_uid))
    s.next_uid += 1
    s.has_trial = True
    s.act_rotation = 0
    return s


def best_anchor_index(s: SubspaceSet) -> int:
    """Anchor with the highest mean completion (lower mean score breaks ties)."""
    best, best_key = 0, None
    for i, a in enumerate(s.anchors):
        comps = a.episode_completions[-s.config.window :]
        if not comps:
            continue
        scores = a.episode_scores[-s.config.window :]
        key = (float(np.mean(comps)), -float(np.mean(scores)))
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


def cde_act(s: SubspaceSet, obs, eps: float, eval: bool, rng: np.random.Generator):
    """Actions for a batch of observations (or one observation)."""
    single = np.ndim(obs) == 1
    if eval:
        net, eps = s.anchors[best_anchor_index(s)].net, 0.0
    else:
        net = s.anchors[s.act_rotation].net
    actions = select_actions(net, obs, eps, rng)
    return int(actions[0]) if single else actions


def record_episode(s: SubspaceSet, score: float, completion: float) -> SubspaceSet:
    anchor = s.anchors[s.act_rotation]
    anchor.episode_scores.append(float(score))
    anchor.episode_completions.append(float(completion))
    if s.config.act_mode == "random":
        s.act_rotation = int(s.rng.integers(len(s.anchors)))
    else:
        s.act_rotation = (s.act_rotation + 1) % len(s.anchors)
    return s


def cde_learn(s: SubspaceSet, batch: Batch, cfg: DqnConfig) -> list[float]:
    """One TD step for every anchor on the shared batch; stable anchors add EWC."""
    losses = []
    for anchor in s.anchors:
        hook = None
        if anchor.mode is Mode.EWC_STABLE and anchor.consolidations:
            hook = ewc_hook(anchor.consolidations, s.config.lam)
        losses.append(td_update(anchor.net, anchor.target, anchor.opt, batch, cfg, hook))
    return losses


def performance_W(anchor: Anchor, window: int = 10, use_score: bool = False) -> float:
    """Mean completion over the last ``window`` episodes, or ``1 - mean score``."""
    if not anchor.episode_completions:
        raise NoDataError("anchor has no recorded episodes this task")
    if use_score:
        return 1.0 - float(np.mean(anchor.episode_scores[-window:]))
    return float(np.mean(anchor.episode_completions[-window:]))


def performance_values(anchors, window: int = 10) -> list[float]:
    """W for each anchor, switching all to the score fallback when completions
    cannot separate them (all zero or all equal). Anchors without data get 0."""
    have = [a for a in anchors if a.episode_completions]
    comps = [performance_W(a, window) for a in have]
    use_score = bool(comps) and (all(c == 0 for c in comps) or len(set(comps)) == 1)
    return [performance_W(a, window, use_score) if a.episode_completions else 0.0 for a in anchors]


def accepts_trial(w_trial: float, w_incumbents, threshold: float) -> bool:
    return all(w_trial > threshold * w for w in w_incumbents)


def expansion_and_pruning(s: SubspaceSet) -> SubspaceSet:
    """Keep the trial anchor only if it beats every incumbent by the threshold,
    dropping the weakest incumbent if the set would exceed its capacity."""
    if not s.has_trial:
        return s
    trial = s.anchors[-1]
    if not trial.episode_completions:
        raise NoDataError("trial anchor never acted this task")
    values = performance_values(s.anchors, s.config.window)
    w_trial, w_old = values[-1], values[:-1]
    accepted = accepts_trial(w_trial, w_old, s.config.epsilon_threshold)
    removed = None
    if accepted:
        if len(s.anchors) > s.n_max:
            removed = int(np.argmin(w_old))
            del s.anchors[removed]
    else:
        s.anchors.pop()
    s.history.append(
        {
            "task": s.task_id,
            "w_trial": w_trial,
            "w_incumbents": w_old,
            "threshold": s.config.epsilon_threshold,
            "accepted": accepted,
            "removed": removed,
            "n_anchors": len(s.anchors),
        }
    )
    s.has_trial = False
    s.act_rotation = 0
    return s


def save_subspace(s: SubspaceSet, path) -> None:
    arrays = {}
    meta = {
        "format": SUBSPACE_FORMAT,
        "version": SUBSPACE_VERSION,
        "config": {**s.config.__dict__, "hidden": list(s.config.hidden)},
        "act_rotation": s.act_rotation,
        "has_trial": s.has_trial,
        "task_id": s.task_id,
        "next_uid": s.next_uid,
        "history": s.history,
        "anchors": [],
    }
    for i, a in enumerate(s.anchors):
        arrays.update(network_arrays(a.net, f"a{i}/net/"))
        arrays.update(network_arrays(a.target, f"a{i}/target/"))
        for k, c in enumerate(a.consolidations):
            for j, (star, f) in enumerate(zip(c.theta_star, c.fisher)):
                arrays[f"a{i}/c{k}/star{j}"] = star
                arrays[f"a{i}/c{k}/fisher{j}"] = f
        meta["anchors"].append(
            {
                "mode": a.mode.value,
                "uid": a.uid,
                "scores": a.episode_scores,
                "completions": a.episode_completions,
                "consolidations": [{"task_id": c.task_id, "n": len(c.theta_star)} for c in a.consolidations],
            }
        )
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_subspace(path) -> SubspaceSet:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != SUBSPACE_FORMAT or meta.get("version") != SUBSPACE_VERSION:
            raise ValueError(f"{path} is not a version {SUBSPACE_VERSION} subspace checkpoint")
        cfg = dict(meta["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        config = CdeConfig(**cfg)
        anchors = []
        for i, am in enumerate(meta["anchors"]):
            net = network_from_arrays(data, f"a{i}/net/")
            cons = [
                Consolidation(
                    [np.array(data[f"a{i}/c{k}/star{j}"]) for j in range(cm["n"])],
                    [np.array(data[f"a{i}/c{k}/fisher{j}"]) for j in range(cm["n"])],
                    cm["task_id"],
                )
                for k, cm in enumerate(am["consolidations"])
            ]
            anchors.append(
                Anchor(
                    net=net,
                    target=network_from_arrays(data, f"a{i}/target/"),
                    opt=OptState.for_network(net, lr=config.lr),
                    mode=Mode(am["mode"]),
                    consolidations=cons,
                    episode_scores=list(am["scores"]),
                    episode_completions=list(am["completions"]),
                    uid=am["uid"],
                )
            )
    return SubspaceSet(
        anchors=anchors,
        config=config,
        act_rotation=meta["act_rotation"],
        has_trial=meta["has_trial"],
        task_id=meta["task_id"],
        next_uid=meta["next_uid"],
        history=meta["history"],
        rng=np.random.default_rng([config.seed, 0xCDE]),
    )
