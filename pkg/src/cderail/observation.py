"""Fixed-width local view of one train, used as the Q-network input.

Per relative branch (left, forward, right) the encoder emits:

0. distance to target through the branch, normalised (1 if illegal/unreachable)
1. branch legal flag
2. distance to the nearest other train along the branch, normalised by the
   lookahead (1 if none within it)
3. nearest train is heading towards us
4. nearest train travels our way and is slower
5. nearest train is deadlocked

followed by six train-level features: own distance to target, speed,
malfunction ticks left over the maximum halt, progress through the current
cell, fraction of the episode elapsed, and an on-map flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cderail.errors import BadConfigError, UnknownTrainError
from cderail.railsim.env import EnvState, detect_deadlocks, resolve_exit
from cderail.railsim.grid import neighbour, opposite
from cderail.railsim.train import Action, Status

BRANCH_ACTIONS = (Action.TURN_LEFT, Action.FORWARD, Action.TURN_RIGHT)
N_BRANCH_FEATURES = 6
N_GLOBAL_FEATURES = 6

# route lengths are divided by this multiple of (width + height)
DISTANCE_SCALE = 2


@dataclass(frozen=True)
class ObsConfig:
    branch_features: int = N_BRANCH_FEATURES
    global_features: int = N_GLOBAL_FEATURES
    lookahead: int | None = None


def obs_dim(config: ObsConfig | None = None) -> int:
    config = config or ObsConfig()
    if config.branch_features <= 0 or config.global_features < 0:
        raise BadConfigError(f"feature counts must be positive, got {config}")
    return 3 * config.branch_features + config.global_features


def _fit(values, n):
    values = values[:n]
    return values + [0.0] * (n - len(values))


def _branch(t, out, table, hops, occupied, deadlocked, lookahead, scale):
    nb = neighbour(t.location, out)
    d = 1.0 + table[nb[0], nb[1], out]
    dist = min(1.0, d / scale) if np.isfinite(d) else 1.0
    agent_dist, opposing, slower, stuck = 1.0, 0.0, 0.0, 0.0
    node = (nb[0], nb[1], out)
    for k in range(1, lookahead + 1):
        cur = node[:2]
        other = occupied.get(cur)
        if other is not None and other.id != t.id:
            agent_dist = k / lookahead
            opposing = float(other.heading == opposite(node[2]))
            slower = float(other.heading == node[2] and other.speed < t.speed)
            stuck = float(other.id in deadlocked)
            break
        if cur == t.target:
            break
        node = hops.get(node)
        if node is None:
            break
    return [dist, 1.0, agent_dist, opposing, slower, stuck]


def _encode(state: EnvState, t, config, occupied, deadlocked) -> np.ndarray:
    grid = state.grid
    span = grid.width + grid.height
    scale = DISTANCE_SCALE * span
    lookahead = config.lookahead or span
    feats: list[float] = []
    if t.status is Status.DONE:
        branches = [[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]] * 3
        own = 0.0
    else:
        table = grid.distance_table(t.target)
        hops = grid.next_hops(t.target)
        cell = t.location
        branches = []
        for action in BRANCH_ACTIONS:
            out = resolve_exit(grid, cell, t.heading, action)
            if out is None:
                branches.append([1.0, 0.0, 1.0, 0.0, 0.0, 0.0])
            else:
                branches.append(_branch(t, out, table, hops, occupied, deadlocked, lookahead, scale))
        d = table[cell[0], cell[1], t.heading]
        own = min(1.0, d / scale) if np.isfinite(d) else 1.0
    for b in branches:
        feats += _fit(b, config.branch_features)
    h_max = state.halt_range[1]
    glob = [
        own,
        float(t.speed),
        min(1.0, t.malfunction_remaining / h_max),
        t.progress_ticks / t.ticks_per_cell,
        min(1.0, state.tick / state.max_ticks),
        float(t.status is Status.ACTIVE),
    ]
    feats += _fit(glob, config.global_features)
    return np.asarray(feats, dtype=np.float64)


def observe(state: EnvState, train_id: int, config: ObsConfig | None = None, deadlocked=None) -> np.ndarray:
    config = config or ObsConfig()
    try:
        t = state.train(train_id)
    except KeyError:
        raise UnknownTrainError(f"no train {train_id}") from None
    occupied = {o.position: o for o in state.trains if o.status is Status.ACTIVE}
    if deadlocked is None:
        deadlocked = detect_deadlocks(state)
    return _encode(state, t, config, occupied, deadlocked)


def observe_many(state: EnvState, ids, config: ObsConfig | None = None) -> np.ndarray:
    """Observations for the given trains (DONE ones included), one row each."""
    config = config or ObsConfig()
    occupied = {o.position: o for o in state.trains if o.status is Status.ACTIVE}
    deadlocked = detect_deadlocks(state)
    rows = [_encode(state, state.train(i), config, occupied, deadlocked) for i in ids]
    return np.vstack(rows) if rows else np.zeros((0, obs_dim(config)))


def observe_all(state: EnvState, config: ObsConfig | None = None) -> tuple[list[int], np.ndarray]:
    """Observations for every train not yet DONE, stacked in id order."""
    config = config or ObsConfig()
    occupied = {o.position: o for o in state.trains if o.status is Status.ACTIVE}
    deadlocked = detect_deadlocks(state)
    ids, rows = [], []
    for t in sorted(state.trains, key=lambda t: t.id):
        if t.status is Status.DONE:
            continue
        ids.append(t.id)
        rows.append(_encode(state, t, config, occupied, deadlocked))
    if not rows:
        return ids, np.zeros((0, obs_dim(config)))
    return ids, np.vstack(rows)
