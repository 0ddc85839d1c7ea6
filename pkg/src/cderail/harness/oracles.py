"""Reference solvers used to check the learners and the simulator.

* a shortest-path policy that reads the simulator state directly;
* an exhaustive scheduler for tiny yard networks;
* tabular value iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cderail.errors import InfeasibleError, ParseError, ValidationError
from cderail.railsim import Action, EnvState, Status, resolve_exit
from cderail.railsim.grid import neighbour

MAX_YARDS = 6
MAX_TRAINS = 3


class ShortestPathPolicy:
    """Always takes the branch with the shortest remaining route."""

    def act_state(self, state: EnvState, ids) -> list[int]:
        return [self.action(state, i) for i in ids]

    @staticmethod
    def action(state: EnvState, train_id: int) -> int:
        t = state.train(train_id)
        if t.status is Status.DONE:
            return int(Action.DO_NOTHING)
        table = state.grid.distance_table(t.target)
        best, best_d = Action.STOP, math.inf
        for action in (Action.TURN_LEFT, Action.FORWARD, Action.TURN_RIGHT):
            out = resolve_exit(state.grid, t.location, t.heading, action)
            if out is None:
                continue
            r, c = neighbour(t.location, out)
            d = table[r, c, out]
            if d < best_d:
                best, best_d = action, d
        return int(best)


@dataclass
class TinyTrain:
    speed: float
    malfunction_rate: float
    halt: float
    origin: int
    dest: int


@dataclass
class TinyInstance:
    distances: np.ndarray  # inf where there is no edge
    trains: list[TinyTrain]

    @property
    def n(self) -> int:
        return len(self.distances)

    def validate(self) -> TinyInstance:
        d = self.distances
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValidationError("distance matrix must be square")
        if not 1 <= self.n <= MAX_YARDS:
            raise ValidationError(f"at most {MAX_YARDS} yards supported, got {self.n}")
        if not 1 <= len(self.trains) <= MAX_TRAINS:
            raise ValidationError(f"at most {MAX_TRAINS} trains supported, got {len(self.trains)}")
        if not np.array_equal(d, d.T):
            raise ValidationError("distance matrix must be symmetric")
        off = d[~np.eye(self.n, dtype=bool)]
        if np.any(off <= 0):
            raise ValidationError("off-diagonal distances must be positive (use inf for no edge)")
        for k, tr in enumerate(self.trains):
            if tr.speed <= 0:
                raise ValidationError(f"train {k}: speed must be positive")
            if not (0 <= tr.origin < self.n and 0 <= tr.dest < self.n):
                raise ValidationError(f"train {k}: yard index out of range")
        return self


def edge_cost(d: float, tr: TinyTrain) -> float:
    return d / tr.speed + tr.malfunction_rate * tr.halt


def simple_paths(distances: np.ndarray, origin: int, dest: int):
    """Every simple path from ``origin`` to ``dest`` as a list of yards."""
    n = len(distances)
    stack = [[origin]]
    while stack:
        path = stack.pop()
        u = path[-1]
        if u == dest:
            yield path
            continue
        for v in range(n):
            if v != u and v not in path and np.isfinite(distances[u, v]):
                stack.append(path + [v])


def route_cost(distances, path, tr: TinyTrain) -> float:
    return sum(edge_cost(distances[u, v], tr) for u, v in zip(path, path[1:]))


def tiny_exact_scheduler(inst: TinyInstance) -> tuple[float, list[list[int]]]:
    """Minimum total route cost with each train on its own simple path."""
    inst.validate()
    total, routes = 0.0, []
    for k, tr in enumerate(inst.trains):
        best, best_path = math.inf, None
        for path in simple_paths(inst.distances, tr.origin, tr.dest):
            cost = route_cost(inst.distances, path, tr)
            if cost < best:
                best, best_path = cost, path
        if best_path is None:
            raise InfeasibleError(f"train {k} has no route from {tr.origin} to {tr.dest}")
        total += best
        routes.append(best_path)
    return total, routes


def parse_tiny_instance(text: str) -> TinyInstance:
    """Yard count, then that many matrix rows (``inf`` for no edge), then one
    ``v m h origin dest`` row per train. ``#`` starts a comment."""
    lines = [(i, ln.split("#", 1)[0].split()) for i, ln in enumerate(text.splitlines(), start=1)]
    lines = [(i, toks) for i, toks in lines if toks]
    if not lines:
        raise ParseError("empty instance")
    lineno, toks = lines[0]
    try:
        n = int(toks[0])
    except ValueError:
        raise ParseError(f"yard count must be an integer, got {toks[0]!r}", line=lineno) from None
    if len(toks) != 1 or n < 1:
        raise ParseError("first line must hold the yard count", line=lineno)
    if len(lines) < 1 + n:
        raise ParseError(f"expected {n} matrix rows", line=lines[-1][0])
    rows = []
    for lineno, toks in lines[1 : 1 + n]:
        if len(toks) != n:
            raise ParseError(f"matrix row needs {n} entries, got {len(toks)}", line=lineno)
        try:
            rows.append([float(t) for t in toks])
        except ValueError:
            raise ParseError("matrix entries must be numbers or inf", line=lineno) from None
    trains = []
    for lineno, toks in lines[1 + n :]:
        if len(toks) != 5:
            raise ParseError("train rows are 'v m h origin dest'", line=lineno)
        try:
            v, m, h = (float(t) for t in toks[:3])
            o, d = (int(t) for t in toks[3:])
        except ValueError:
            raise ParseError("bad number in train row", line=lineno) from None
        trains.append(TinyTrain(v, m, h, o, d))
    return TinyInstance(np.array(rows, dtype=float), trains).validate()


def load_tiny_instance(path) -> TinyInstance:
    return parse_tiny_instance(Path(path).read_text())


def value_iteration(P: np.ndarray, R: np.ndarray, gamma: float, tol: float = 1e-12, max_iter: int = 100_000):
    """Optimal ``(V, Q)`` for transition tensor ``P[s, a, s']`` and rewards ``R[s, a]``."""
    V = np.zeros(P.shape[0])
    for _ in range(max_iter):
        Q = R + gamma * P @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    return V, R + gamma * P @ V


def chain_mdp(n_states: int = 5, n_actions: int = 2, goal_reward: float = 1.0, step_reward: float = 0.0):
    """Deterministic chain: action 1 moves right, action 0 moves left.

    Reaching the right end pays ``goal_reward`` and ends the episode (absorbing
    state with zero reward). Returns ``(P, R, terminal)``.
    """
    P = np.zeros((n_states, n_actions, n_states))
    R = np.full((n_states, n_actions), step_reward)
    terminal = np.zeros(n_states, dtype=bool)
    terminal[-1] = True
    for s in range(n_states):
        if terminal[s]:
            P[s, :, s] = 1.0
            R[s, :] = 0.0
            continue
        left, right = max(0, s - 1), s + 1
        P[s, 0, left] = 1.0
        P[s, 1, right] = 1.0
        if right == n_states - 1:
            R[s, 1] = goal_reward
        for a in range(2, n_actions):
            P[s, a, s] = 1.0
    return P, R, terminal
