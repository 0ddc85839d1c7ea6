"""Multi-agent stepping, malfunctions, deadlock detection and episode scoring."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from cderail.errors import EmptyEpisodeError
from cderail.railsim.generators import generate_grid
from cderail.railsim.grid import Cell, RailGrid, neighbour
from cderail.railsim.stage import StageSpec
from cderail.railsim.train import Action, Status, Train

log = logging.getLogger(__name__)

MOVE_ACTIONS = (Action.TURN_LEFT, Action.FORWARD, Action.TURN_RIGHT)


def horizon(width: int, height: int, trains) -> int:
    slowest = max(t.ticks_per_cell for t in trains)
    return math.ceil(4 * (width + height) * slowest)


@dataclass(eq=False)
class EnvState:
    grid: RailGrid
    trains: list[Train]
    max_ticks: int
    rng: np.random.Generator
    malfunction_rate: Fraction = Fraction(0)
    halt_range: tuple[int, int] = (3, 20)
    tick: int = 0
    reward_sums: list[float] = field(default_factory=list)
    illegal_actions: int = 0

    def copy(self) -> EnvState:
        return EnvState(
            grid=self.grid,
            trains=[t.copy() for t in self.trains],
            max_ticks=self.max_ticks,
            rng=copy.deepcopy(self.rng),
            malfunction_rate=self.malfunction_rate,
            halt_range=self.halt_range,
            tick=self.tick,
            reward_sums=list(self.reward_sums),
            illegal_actions=self.illegal_actions,
        )

    def __eq__(self, other):
        if not isinstance(other, EnvState):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.trains == other.trains
            and self.max_ticks == other.max_ticks
            and self.tick == other.tick
            and self.malfunction_rate == other.malfunction_rate
            and self.halt_range == other.halt_range
            and self.reward_sums == other.reward_sums
            and self.rng.bit_generator.state == other.rng.bit_generator.state
        )

    @property
    def done(self) -> bool:
        return self.tick >= self.max_ticks or all(t.status is Status.DONE for t in self.trains)

    def occupancy(self) -> dict[Cell, int]:
        return {t.position: t.id for t in self.trains if t.status is Status.ACTIVE}

    def train(self, train_id: int) -> Train:
        for t in self.trains:
            if t.id == train_id:
                return t
        raise KeyError(train_id)


def reset(spec: StageSpec, seed: int) -> EnvState:
    """Fresh episode: every train READY at its spawn, clock at zero."""
    if spec.agents <= 0:
        raise EmptyEpisodeError("stage has no agents")
    spec.validate()
    grid, trains = generate_grid(spec, seed)
    return EnvState(
        grid=grid,
        trains=trains,
        max_ticks=horizon(spec.width, spec.height, trains),
        rng=np.random.default_rng([seed, 0x5EED]),
        malfunction_rate=spec.malfunction_rate,
        halt_range=spec.halt_range,
    )


def resolve_exit(grid: RailGrid, cell: Cell, heading: int, action: int) -> int | None:
    """Exit heading chosen by a movement action, or ``None`` if it is illegal.

    On plain track (a single exit) every movement action follows the track;
    at a switch LEFT/FORWARD/RIGHT pick the matching relative exit.
    """
    outs = grid.exits(cell, heading)
    if not outs:
        return None
    if len(outs) == 1:
        return outs[0]
    want = {Action.TURN_LEFT: (heading + 3) % 4, Action.FORWARD: heading, Action.TURN_RIGHT: (heading + 1) % 4}[
        Action(action)
    ]
    return want if want in outs else None


def step(state: EnvState, actions: dict[int, int], inplace: bool = False):
    """Advance one tick. Returns ``(state, rewards, done)``.

    Order within a tick: malfunction counters tick down, healthy trains may
    break down, then trains move one at a time in ascending id order.
    """
    st = state if inplace else state.copy()
    trains = sorted(st.trains, key=lambda t: t.id)
    pending = [t for t in trains if t.status is not Status.DONE]

    for t in pending:
        if t.status is Status.ACTIVE and t.malfunction_remaining > 0:
            t.malfunction_remaining -= 1
    rate = float(st.malfunction_rate)
    if rate > 0:
        lo, hi = st.halt_range
        for t in pending:
            if t.status is Status.ACTIVE and t.malfunction_remaining == 0 and st.rng.random() < rate:
                t.malfunction_remaining = int(st.rng.integers(lo, hi + 1))

    occupied = st.occupancy()
    for t in pending:
        action = Action(actions.get(t.id, Action.DO_NOTHING))
        if action is Action.STOP:
            t.moving = False
            continue
        if action is Action.DO_NOTHING:
            if not t.moving:
                continue
            action = Action.FORWARD
        if t.status is Status.ACTIVE and t.malfunction_remaining > 0:
            continue
        cell = t.location
        out = resolve_exit(st.grid, cell, t.heading, action)
        if out is None:
            log.debug("train %d: illegal %s at %s, stopping", t.id, action.name, cell)
            st.illegal_actions += 1
            t.moving = False
            continue
        t.moving = True
        if t.status is Status.READY:
            if cell in occupied:
                continue
            t.status = Status.ACTIVE
            t.position = cell
            occupied[cell] = t.id
        if t.progress_ticks + 1 < t.ticks_per_cell:
            t.progress_ticks += 1
            continue
        nxt = neighbour(cell, out)
        if nxt in occupied:
            t.progress_ticks = t.ticks_per_cell - 1
            continue
        del occupied[cell]
        t.heading = out
        t.progress_ticks = 0
        if nxt == t.target:
            t.status = Status.DONE
            t.position = None
            t.arrival_tick = st.tick + 1
        else:
            t.position = nxt
            occupied[nxt] = t.id

    penalty = -1.0 / st.max_ticks
    rewards = {t.id: penalty for t in pending}
    st.reward_sums.append(penalty * len(pending))
    st.tick += 1
    done = all(t.status is Status.DONE for t in trains) or st.tick >= st.max_ticks
    return st, rewards, done


def detect_deadlocks(state: EnvState) -> set[int]:
    """Ids of ACTIVE trains that can never move again.

    A train is a candidate when every legal continuation cell is occupied.
    Candidates are then pruned until each remaining train only waits on other
    remaining trains: the survivors form blocking cycles plus the chains that
    feed into them. Malfunction alone never makes a train deadlocked.
    """
    occupied = state.occupancy()
    waits: dict[int, set[int]] = {}
    for t in state.trains:
        if t.status is not Status.ACTIVE:
            continue
        ahead = [neighbour(t.position, o) for o in state.grid.exits(t.position, t.heading)]
        if ahead and all(c in occupied for c in ahead):
            waits[t.id] = {occupied[c] for c in ahead}
    stuck = set(waits)
    changed = True
    while changed:
        changed = False
        for tid in list(stuck):
            if not waits[tid] <= stuck:
                stuck.discard(tid)
                changed = True
    return stuck


@dataclass
class EpisodeLog:
    arrivals: list[int | None]
    max_ticks: int
    num_agents: int
    reward_sums: list[float] = field(default_factory=list)


def episode_log(state: EnvState) -> EpisodeLog:
    trains = sorted(state.trains, key=lambda t: t.id)
    return EpisodeLog(
        arrivals=[t.arrival_tick for t in trains],
        max_ticks=state.max_ticks,
        num_agents=len(trains),
        reward_sums=list(state.reward_sums),
    )


def episode_score(ep: EpisodeLog) -> tuple[float, float]:
    """``(score, completion)``; score is mean normalised arrival time, lower is better."""
    T = ep.max_ticks
    done = [a for a in ep.arrivals if a is not None]
    completion = len(done) / ep.num_agents
    total = sum(min(a, T) if a is not None else T for a in ep.arrivals)
    return total / (T * ep.num_agents), completion
