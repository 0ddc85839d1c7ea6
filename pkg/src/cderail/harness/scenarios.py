"""Hand-built simulator states with known outcomes."""

from __future__ import annotations

from fractions import Fraction
from itertools import product

import numpy as np

from cderail.railsim import Action, EnvState, Status, TrackBuilder, Train, step
from cderail.railsim.grid import E, N, S, W


def _state(grid, trains, max_ticks=100) -> EnvState:
    return EnvState(grid=grid, trains=trains, max_ticks=max_ticks, rng=np.random.default_rng(0))


def _active(i, cell, heading, target) -> Train:
    return Train(i, cell, heading, Fraction(1), target, position=cell, status=Status.ACTIVE, moving=True)


def head_on(length: int = 6) -> EnvState:
    """Two trains nose to nose in the middle of a single straight track."""
    b = TrackBuilder(length, 1)
    b.add_path([(0, c) for c in range(length)])
    grid = b.build()
    mid = length // 2
    trains = [_active(0, (0, mid - 1), E, (0, length - 1)), _active(1, (0, mid), W, (0, 0))]
    return _state(grid, trains)


def four_cycle() -> EnvState:
    """Four trains filling a 2x2 loop, each facing the next one clockwise.

    A heading is the direction of travel on entry, so the train in the
    north-west corner arrived moving north and leaves east.
    """
    b = TrackBuilder(2, 2)
    b.add_path([(0, 0), (0, 1), (1, 1), (1, 0)], closed=True)
    grid = b.build()
    trains = [
        _active(0, (0, 0), N, (1, 0)),
        _active(1, (0, 1), E, (0, 0)),
        _active(2, (1, 1), S, (0, 1)),
        _active(3, (1, 0), W, (1, 1)),
    ]
    return _state(grid, trains)


def chain_behind_head_on(length: int = 8) -> EnvState:
    """A head-on pair with a third train queued behind one of them."""
    b = TrackBuilder(length, 1)
    b.add_path([(0, c) for c in range(length)])
    grid = b.build()
    mid = length // 2
    trains = [
        _active(0, (0, mid - 1), E, (0, length - 1)),
        _active(1, (0, mid), W, (0, 0)),
        _active(2, (0, mid - 2), E, (0, length - 1)),
    ]
    return _state(grid, trains)


def _key(state: EnvState):
    return tuple((t.status, t.position, t.heading, t.progress_ticks, t.moving) for t in state.trains)


def reachable_positions(state: EnvState, horizon: int) -> set[tuple]:
    """Every joint train placement reachable within ``horizon`` ticks under any
    joint action sequence (malfunctions off)."""
    actions = list(Action)
    ids = [t.id for t in state.trains if t.status is not Status.DONE]
    frontier = {_key(state): state}
    seen_positions = {tuple(t.position for t in state.trains)}
    for _ in range(horizon):
        nxt = {}
        for st in frontier.values():
            for joint in product(actions, repeat=len(ids)):
                new, _, _ = step(st, dict(zip(ids, joint)))
                seen_positions.add(tuple(t.position for t in new.trains))
                nxt.setdefault(_key(new), new)
        frontier = nxt
    return seen_positions


def unblockable(state: EnvState, horizon: int = 3) -> bool:
    """True when no joint action sequence moves any train within ``horizon`` ticks."""
    return reachable_positions(state, horizon) == {tuple(t.position for t in state.trains)}
