from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

from cderail.railsim.grid import Cell


class Status(enum.IntEnum):
    READY = 0
    ACTIVE = 1
    DONE = 2


class Action(enum.IntEnum):
    DO_NOTHING = 0
    TURN_LEFT = 1
    FORWARD = 2
    TURN_RIGHT = 3
    STOP = 4


N_ACTIONS = len(Action)


@dataclass
class Train:
    """A train and its motion state.

    ``position`` is ``None`` while the train is off the map (READY or DONE).
    Progress through the current cell is kept as a whole number of ticks so
    that fractional speeds accumulate exactly.
    """

    id: int
    spawn: Cell
    heading: int
    speed: Fraction
    target: Cell
    position: Cell | None = None
    status: Status = Status.READY
    progress_ticks: int = 0
    malfunction_remaining: int = 0
    arrival_tick: int | None = None
    moving: bool = False

    @property
    def ticks_per_cell(self) -> int:
        return self.speed.denominator // self.speed.numerator

    @property
    def speed_progress(self) -> Fraction:
        return self.progress_ticks * self.speed

    @property
    def location(self) -> Cell:
        """Current cell, or the spawn cell for a train still waiting to depart."""
        return self.position if self.position is not None else self.spawn

    def copy(self) -> Train:
        return Train(**self.__dict__)
