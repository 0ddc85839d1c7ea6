from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from fractions import Fraction

from cderail.errors import ValidationError

# Speed-mix slots, left to right, in cells per tick.
SPEED_SLOTS = (Fraction(1, 4), Fraction(1, 3), Fraction(1, 2), Fraction(1, 1))


class Family(str, enum.Enum):
    SPARSE = "sparse"
    PATHFINDING = "pathfinding"
    MALFUNCTION = "malfunction"
    DEADLOCK = "deadlock"


@dataclass(frozen=True)
class StageSpec:
    """One curriculum row: environment family, size, traffic and step budget."""

    family: Family
    width: int
    height: int
    agents: int
    speed_mix: tuple[int, int, int, int] = (0, 0, 0, 100)
    malfunction_rate: Fraction = Fraction(0)
    network_steps: int = 1
    switches: int | None = None
    halt_range: tuple[int, int] = (3, 20)

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "speed_mix", tuple(int(v) for v in self.speed_mix))
        object.__setattr__(self, "malfunction_rate", Fraction(self.malfunction_rate))
        object.__setattr__(self, "halt_range", tuple(int(v) for v in self.halt_range))

    def validate(self) -> StageSpec:
        if len(self.speed_mix) != 4 or any(v < 0 for v in self.speed_mix):
            raise ValidationError(f"speed mix {self.speed_mix} must be 4 non-negative fractions")
        if sum(self.speed_mix) != 100:
            raise ValidationError(f"speed mix {self.speed_mix} sums to {sum(self.speed_mix)}, not 100")
        if self.network_steps <= 0:
            raise ValidationError("network_steps must be positive")
        if self.agents < 1:
            raise ValidationError("agents must be at least 1")
        if not 0 <= self.malfunction_rate <= 1:
            raise ValidationError(f"malfunction rate {self.malfunction_rate} outside [0, 1]")
        lo, hi = self.halt_range
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad halt range {self.halt_range}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"bad size {self.width}x{self.height}")
        return self

    def scaled(self, scale: float) -> StageSpec:
        return replace(self, network_steps=max(1, round(self.network_steps * scale)))
