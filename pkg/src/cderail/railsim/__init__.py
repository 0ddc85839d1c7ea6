"""Grid rail simulator."""

from cderail.railsim.env import (
    EnvState,
    EpisodeLog,
    detect_deadlocks,
    episode_log,
    episode_score,
    horizon,
    reset,
    resolve_exit,
    step,
)
from cderail.railsim.generators import decision_branches, generate_grid
from cderail.railsim.grid import (
    E,
    N,
    S,
    W,
    RailGrid,
    TrackBuilder,
    dump_grid,
    load_grid,
    shortest_path_distance,
    validate_grid,
)
from cderail.railsim.stage import SPEED_SLOTS, Family, StageSpec
from cderail.railsim.train import N_ACTIONS, Action, Status, Train

__all__ = [
    "Action",
    "E",
    "EnvState",
    "EpisodeLog",
    "Family",
    "N",
    "N_ACTIONS",
    "RailGrid",
    "S",
    "SPEED_SLOTS",
    "StageSpec",
    "Status",
    "TrackBuilder",
    "Train",
    "W",
    "decision_branches",
    "detect_deadlocks",
    "dump_grid",
    "episode_log",
    "episode_score",
    "generate_grid",
    "horizon",
    "load_grid",
    "reset",
    "resolve_exit",
    "shortest_path_distance",
    "step",
    "validate_grid",
]
