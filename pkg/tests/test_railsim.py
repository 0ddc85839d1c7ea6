from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cderail.errors import EmptyEpisodeError, InfeasibleSpecError, ValidationError
from cderail.railsim import (
    Action,
    E,
    EpisodeLog,
    Family,
    N,
    RailGrid,
    S,
    StageSpec,
    Status,
    TrackBuilder,
    Train,
    W,
    decision_branches,
    detect_deadlocks,
    dump_grid,
    episode_log,
    episode_score,
    generate_grid,
    horizon,
    load_grid,
    reset,
    shortest_path_distance,
    step,
    validate_grid,
)
from cderail.railsim.env import EnvState
from cderail.railsim.grid import bit
from cderail.harness.scenarios import chain_behind_head_on, four_cycle, head_on, unblockable

MOVES = {N: (-1, 0), E: (0, 1), S: (1, 0), W: (0, -1)}


def straight(length):
    b = TrackBuilder(length, 1)
    b.add_path([(0, c) for c in range(length)])
    return b.build(targets=[(0, length - 1)], spawn_points=[((0, 0), E)])


def make_state(grid, trains, max_ticks=50, rate=0):
    return EnvState(grid, trains, max_ticks, np.random.default_rng(0), Fraction(rate))


def brute_distance(grid, cell, heading, target):
    """BFS over (cell, heading) nodes decoding transition bits by hand."""
    if cell == target:
        return 0
    seen = {(cell, heading)}
    queue = deque([(cell, heading, 0)])
    while queue:
        (r, c), h, d = queue.popleft()
        m = int(grid.masks[r, c])
        for out in range(4):
            if not m >> (4 * h + out) & 1:
                continue
            nxt = (r + MOVES[out][0], c + MOVES[out][1])
            if nxt == target:
                return d + 1
            if (nxt, out) not in seen:
                seen.add((nxt, out))
                queue.append((nxt, out, d + 1))
    return np.inf


def reciprocity_violations(grid):
    bad = []
    for r in range(grid.height):
        for c in range(grid.width):
            m = int(grid.masks[r, c])
            for h in range(4):
                for out in range(4):
                    if m >> (4 * h + out) & 1:
                        nr, nc = r + MOVES[out][0], c + MOVES[out][1]
                        if not (0 <= nr < grid.height and 0 <= nc < grid.width):
                            bad.append((r, c))
                        elif not (int(grid.masks[nr, nc]) >> (4 * out) & 0xF):
                            bad.append((r, c))
    return bad


# grids


def test_straight_track_is_valid():
    b = TrackBuilder(2, 1)
    b.add_path([(0, 0), (0, 1)])
    assert validate_grid(b.build()) == []


def test_exit_into_empty_cell_is_one_violation():
    masks = np.zeros((2, 1), dtype=np.uint16)
    masks[1, 0] = bit(N, N)
    problems = validate_grid(RailGrid(1, 2, masks))
    assert len(problems) == 1
    assert "(1, 0)" in problems[0]


def test_straight_distance_is_length_minus_one():
    g = straight(7)
    assert shortest_path_distance(g, (0, 0), E, (0, 6)) == 6
    assert shortest_path_distance(g, (0, 3), E, (0, 3)) == 0


def test_grid_text_round_trip(tmp_path):
    grid, _ = generate_grid(StageSpec(Family.SPARSE, 16, 16, 3, (25, 25, 25, 25)), 4)
    path = tmp_path / "g.txt"
    path.write_text(dump_grid(grid))
    assert load_grid(path.read_text()) == grid


@pytest.mark.parametrize(
    "spec",
    [
        StageSpec(Family.PATHFINDING, 4, 4, 1),
        StageSpec(Family.PATHFINDING, 32, 32, 1),
        StageSpec(Family.MALFUNCTION, 12, 5, 8, (25, 25, 25, 25), Fraction(1, 100)),
        StageSpec(Family.DEADLOCK, 32, 2, 4, (50, 0, 0, 50), Fraction(1, 64), switches=3),
        StageSpec(Family.DEADLOCK, 32, 4, 16, (25, 25, 25, 25), Fraction(1, 64), switches=3),
        StageSpec(Family.SPARSE, 16, 16, 3, (25, 25, 25, 25)),
        StageSpec(Family.SPARSE, 40, 40, 6, (50, 0, 25, 25)),
    ],
    ids=lambda s: f"{s.family.value}-{s.width}x{s.height}-{s.agents}",
)
def test_generated_grids_are_sound(spec):
    for seed in range(25):
        grid, trains = generate_grid(spec, seed)
        assert validate_grid(grid) == []
        assert reciprocity_violations(grid) == []
        assert len(trains) == spec.agents
        for t in trains:
            assert brute_distance(grid, t.spawn, t.heading, t.target) < np.inf


def test_pathfinding_distance_matches_brute_force():
    for n in (4, 8, 16, 32):
        for seed in range(10):
            grid, (t,) = generate_grid(StageSpec(Family.PATHFINDING, n, n, 1), seed)
            rng = np.random.default_rng(seed)
            cells = [tuple(c) for c in np.argwhere(grid.masks > 0)]
            for _ in range(10):
                cell = cells[rng.integers(len(cells))]
                h = int(rng.integers(4))
                assert shortest_path_distance(grid, cell, h, t.target) == brute_distance(grid, cell, h, t.target)


def test_pathfinding_has_two_route_lengths():
    for seed in range(50):
        grid, (t,) = generate_grid(StageSpec(Family.PATHFINDING, 8, 8, 1), seed)
        # walk to the first switch and compare its branches
        lengths = set(decision_branches(grid, t.spawn, t.heading, t.target).values())
        assert len({d for d in lengths if np.isfinite(d)}) >= 2


def test_pathfinding_4x4_seed_7():
    grid, trains = generate_grid(StageSpec(Family.PATHFINDING, 4, 4, 1), 7)
    assert len(trains) == 1 and len(grid.targets) == 1 and len(grid.spawn_points) == 1
    t = trains[0]
    assert np.isfinite(shortest_path_distance(grid, t.spawn, t.heading, t.target))


def test_deadlock_32x2_trains_oppose():
    grid, trains = generate_grid(StageSpec(Family.DEADLOCK, 32, 2, 2), 0)
    a, b = trains
    assert {a.heading, b.heading} == {E, W}
    assert a.spawn[0] == b.spawn[0]  # same track


@pytest.mark.parametrize(
    "spec",
    [
        StageSpec(Family.PATHFINDING, 3, 3, 1),
        StageSpec(Family.PATHFINDING, 8, 8, 2),
        StageSpec(Family.DEADLOCK, 32, 2, 2, switches=0),
    ],
)
def test_infeasible_specs(spec):
    with pytest.raises(InfeasibleSpecError):
        generate_grid(spec, 0)


def test_speed_mix_is_respected():
    spec = StageSpec(Family.MALFUNCTION, 12, 5, 8, (100, 0, 0, 0))
    _, trains = generate_grid(spec, 0)
    assert {t.speed for t in trains} == {Fraction(1, 4)}
    spec = StageSpec(Family.MALFUNCTION, 12, 5, 8, (0, 0, 0, 100))
    _, trains = generate_grid(spec, 0)
    assert {t.speed for t in trains} == {Fraction(1)}


def test_bad_speed_mix_rejected():
    with pytest.raises(ValidationError):
        StageSpec(Family.SPARSE, 16, 16, 3, (30, 30, 30, 30)).validate()


# reset and step


def test_reset_is_deterministic():
    spec = StageSpec(Family.SPARSE, 16, 16, 3, (25, 25, 25, 25), Fraction(1, 1000))
    assert reset(spec, 11) == reset(spec, 11)
    assert reset(spec, 11) != reset(spec, 12)


def test_reset_horizon_for_pathfinding_4x4():
    st = reset(StageSpec(Family.PATHFINDING, 4, 4, 1), 7)
    # ceil(4 * (4 + 4) / 1) for a full-speed train
    assert st.max_ticks == 32
    assert st.tick == 0
    assert all(t.status is Status.READY and t.position is None for t in st.trains)


def test_horizon_uses_slowest_train():
    trains = [Train(0, (0, 0), E, Fraction(1), (0, 1)), Train(1, (0, 0), E, Fraction(1, 3), (0, 1))]
    assert horizon(10, 5, trains) == 180


def test_reset_without_agents():
    with pytest.raises(EmptyEpisodeError):
        reset(StageSpec(Family.SPARSE, 16, 16, 0), 0)


def test_full_speed_forward_moves_one_cell():
    g = straight(6)
    t = Train(0, (0, 1), E, Fraction(1), (0, 5), position=(0, 1), status=Status.ACTIVE)
    st = make_state(g, [t], max_ticks=40)
    new, rewards, done = step(st, {0: Action.FORWARD})
    assert new.trains[0].position == (0, 2)
    assert rewards == {0: pytest.approx(-1 / 40)}
    assert not done
    assert st.trains[0].position == (0, 1)  # not mutated


def test_half_speed_needs_two_ticks():
    g = straight(6)
    t = Train(0, (0, 1), E, Fraction(1, 2), (0, 5), position=(0, 1), status=Status.ACTIVE)
    st = make_state(g, [t])
    st, _, _ = step(st, {0: Action.FORWARD})
    assert st.trains[0].position == (0, 1)
    st, _, _ = step(st, {0: Action.FORWARD})
    assert st.trains[0].position == (0, 2)


def test_head_on_neither_moves_and_both_flagged():
    st = head_on()
    before = [t.position for t in st.trains]
    new, _, _ = step(st, {0: Action.FORWARD, 1: Action.FORWARD})
    assert [t.position for t in new.trains] == before
    assert detect_deadlocks(new) == {0, 1}


def test_four_cycle_flagged_and_unblockable():
    st = four_cycle()
    assert detect_deadlocks(st) == {0, 1, 2, 3}
    assert unblockable(st, horizon=3)


def test_queue_behind_head_on_is_flagged():
    st = chain_behind_head_on()
    assert detect_deadlocks(st) == {0, 1, 2}
    assert unblockable(st, horizon=3)


def test_free_train_not_deadlocked():
    g = straight(5)
    st = make_state(g, [Train(0, (0, 1), E, Fraction(1), (0, 4), position=(0, 1), status=Status.ACTIVE)])
    assert detect_deadlocks(st) == set()


def test_malfunction_alone_is_not_deadlock():
    g = straight(5)
    t = Train(0, (0, 1), E, Fraction(1), (0, 4), position=(0, 1), status=Status.ACTIVE, malfunction_remaining=5)
    st = make_state(g, [t])
    assert detect_deadlocks(st) == set()
    new, _, _ = step(st, {0: Action.FORWARD})
    assert new.trains[0].position == (0, 1)


def test_train_arrival_marks_done_and_vacates():
    g = straight(3)
    t = Train(0, (0, 1), E, Fraction(1), (0, 2), position=(0, 1), status=Status.ACTIVE)
    st, rewards, done = step(make_state(g, [t]), {0: Action.FORWARD})
    assert st.trains[0].status is Status.DONE
    assert st.trains[0].arrival_tick == 1
    assert st.trains[0].position is None
    assert done


def test_done_train_gets_no_reward():
    g = straight(4)
    trains = [
        Train(0, (0, 2), E, Fraction(1), (0, 3), position=(0, 2), status=Status.ACTIVE),
        Train(1, (0, 0), E, Fraction(1, 4), (0, 3), position=(0, 0), status=Status.ACTIVE),
    ]
    st, _, _ = step(make_state(g, trains), {0: Action.FORWARD, 1: Action.STOP})
    _, rewards, _ = step(st, {1: Action.STOP})
    assert set(rewards) == {1}


def test_illegal_turn_becomes_stop():
    g = straight(5)
    t = Train(0, (0, 1), E, Fraction(1), (0, 4), position=(0, 1), status=Status.ACTIVE)
    st = make_state(g, [t])
    # a single-exit cell follows the track for any movement action
    new, _, _ = step(st, {0: Action.TURN_LEFT})
    assert new.trains[0].position == (0, 2)
    assert new.illegal_actions == 0


def test_illegal_turn_at_switch_stops():
    b = TrackBuilder(3, 3)
    b.add_path([(1, 0), (1, 1), (1, 2)])
    b.add_path([(1, 1), (0, 1)])
    b.junction((1, 1))
    g = b.build()
    t = Train(0, (1, 1), E, Fraction(1), (1, 2), position=(1, 1), status=Status.ACTIVE)
    new, _, _ = step(make_state(g, [t]), {0: Action.TURN_RIGHT})
    assert new.trains[0].position == (1, 1)
    assert new.illegal_actions == 1
    new, _, _ = step(make_state(g, [t.copy()]), {0: Action.TURN_LEFT})
    assert new.trains[0].position == (0, 1)


def test_rate_zero_never_halts():
    spec = StageSpec(Family.MALFUNCTION, 12, 5, 8, (25, 25, 25, 25), Fraction(0))
    st = reset(spec, 0)
    while not st.done:
        st, _, _ = step(st, {t.id: Action.FORWARD for t in st.trains}, inplace=True)
        assert all(t.malfunction_remaining == 0 for t in st.trains)


def test_rate_one_halts_every_healthy_tick():
    g = straight(30)
    t = Train(0, (0, 0), E, Fraction(1), (0, 29), position=(0, 0), status=Status.ACTIVE)
    st = make_state(g, [t], max_ticks=200, rate=1)
    st.halt_range = (4, 4)
    moves = 0
    for _ in range(50):
        before = st.trains[0].position
        st, _, _ = step(st, {0: Action.FORWARD}, inplace=True)
        assert st.trains[0].malfunction_remaining > 0
        moves += st.trains[0].position != before
    assert moves == 0


def test_halt_duration_within_range():
    g = straight(30)
    rng = np.random.default_rng(3)
    halts = []
    for k in range(200):
        t = Train(0, (0, 0), E, Fraction(1), (0, 29), position=(0, 0), status=Status.ACTIVE)
        st = EnvState(g, [t], 100, np.random.default_rng(int(rng.integers(1 << 30))), Fraction(1))
        st, _, _ = step(st, {0: Action.STOP})
        halts.append(st.trains[0].malfunction_remaining)
    assert min(halts) >= 3 and max(halts) <= 20
    assert len(set(halts)) > 10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.sampled_from([4, 8, 16]), speed=st.sampled_from([1, 2, 3, 4]))
def test_single_train_travel_time(seed, n, speed):
    spec = StageSpec(Family.PATHFINDING, n, n, 1)
    st = reset(spec, seed)
    t = st.trains[0]
    t.speed = Fraction(1, speed)
    st.max_ticks = horizon(n, n, st.trains)
    d = shortest_path_distance(st.grid, t.spawn, t.heading, t.target)
    table = st.grid.distance_table(t.target)
    while not st.done:
        tr = st.trains[0]
        best = min(
            (a for a in (Action.TURN_LEFT, Action.FORWARD, Action.TURN_RIGHT)),
            key=lambda a: _branch_distance(st.grid, tr, a, table),
        )
        st, _, _ = step(st, {0: best}, inplace=True)
    assert st.trains[0].arrival_tick == d * speed


def _branch_distance(grid, t, action, table):
    from cderail.railsim import resolve_exit
    from cderail.railsim.grid import neighbour

    out = resolve_exit(grid, t.location, t.heading, action)
    if out is None:
        return np.inf
    r, c = neighbour(t.location, out)
    return table[r, c, out]


def test_step_is_deterministic_under_fuzzing():
    spec = StageSpec(Family.DEADLOCK, 32, 4, 8, (25, 25, 25, 25), Fraction(1, 20), switches=3)
    rng = np.random.default_rng(0)
    plan = [rng.integers(0, 5, size=8) for _ in range(200)]

    def run():
        st = reset(spec, 5)
        for acts in plan:
            st, _, done = step(st, dict(enumerate(acts.tolist())), inplace=True)
            if done:
                break
        return episode_log(st)

    assert run() == run()


def test_cell_exclusion_under_fuzzing():
    rng = np.random.default_rng(1)
    specs = [
        StageSpec(Family.DEADLOCK, 32, 4, 16, (25, 25, 25, 25), Fraction(1, 64), switches=3),
        StageSpec(Family.MALFUNCTION, 12, 5, 8, (25, 25, 25, 25), Fraction(1, 100)),
        StageSpec(Family.SPARSE, 16, 16, 6, (25, 25, 25, 25), Fraction(1, 100)),
    ]
    ticks = 0
    while ticks < 30_000:
        spec = specs[ticks % 3]
        st = reset(spec, int(rng.integers(1 << 30)))
        done = False
        while not done:
            st, _, done = step(st, {t.id: int(rng.integers(5)) for t in st.trains}, inplace=True)
            cells = [t.position for t in st.trains if t.status is Status.ACTIVE]
            assert len(cells) == len(set(cells))
            ticks += 1


# scoring


def test_score_all_arrive():
    log = EpisodeLog([30, 30, 30], 100, 3)
    assert episode_score(log) == (pytest.approx(0.3), 1.0)


def test_score_none_arrive():
    assert episode_score(EpisodeLog([None, None], 100, 2)) == (1.0, 0.0)


def test_score_mixed():
    score, completion = episode_score(EpisodeLog([20, None], 100, 2))
    assert score == pytest.approx(0.6)
    assert completion == 0.5


def test_score_equals_negated_mean_return():
    spec = StageSpec(Family.MALFUNCTION, 12, 5, 6, (50, 0, 0, 50), Fraction(1, 100))
    st = reset(spec, 2)
    returns = {t.id: 0.0 for t in st.trains}
    rng = np.random.default_rng(0)
    done = False
    while not done:
        st, rewards, done = step(st, {t.id: int(rng.integers(4)) for t in st.trains}, inplace=True)
        for k, v in rewards.items():
            returns[k] += v
    score, _ = episode_score(episode_log(st))
    assert score == pytest.approx(-np.mean(list(returns.values())))
