"""Seeded topology generators, one per environment family."""

from __future__ import annotations

import math

import numpy as np

from cderail.errors import InfeasibleSpecError
from cderail.railsim.grid import HEADINGS, Cell, RailGrid, TrackBuilder, neighbour, opposite, validate_grid
from cderail.railsim.stage import SPEED_SLOTS, Family, StageSpec
from cderail.railsim.train import Train

MAX_ATTEMPTS = 200

MIN_SIZE = {
    Family.PATHFINDING: (4, 4),
    Family.MALFUNCTION: (6, 3),
    Family.DEADLOCK: (6, 2),
    Family.SPARSE: (6, 6),
}


def default_switches(width: int) -> int:
    return max(1, width // 8)


def generate_grid(spec: StageSpec, seed: int) -> tuple[RailGrid, list[Train]]:
    """Build a topology for ``spec`` and place ``spec.agents`` READY trains on it."""
    min_w, min_h = MIN_SIZE[spec.family]
    if spec.width < min_w or spec.height < min_h:
        raise InfeasibleSpecError(
            f"{spec.family.value} needs at least {min_w}x{min_h}, got {spec.width}x{spec.height}"
        )
    if spec.family is Family.PATHFINDING and spec.agents != 1:
        raise InfeasibleSpecError("pathfinding environments are single-agent")
    if spec.family is Family.DEADLOCK and spec.switches is not None and spec.switches < 1:
        raise InfeasibleSpecError("deadlock environments need at least one switch per track pair")
    rng = np.random.default_rng(seed)
    build = {
        Family.PATHFINDING: _pathfinding,
        Family.MALFUNCTION: _malfunction,
        Family.DEADLOCK: _deadlock,
        Family.SPARSE: _sparse,
    }[spec.family]
    for _ in range(MAX_ATTEMPTS):
        result = build(spec, rng)
        if result is None:
            continue
        grid, placements = result
        if validate_grid(grid):
            continue
        table_ok = all(
            grid.distance_table(t)[c[0], c[1], h] < np.inf for c, h, t in placements
        )
        if not table_ok:
            continue
        speed_idx = rng.choice(4, size=len(placements), p=np.asarray(spec.speed_mix) / 100.0)
        trains = [
            Train(id=i, spawn=c, heading=h, speed=SPEED_SLOTS[k], target=t)
            for i, ((c, h, t), k) in enumerate(zip(placements, speed_idx))
        ]
        return grid, trains
    raise InfeasibleSpecError(f"no valid {spec.family.value} topology for {spec.width}x{spec.height}")


def decision_branches(grid: RailGrid, cell: Cell, heading: int, target: Cell) -> dict[int, float]:
    """Follow the forced track from ``(cell, heading)`` to the first switch.

    Returns the distance to ``target`` through each exit of that switch, or
    an empty dict if the target is reached (or the track loops) first.
    """
    table = grid.distance_table(target)
    seen = set()
    while (cell, heading) not in seen and cell != target:
        seen.add((cell, heading))
        outs = grid.exits(cell, heading)
        if len(outs) > 1:
            out = {}
            for o in outs:
                nb = neighbour(cell, o)
                out[o] = 1 + table[nb[0], nb[1], o]
            return out
        if not outs:
            return {}
        heading = outs[0]
        cell = neighbour(cell, heading)
    return {}


def _best_heading(grid: RailGrid, cell: Cell, target: Cell) -> int | None:
    table = grid.distance_table(target)
    cands = [(table[cell[0], cell[1], h], h) for h in HEADINGS if grid.exits(cell, h)]
    cands = [c for c in cands if c[0] < np.inf]
    return min(cands)[1] if cands else None


def _ring_cells(r0, r1, c0, c1) -> list[Cell]:
    cells = [(r0, c) for c in range(c0, c1 + 1)]
    cells += [(r, c1) for r in range(r0 + 1, r1 + 1)]
    cells += [(r1, c) for c in range(c1 - 1, c0 - 1, -1)]
    cells += [(r, c0) for r in range(r1 - 1, r0, -1)]
    return cells


def _pathfinding(spec: StageSpec, rng):
    W, H = spec.width, spec.height
    # pick a side to leave free for the approach tail, then the ring rectangle
    side = int(rng.integers(4))
    vertical_tail = side in (0, 2)
    span_h = H - 1 if vertical_tail else H
    span_w = W if vertical_tail else W - 1
    rh = int(rng.integers(max(3, span_h // 2), span_h + 1))
    rw = int(rng.integers(max(3, span_w // 2), span_w + 1))
    if side == 0:  # tail above the ring
        r0 = int(rng.integers(1, H - rh + 1))
        c0 = int(rng.integers(0, W - rw + 1))
    elif side == 2:  # below
        r0 = int(rng.integers(0, H - rh))
        c0 = int(rng.integers(0, W - rw + 1))
    elif side == 1:  # right
        r0 = int(rng.integers(0, H - rh + 1))
        c0 = int(rng.integers(0, W - rw))
    else:  # left
        r0 = int(rng.integers(0, H - rh + 1))
        c0 = int(rng.integers(1, W - rw + 1))
    r1, c1 = r0 + rh - 1, c0 + rw - 1
    ring = _ring_cells(r0, r1, c0, c1)
    tb = TrackBuilder(W, H)
    tb.add_path(ring, closed=True)
    used = set(ring)

    # junction on the tail side, away from corners
    if side == 0:
        j = (r0, int(rng.integers(c0 + 1, c1)))
    elif side == 2:
        j = (r1, int(rng.integers(c0 + 1, c1)))
    elif side == 1:
        j = (int(rng.integers(r0 + 1, r1)), c1)
    else:
        j = (int(rng.integers(r0 + 1, r1)), c0)
    out_dir = side  # N, E, S, W coincide with top, right, bottom, left
    room = {0: r0, 2: H - 1 - r1, 1: W - 1 - c1, 3: c0}[side]
    tail_len = int(rng.integers(1, min(room, max(2, (W + H) // 4)) + 1))
    tail = [j]
    for _ in range(tail_len):
        tail.append(neighbour(tail[-1], out_dir))
    tb.add_path(tail)
    tb.junction(j)
    used.update(tail)
    junctions = {j}

    if min(W, H) >= 8:
        n_chords = int(rng.integers(0, min(W, H) // 4 + 1))
        for _ in range(n_chords):
            if rng.random() < 0.5 and c1 - c0 >= 2:
                c = int(rng.integers(c0 + 1, c1))
                chord = [(r, c) for r in range(r0, r1 + 1)]
            elif r1 - r0 >= 2:
                r = int(rng.integers(r0 + 1, r1))
                chord = [(r, c) for c in range(c0, c1 + 1)]
            else:
                continue
            if chord[0] in junctions or chord[-1] in junctions:
                continue
            tb.add_path(chord)
            tb.junction(chord[0])
            tb.junction(chord[-1])
            junctions.update((chord[0], chord[-1]))
            used.update(chord)
        n_spurs = int(rng.integers(0, min(W, H) // 4 + 1))
        for _ in range(n_spurs):
            start = ring[int(rng.integers(len(ring)))]
            if start in junctions:
                continue
            for d in rng.permutation(4):
                d = int(d)
                length = int(rng.integers(2, max(3, min(W, H) // 3)))
                spur = [start]
                for _ in range(length):
                    nxt = neighbour(spur[-1], d)
                    if not (0 <= nxt[0] < H and 0 <= nxt[1] < W) or nxt in used:
                        break
                    spur.append(nxt)
                if len(spur) >= 3:
                    tb.add_path(spur)
                    tb.junction(start)
                    junctions.add(start)
                    used.update(spur)
                    break

    spawn = tail[-1]
    heading = opposite(out_dir)
    choices = [c for c in ring if c not in junctions and c != j]
    if not choices:
        return None
    target = choices[int(rng.integers(len(choices)))]
    grid = tb.build(targets=[target], spawn_points=[(spawn, heading)])
    if validate_grid(grid):
        return None
    branches = decision_branches(grid, spawn, heading, target)
    finite = {d for d in branches.values() if d < np.inf}
    if len(finite) < 2:
        return None
    return grid, [(spawn, heading, target)]


def _malfunction(spec: StageSpec, rng):
    W, H = spec.width, spec.height
    rows = list(range(0, H, 2))
    if len(rows) < 2:
        return None
    tb = TrackBuilder(W, H)
    for r in rows:
        tb.add_path([(r, c) for c in range(W)])
    for ra, rb in zip(rows, rows[1:]):
        third = max(1, W // 3)
        cols = {int(rng.integers(1, third + 1)), int(rng.integers(W - 1 - third, W - 1))}
        if W >= 10 and rng.random() < 0.5:
            cols.add(int(rng.integers(third + 1, W - 1 - third)))
        for c in cols:
            tb.add_path([(r, c) for r in range(ra, rb + 1)])
            tb.junction((ra, c))
            tb.junction((rb, c))
    spawns = [((r, 0), 1) for r in rows]
    targets = [(r, W - 1) for r in rows]
    grid = tb.build(targets=targets, spawn_points=spawns)
    placements = []
    for _ in range(spec.agents):
        cell, h = spawns[int(rng.integers(len(spawns)))]
        placements.append((cell, h, targets[int(rng.integers(len(targets)))]))
    return grid, placements


def _deadlock(spec: StageSpec, rng):
    W, H = spec.width, spec.height
    switches = spec.switches if spec.switches is not None else default_switches(W)
    if switches > W - 2:
        raise InfeasibleSpecError(f"{switches} switches do not fit in width {W}")
    tb = TrackBuilder(W, H)
    for r in range(H):
        tb.add_path([(r, c) for c in range(W)])
    for r in range(H - 1):
        for c in rng.choice(np.arange(1, W - 1), size=switches, replace=False):
            c = int(c)
            tb.add_path([(r, c), (r + 1, c)])
            tb.junction((r, c))
            tb.junction((r + 1, c))
    placements = []
    for i in range(spec.agents):
        row = (i // 2) % H
        trow = int(rng.integers(H))
        if i % 2 == 0:
            placements.append(((row, 0), 1, (trow, W - 1)))
        else:
            placements.append(((row, W - 1), 3, (trow, 0)))
    spawns = sorted({(c, h) for c, h, _ in placements})
    targets = sorted({t for _, _, t in placements})
    return tb.build(targets=targets, spawn_points=spawns), placements


def _l_path(a: Cell, b: Cell, horizontal_first: bool) -> list[Cell]:
    corner = (a[0], b[1]) if horizontal_first else (b[0], a[1])
    cells = [a]
    for goal in (corner, b):
        while cells[-1] != goal:
            cur = cells[-1]
            dr = (goal[0] > cur[0]) - (goal[0] < cur[0])
            dc = (goal[1] > cur[1]) - (goal[1] < cur[1])
            cells.append((cur[0] + dr, cur[1] + dc) if dr else (cur[0], cur[1] + dc))
    return cells


def _sparse(spec: StageSpec, rng):
    W, H = spec.width, spec.height
    cap = max(2, (W // 4) * (H // 4))
    n_cities = int(np.clip(math.ceil(spec.agents / 2) + 1, 2, cap))
    cities: list[Cell] = []
    for _ in range(50 * n_cities):
        if len(cities) == n_cities:
            break
        c = (int(rng.integers(1, H - 1)), int(rng.integers(1, W - 1)))
        if all(max(abs(c[0] - o[0]), abs(c[1] - o[1])) >= 3 for o in cities):
            cities.append(c)
    if len(cities) < 2:
        return None
    n = len(cities)
    dist = lambda i, k: abs(cities[i][0] - cities[k][0]) + abs(cities[i][1] - cities[k][1])
    # Prim's spanning tree keeps the network connected; a few extra links add loops
    in_tree, edges = {0}, []
    while len(in_tree) < n:
        i, k = min(((i, k) for i in in_tree for k in range(n) if k not in in_tree), key=lambda e: dist(*e))
        edges.append((i, k))
        in_tree.add(k)
    others = [(i, k) for i in range(n) for k in range(i + 1, n) if (i, k) not in edges and (k, i) not in edges]
    rng.shuffle(others)
    edges += others[: max(0, n // 2 - 1) + int(rng.integers(0, 2))]
    tb = TrackBuilder(W, H)
    for i, k in edges:
        tb.add_path(_l_path(cities[i], cities[k], bool(rng.random() < 0.5)))
    for c in cities:
        tb.junction(c)
    grid = tb.build(targets=list(cities), spawn_points=[])
    placements = []
    for _ in range(spec.agents):
        s, t = rng.choice(n, size=2, replace=False)
        spawn, target = cities[int(s)], cities[int(t)]
        h = _best_heading(grid, spawn, target)
        if h is None:
            return None
        placements.append((spawn, h, target))
    grid.spawn_points = sorted({(c, h) for c, h, _ in placements})
    return grid, placements

