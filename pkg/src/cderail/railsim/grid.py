"""Rail topology: transition masks, track construction, validation and routing.

Cells are ``(row, col)`` tuples; row 0 is the northern edge. Headings are
``N=0, E=1, S=2, W=3``. A heading is the direction of travel with which a
train entered its current cell.

Each cell holds a 16-bit transition mask. Bit ``4 * entry + exit`` is set
when a train that entered the cell travelling ``entry`` may leave it
travelling ``exit``. The neighbour reached by leaving toward ``exit`` is the
cell one step in that direction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

N, E, S, W = 0, 1, 2, 3
HEADINGS = (N, E, S, W)
HEADING_NAMES = "NESW"
DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))

Cell = tuple[int, int]

GRID_FORMAT = "cderail-grid"
GRID_FORMAT_VERSION = 1


def opposite(heading: int) -> int:
    return (heading + 2) % 4


def neighbour(cell: Cell, heading: int) -> Cell:
    dr, dc = DELTAS[heading]
    return (cell[0] + dr, cell[1] + dc)


def direction_between(a: Cell, b: Cell) -> int:
    delta = (b[0] - a[0], b[1] - a[1])
    try:
        return DELTAS.index(delta)
    except ValueError:
        raise ValueError(f"cells {a} and {b} are not 4-adjacent") from None


def bit(entry: int, exit_: int) -> int:
    return 1 << (4 * entry + exit_)


@dataclass(eq=False)
class RailGrid:
    """Static rail topology shared by every episode generated from it."""

    width: int
    height: int
    masks: np.ndarray
    targets: list[Cell] = field(default_factory=list)
    spawn_points: list[tuple[Cell, int]] = field(default_factory=list)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.uint16)
        if self.masks.shape != (self.height, self.width):
            raise ValueError(f"mask array shape {self.masks.shape} != {(self.height, self.width)}")
        self.targets = [tuple(t) for t in self.targets]
        self.spawn_points = [(tuple(c), int(h)) for c, h in self.spawn_points]
        self._exits = None
        self._preds = None
        self._tables: dict[Cell, np.ndarray] = {}
        self._hops: dict[Cell, dict] = {}

    def __eq__(self, other):
        if not isinstance(other, RailGrid):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.masks, other.masks)
            and self.targets == other.targets
            and self.spawn_points == other.spawn_points
        )

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def _build_tables(self):
        exits = {}
        preds: dict[tuple[int, int, int], list[tuple[int, int, int]]] = {}
        for r in range(self.height):
            for c in range(self.width):
                m = int(self.masks[r, c])
                if not m:
                    continue
                for h in HEADINGS:
                    outs = tuple(o for o in HEADINGS if m & bit(h, o))
                    if outs:
                        exits[(r, c, h)] = outs
                        for o in outs:
                            nr, nc = neighbour((r, c), o)
                            preds.setdefault((nr, nc, o), []).append((r, c, h))
        self._exits = exits
        self._preds = preds

    def exits(self, cell: Cell, heading: int) -> tuple[int, ...]:
        """Exit headings allowed for a train in ``cell`` travelling ``heading``."""
        if self._exits is None:
            self._build_tables()
        return self._exits.get((cell[0], cell[1], heading), ())

    def distance_table(self, target: Cell) -> np.ndarray:
        """Cell-moves from every ``(row, col, heading)`` node to ``target``.

        Computed once per target by reverse breadth-first search; unreachable
        nodes hold ``inf``.
        """
        target = tuple(target)
        table = self._tables.get(target)
        if table is not None:
            return table
        if self._preds is None:
            self._build_tables()
        table = np.full((self.height, self.width, 4), np.inf)
        queue = deque()
        for h in HEADINGS:
            table[target[0], target[1], h] = 0.0
            queue.append((target[0], target[1], h))
        preds = self._preds
        while queue:
            node = queue.popleft()
            d = table[node] + 1.0
            for p in preds.get(node, ()):
                if table[p] == np.inf:
                    table[p] = d
                    queue.append(p)
        table.setflags(write=False)
        self._tables[target] = table
        return table

    def next_hops(self, target: Cell) -> dict[tuple[int, int, int], tuple[int, int, int]]:
        """Successor node on a shortest route to ``target`` (first exit wins ties)."""
        target = tuple(target)
        hops = self._hops.get(target)
        if hops is not None:
            return hops
        table = self.distance_table(target)
        hops = {}
        for (r, c, h), outs in self._exits.items():
            best = None
            for o in outs:
                nr, nc = neighbour((r, c), o)
                if best is None or table[nr, nc, o] < table[best]:
                    best = (nr, nc, o)
            hops[(r, c, h)] = best
        self._hops[target] = hops
        return hops


class TrackBuilder:
    """Accumulates bidirectional track and compiles it to transition masks.

    Track is stored as undirected edges between 4-adjacent cells plus, per
    cell, the pairs of incident directions a train may pass between.
    """

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.links: dict[Cell, set[int]] = {}
        self.transits: dict[Cell, set[frozenset]] = {}

    def _edge(self, a: Cell, b: Cell):
        d = direction_between(a, b)
        self.links.setdefault(a, set()).add(d)
        self.links.setdefault(b, set()).add(opposite(d))

    def add_path(self, cells, closed: bool = False):
        cells = [tuple(c) for c in cells]
        for c in cells:
            if not (0 <= c[0] < self.height and 0 <= c[1] < self.width):
                raise ValueError(f"track cell {c} out of bounds")
        if closed:
            cells = cells + cells[:2]
        for a, b in zip(cells, cells[1:]):
            self._edge(a, b)
        for prev, cur, nxt in zip(cells, cells[1:], cells[2:]):
            pair = frozenset((direction_between(cur, prev), direction_between(cur, nxt)))
            self.transits.setdefault(cur, set()).add(pair)

    def junction(self, cell: Cell):
        """Let trains pass between every pair of directions incident to ``cell``."""
        cell = tuple(cell)
        for a, b in combinations(sorted(self.links.get(cell, ())), 2):
            self.transits.setdefault(cell, set()).add(frozenset((a, b)))

    def build(self, targets=(), spawn_points=()) -> RailGrid:
        masks = np.zeros((self.height, self.width), dtype=np.uint16)
        for cell, dirs in self.links.items():
            pairs = set(self.transits.get(cell, ()))
            covered = set().union(*pairs) if pairs else set()
            if len(dirs) >= 2:
                for d in dirs - covered:
                    pairs.update(frozenset((d, o)) for o in dirs if o != d)
            m = 0
            for pair in pairs:
                a, b = tuple(pair)
                # arriving from neighbour a means travelling opposite(a)
                m |= bit(opposite(a), b) | bit(opposite(b), a)
            if len(dirs) == 1:
                (d,) = dirs
                # dead end: reverse out, and let a train placed here face the track
                m |= bit(opposite(d), d) | bit(d, d)
            masks[cell] = m
        return RailGrid(self.width, self.height, masks, list(targets), list(spawn_points))


def validate_grid(grid: RailGrid) -> list[str]:
    """Return one message per broken invariant; empty when the grid is sound."""
    problems = []
    if grid.width < 1 or grid.height < 1:
        problems.append(f"non-positive size {grid.width}x{grid.height}")
        return problems
    for r in range(grid.height):
        for c in range(grid.width):
            m = int(grid.masks[r, c])
            for out in HEADINGS:
                if not any(m & bit(h, out) for h in HEADINGS):
                    continue
                nb = neighbour((r, c), out)
                if not grid.in_bounds(nb):
                    problems.append(f"cell {(r, c)} exits {HEADING_NAMES[out]} off the grid")
                    continue
                nm = int(grid.masks[nb])
                if not any(nm & bit(out, o) for o in HEADINGS):
                    problems.append(
                        f"cell {(r, c)} exits {HEADING_NAMES[out]} but {nb} "
                        f"has no transition for entry heading {HEADING_NAMES[out]}"
                    )
    for t in grid.targets:
        if not grid.in_bounds(t):
            problems.append(f"target {t} out of bounds")
    for cell, h in grid.spawn_points:
        if not grid.in_bounds(cell):
            problems.append(f"spawn {cell} out of bounds")
        elif not grid.exits(cell, h):
            problems.append(f"spawn {cell} heading {HEADING_NAMES[h]} has no exit")
    return problems


def shortest_path_distance(grid: RailGrid, cell: Cell, heading: int, target: Cell) -> float:
    """Fewest cell-moves from ``(cell, heading)`` to any heading at ``target``."""
    cell, target = tuple(cell), tuple(target)
    if cell == target:
        return 0
    start = (cell, heading)
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        (cur, h), d = queue.popleft()
        for out in grid.exits(cur, h):
            nxt = neighbour(cur, out)
            if nxt == target:
                return d + 1
            node = (nxt, out)
            if node not in seen:
                seen.add(node)
                queue.append((node, d + 1))
    return float("inf")


def dump_grid(grid: RailGrid) -> str:
    """Serialise ``grid`` to the stable text format (described in the README)."""
    lines = [f"{GRID_FORMAT} {GRID_FORMAT_VERSION}", f"size {grid.width} {grid.height}"]
    for r in range(grid.height):
        lines.append(" ".join(f"{int(m):04x}" for m in grid.masks[r]))
    lines.append(f"spawns {len(grid.spawn_points)}")
    lines += [f"{c[0]} {c[1]} {HEADING_NAMES[h]}" for c, h in grid.spawn_points]
    lines.append(f"targets {len(grid.targets)}")
    lines += [f"{t[0]} {t[1]}" for t in grid.targets]
    return "\n".join(lines) + "\n"


def load_grid(text: str) -> RailGrid:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    head = lines[0].split()
    if head[0] != GRID_FORMAT or int(head[1]) != GRID_FORMAT_VERSION:
        raise ValueError(f"unsupported grid header {lines[0]!r}")
    _, w, h = lines[1].split()
    width, height = int(w), int(h)
    masks = np.array([[int(v, 16) for v in lines[2 + r].split()] for r in range(height)], dtype=np.uint16)
    pos = 2 + height
    n_spawn = int(lines[pos].split()[1])
    spawns = []
    for ln in lines[pos + 1 : pos + 1 + n_spawn]:
        r, c, hd = ln.split()
        spawns.append(((int(r), int(c)), HEADING_NAMES.index(hd)))
    pos += 1 + n_spawn
    n_target = int(lines[pos].split()[1])
    targets = [tuple(int(v) for v in ln.split()) for ln in lines[pos + 1 : pos + 1 + n_target]]
    return RailGrid(width, height, masks, targets, spawns)
