"""Procedurally generated door-key gridworld with a hierarchical achievement graph.

Rooms are laid out on a small grid and joined by coloured doors. Keys are
picked up by walking onto them; ``interact`` opens an adjacent closed door
when the agent holds its key (or when the door has no lock). Walking onto
the green goal cell unlocks ``reach goal`` and ends the episode.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .base import AchievementEnv, AchievementGraph

EMPTY, WALL, DOOR_CLOSED, DOOR_OPEN, KEY, GOAL = range(6)
N_KINDS = 6
COLORS = ("yellow", "purple", "cyan", "green", "red", "blue")
N_CHANNELS = N_KINDS + len(COLORS)
VIEW = 7
RADIUS = VIEW // 2

UP, DOWN, LEFT, RIGHT, INTERACT = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "interact")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class _Door:
    a: int  # room closer to the start
    b: int
    color: str
    locked: bool


@dataclass(frozen=True)
class _Variant:
    grid: tuple[int, int]  # rooms per (row, col)
    positions: tuple[tuple[int, int], ...]  # room index -> (row, col)
    doors: tuple[_Door, ...]
    keys: tuple[tuple[str, int], ...]  # (colour, room)
    goal_room: int
    order: tuple[str, ...]  # vertex order, a topological order


# Six rooms, ten achievements: the deep door-key graph.
_SIX = _Variant(
    grid=(2, 3),
    positions=((1, 0), (0, 0), (0, 1), (0, 2), (1, 1), (1, 2)),
    doors=(
        _Door(0, 1, "yellow", False),
        _Door(1, 2, "purple", True),
        _Door(2, 3, "cyan", True),
        _Door(2, 4, "green", True),
        _Door(4, 5, "red", True),
    ),
    keys=(("purple", 1), ("cyan", 2), ("green", 2), ("red", 4)),
    goal_room=5,
    order=(
        "open yellow door",
        "get purple key",
        "open purple door",
        "get cyan key",
        "open cyan door",
        "get green key",
        "open green door",
        "get red key",
        "open red door",
        "reach goal",
    ),
)

# Three rooms, six achievements: the fast CI variant.
_THREE = _Variant(
    grid=(1, 3),
    positions=((0, 0), (0, 1), (0, 2)),
    doors=(_Door(0, 1, "yellow", True), _Door(1, 2, "purple", True)),
    keys=(("yellow", 0), ("purple", 1), ("cyan", 1)),
    goal_room=2,
    order=(
        "get yellow key",
        "open yellow door",
        "get purple key",
        "get cyan key",
        "open purple door",
        "reach goal",
    ),
)

VARIANTS = {3: _THREE, 6: _SIX}


def _build_graph(v: _Variant) -> AchievementGraph:
    entry = {0: None}
    for d in v.doors:
        entry[d.b] = f"open {d.color} door"
    edges = []
    for color, room in v.keys:
        if entry[room] is not None:
            edges.append((entry[room], f"get {color} key"))
    for d in v.doors:
        if d.locked:
            edges.append((f"get {d.color} key", f"open {d.color} door"))
        elif entry[d.a] is not None:
            edges.append((entry[d.a], f"open {d.color} door"))
    edges.append((entry[v.goal_room], "reach goal"))
    return AchievementGraph(v.order, tuple(edges))


class KeychainEnv(AchievementEnv):
    """Door-key gridworld; ``rooms`` selects the 3-room or 6-room layout."""

    env_id = "keychain"
    n_actions = 5
    observation_shape = (VIEW, VIEW, N_CHANNELS)

    def __init__(self, rooms: int = 6, room_size: int = 3, step_limit: int = 400, palette_randomization: bool = False):
        super().__init__()
        if rooms not in VARIANTS:
            raise ValueError(f"rooms must be one of {sorted(VARIANTS)}, got {rooms}")
        if room_size < 2:
            raise ValueError("room_size must be >= 2")
        self.rooms = rooms
        self.room_size = room_size
        self.step_limit = int(step_limit)
        self.palette_randomization = bool(palette_randomization)
        self.variant = VARIANTS[rooms]
        self.graph = _build_graph(self.variant)
        self._ach = {name: i for i, name in enumerate(self.graph.vertices)}
        self._locked = {d.color: d.locked for d in self.variant.doors}

    def params(self) -> dict:
        return {
            "rooms": self.rooms,
            "room_size": self.room_size,
            "step_limit": self.step_limit,
            "palette_randomization": self.palette_randomization,
        }

    # -- generation ---------------------------------------------------------
    def _reset(self, rng: np.random.Generator) -> None:
        v = self.variant
        s = self.room_size
        rows, cols = v.grid
        flip_r = bool(rng.integers(2))
        flip_c = bool(rng.integers(2))
        transpose = bool(rng.integers(2)) if rows == 1 else False
        palette = rng.permutation(len(COLORS))

        pos = []
        for r, c in v.positions:
            r = rows - 1 - r if flip_r else r
            c = cols - 1 - c if flip_c else c
            pos.append((c, r) if transpose else (r, c))
        grows, gcols = (cols, rows) if transpose else (rows, cols)
        h, w = grows * (s + 1) + 1, gcols * (s + 1) + 1

        kind = np.zeros((h, w), dtype=np.int8)
        color = np.full((h, w), -1, dtype=np.int8)
        kind[:: s + 1, :] = WALL
        kind[:, :: s + 1] = WALL

        def interior(room):
            r, c = pos[room]
            ys = range(r * (s + 1) + 1, r * (s + 1) + 1 + s)
            xs = range(c * (s + 1) + 1, c * (s + 1) + 1 + s)
            return [(y, x) for y in ys for x in xs]

        for d in v.doors:
            (ra, ca), (rb, cb) = pos[d.a], pos[d.b]
            off = int(rng.integers(s)) + 1
            if ra == rb:
                y, x = ra * (s + 1) + off, max(ca, cb) * (s + 1)
            else:
                y, x = max(ra, rb) * (s + 1), ca * (s + 1) + off
            kind[y, x] = DOOR_CLOSED
            color[y, x] = COLORS.index(d.color)

        taken: set[tuple[int, int]] = set()

        def place(room):
            cells = [c for c in interior(room) if c not in taken]
            cell = cells[int(rng.integers(len(cells)))]
            taken.add(cell)
            return cell

        for col_name, room in v.keys:
            y, x = place(room)
            kind[y, x] = KEY
            color[y, x] = COLORS.index(col_name)
        gy, gx = place(v.goal_room)
        kind[gy, gx] = GOAL
        color[gy, gx] = COLORS.index("green")
        self.pos = place(0)

        self.kind = kind
        self.color = color
        self.held: set[str] = set()
        self.palette = palette if self.palette_randomization else np.arange(len(COLORS))
        self._render_all()

    def _render_all(self) -> None:
        h, w = self.kind.shape
        grid = np.zeros((h + 2 * RADIUS, w + 2 * RADIUS, N_CHANNELS), dtype=np.uint8)
        grid[:, :, WALL] = 1
        self._onehot = grid
        for y in range(h):
            for x in range(w):
                self._render(y, x)

    def _render(self, y: int, x: int) -> None:
        cell = self._onehot[y + RADIUS, x + RADIUS]
        cell[:] = 0
        cell[self.kind[y, x]] = 1
        c = self.color[y, x]
        if c >= 0:
            cell[N_KINDS + self.palette[c]] = 1

    def observe(self) -> np.ndarray:
        y, x = self.pos
        return self._onehot[y : y + VIEW, x : x + VIEW].copy()

    # -- dynamics -------------------------------------------------------------
    def _transition(self, action: int):
        y, x = self.pos
        if action == INTERACT:
            for dy, dx in _NEIGHBOURS:
                ny, nx = y + dy, x + dx
                if self.kind[ny, nx] != DOOR_CLOSED:
                    continue
                c = COLORS[self.color[ny, nx]]
                if self._locked[c] and c not in self.held:
                    continue
                self.kind[ny, nx] = DOOR_OPEN
                self._render(ny, nx)
                return self._ach[f"open {c} door"], False
            return None, False

        dy, dx = _MOVES[action]
        ny, nx = y + dy, x + dx
        k = self.kind[ny, nx]
        if k == WALL or k == DOOR_CLOSED:
            return None, False
        self.pos = (ny, nx)
        if k == KEY:
            c = COLORS[self.color[ny, nx]]
            self.held.add(c)
            self.kind[ny, nx] = EMPTY
            self.color[ny, nx] = -1
            self._render(ny, nx)
            return self._ach[f"get {c} key"], False
        if k == GOAL:
            return self._ach["reach goal"], True
        return None, False

    def layout_signature(self) -> bytes:
        return self.kind.tobytes() + self.color.tobytes() + bytes(self.pos) + bytes(self.kind.shape)

    def render_ascii(self) -> str:
        glyph = {EMPTY: ".", WALL: "#", DOOR_CLOSED: "D", DOOR_OPEN: "/", KEY: "k", GOAL: "G"}
        rows = []
        for y in range(self.kind.shape[0]):
            row = []
            for x in range(self.kind.shape[1]):
                row.append("@" if (y, x) == self.pos else glyph[int(self.kind[y, x])])
            rows.append("".join(row))
        return "\n".join(rows)

    # -- planning ---------------------------------------------------------------
    def _snapshot(self):
        keys = tuple(sorted((int(y), int(x)) for y, x in zip(*np.nonzero(self.kind == KEY))))
        doors = tuple(sorted((int(y), int(x)) for y, x in zip(*np.nonzero(self.kind == DOOR_OPEN))))
        return self.pos, keys, doors

    def solve(self) -> list[int] | None:
        """Breadth-first search over the full state for an action sequence
        that unlocks every not-yet-unlocked achievement, goal last."""
        init = self._snapshot()
        all_keys = {(int(y), int(x)): COLORS[self.color[y, x]] for y, x in zip(*np.nonzero(self.kind == KEY))}
        doors = {
            (int(y), int(x)): COLORS[self.color[y, x]]
            for y, x in zip(*np.nonzero((self.kind == DOOR_CLOSED) | (self.kind == DOOR_OPEN)))
        }
        goal = tuple(int(a) for a in np.argwhere(self.kind == GOAL)[0])
        held0 = frozenset(self.held)
        done_needed = len(self.graph) - 1

        def unlocked_count(keys_left, open_doors):
            got = len(self.held) + (len(all_keys) - len(keys_left))
            return got + len(open_doors)

        start = (init[0], init[1], init[2])
        parent = {start: None}
        queue = deque([start])
        while queue:
            state = queue.popleft()
            pos, keys_left, open_doors = state
            held = held0 | {all_keys[k] for k in all_keys if k not in keys_left}
            for a in range(self.n_actions):
                y, x = pos
                nk, nd, npos = keys_left, open_doors, pos
                reached_goal = False
                if a == INTERACT:
                    for dy, dx in _NEIGHBOURS:
                        cell = (y + dy, x + dx)
                        if cell in doors and cell not in open_doors:
                            c = doors[cell]
                            if self._locked[c] and c not in held:
                                continue
                            nd = tuple(sorted(open_doors + (cell,)))
                            break
                else:
                    dy, dx = _MOVES[a]
                    cell = (y + dy, x + dx)
                    k = self.kind[cell]
                    if k == WALL or (cell in doors and cell not in open_doors):
                        continue
                    npos = cell
                    if cell in keys_left:
                        nk = tuple(c for c in keys_left if c != cell)
                    if cell == goal:
                        reached_goal = True
                nxt = (npos, nk, nd)
                if reached_goal:
                    if unlocked_count(nk, nd) >= done_needed:
                        plan = [a]
                        cur = state
                        while parent[cur] is not None:
                            cur, act = parent[cur]
                            plan.append(act)
                        return plan[::-1]
                    continue
                if nxt not in parent:
                    parent[nxt] = (state, a)
                    queue.append(nxt)
        return None


class KeychainExpert:
    """Greedy replanning expert: pursue the first unlockable achievement in
    graph order via shortest paths; ``epsilon`` mixes in random actions."""

    def __init__(self, epsilon: float = 0.0, seed: int = 0):
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)

    def act(self, env: KeychainEnv) -> int:
        if self.epsilon and self.rng.random() < self.epsilon:
            return int(self.rng.integers(env.n_actions))
        g = env.graph
        for name in g.vertices:
            i = g.index(name)
            if env.unlocked[i]:
                continue
            if not all(env.unlocked[g.index(p)] for p in g.parents(name)):
                continue
            if name == "reach goal" and env.unlocked.sum() < len(g) - 1:
                continue
            action = self._toward(env, name)
            if action is not None:
                return action
        return int(self.rng.integers(env.n_actions))

    def _toward(self, env: KeychainEnv, name: str) -> int | None:
        kind, color = env.kind, env.color
        verb, col, *_ = name.split(" ")
        targets: set[tuple[int, int]] = set()
        interact_at: set[tuple[int, int]] = set()
        if name == "reach goal":
            targets = {tuple(int(a) for a in np.argwhere(kind == GOAL)[0])}
        elif verb == "get":
            cells = np.argwhere((kind == KEY) & (color == COLORS.index(col)))
            targets = {tuple(int(a) for a in c) for c in cells}
        else:
            cells = np.argwhere((kind == DOOR_CLOSED) & (color == COLORS.index(col)))
            for dy0, dx0 in cells:
                for dy, dx in _NEIGHBOURS:
                    cell = (int(dy0 + dy), int(dx0 + dx))
                    if kind[cell] not in (WALL, DOOR_CLOSED):
                        interact_at.add(cell)
        if env.pos in interact_at:
            return INTERACT
        goals = targets | interact_at
        if not goals:
            return None
        first = {env.pos: None}
        queue = deque([env.pos])
        while queue:
            cur = queue.popleft()
            if cur in goals:
                while first[cur] is not None and first[cur][0] != env.pos:
                    cur = first[cur][0]
                return first[cur][1]
            for a, (dy, dx) in _MOVES.items():
                nxt = (cur[0] + dy, cur[1] + dx)
                k = kind[nxt]
                if k in (WALL, DOOR_CLOSED) or nxt in first:
                    continue
                if k == GOAL and nxt not in targets:
                    continue
                first[nxt] = (cur, a)
                queue.append(nxt)
        return None
