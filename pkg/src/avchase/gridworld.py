"""Grid navigation graph, moving sound source, observation synthesis and
step/reward dynamics for the pursuit task.

Cells are addressed by node id ``row * width + col``. Headings index
``(N, E, S, W)``; turning left decrements the index.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np

HEADINGS = ("N", "E", "S", "W")
# (drow, dcol) for N, E, S, W; also the BFS neighbour order
OFFSETS = ((-1, 0), (0, 1), (1, 0), (0, -1))

NUM_SIGNATURES = 102


class Action(enum.IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


class EpisodeDone(RuntimeError):
    """Raised when stepping an episode that has already terminated."""


@dataclass(frozen=True, eq=False)
class NavGraph:
    traversable: np.ndarray  # bool, height x width
    resolution_m: float = 0.5

    @property
    def height(self) -> int:
        return self.traversable.shape[0]

    @property
    def width(self) -> int:
        return self.traversable.shape[1]

    @property
    def n_cells(self) -> int:
        return self.traversable.size

    def rc(self, node: int) -> Tuple[int, int]:
        return divmod(int(node), self.width)

    def node(self, r: int, c: int) -> int:
        return r * self.width + c

    def is_free(self, node: int) -> bool:
        return 0 <= node < self.n_cells and bool(self.traversable.flat[node])

    def free_rc(self, r: int, c: int) -> bool:
        return 0 <= r < self.height and 0 <= c < self.width and bool(self.traversable[r, c])

    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.traversable.ravel())

    def neighbors(self, node: int) -> List[int]:
        r, c = self.rc(node)
        return [self.node(r + dr, c + dc) for dr, dc in OFFSETS if self.free_rc(r + dr, c + dc)]

    @cached_property
    def distances(self) -> np.ndarray:
        """All-pairs hop counts (-1 where unreachable) from one BFS per node."""
        n = self.n_cells
        out = np.full((n, n), -1, dtype=np.int64)
        for s in self.free_nodes:
            dist = out[s]
            dist[s] = 0
            q = deque([int(s)])
            while q:
                u = q.popleft()
                for v in self.neighbors(u):
                    if dist[v] < 0:
                        dist[v] = dist[u] + 1
                        q.append(v)
        return out

    def distance(self, a: int, b: int) -> int:
        return int(self.distances[a, b])

    def manhattan(self, a: int, b: int) -> int:
        ra, ca = self.rc(a)
        rb, cb = self.rc(b)
        return abs(ra - rb) + abs(ca - cb)

    @cached_property
    def _depth_cache(self) -> Dict[tuple, np.ndarray]:
        return {}

    def to_ascii(self, robot: Optional[int] = None, source: Optional[int] = None) -> str:
        rows = []
        for r in range(self.height):
            row = []
            for c in range(self.width):
                n = self.node(r, c)
                if n == robot:
                    row.append("R")
                elif n == source:
                    row.append("S")
                else:
                    row.append("." if self.traversable[r, c] else "#")
            rows.append("".join(row))
        return "\n".join(rows)

    @classmethod
    def from_ascii(cls, text: str, resolution_m: float = 0.5) -> "NavGraph":
        lines = [ln for ln in text.strip().splitlines()]
        grid = np.array([[ch != "#" for ch in ln] for ln in lines], dtype=bool)
        return cls(grid, resolution_m)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height,
                "resolution_m": self.resolution_m, "map": self.to_ascii().splitlines()}


def _connected(free: np.ndarray) -> bool:
    cells = np.argwhere(free)
    if len(cells) == 0:
        return False
    h, w = free.shape
    seen = np.zeros_like(free)
    start = tuple(cells[0])
    seen[start] = True
    q = deque([start])
    count = 1
    while q:
        r, c = q.popleft()
        for dr, dc in OFFSETS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and free[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                count += 1
                q.append((rr, cc))
    return count == len(cells)


def generate_grid(seed: int, width: int, height: int, obstacle_density: float,
                  resolution_m: float = 0.5) -> NavGraph:
    """Place ``floor(density * cells)`` obstacles one at a time, skipping any
    placement that would split the free space, so the result is always a
    single connected component."""
    if width < 3 or height < 3:
        raise ValueError("grid must be at least 3x3")
    if not 0.0 <= obstacle_density <= 0.4:
        raise ValueError(f"obstacle_density {obstacle_density} outside [0, 0.4]")
    rng = np.random.default_rng(seed)
    free = np.ones((height, width), dtype=bool)
    target = int(math.floor(obstacle_density * width * height + 1e-9))
    placed = 0
    for flat in rng.permutation(width * height):
        if placed >= target:
            break
        r, c = divmod(int(flat), width)
        free[r, c] = False
        if _connected(free):
            placed += 1
        else:
            free[r, c] = True
    return NavGraph(free, resolution_m)


def bfs_shortest_path(graph: NavGraph, a: int, b: int) -> Optional[List[int]]:
    """Minimum-hop path from ``a`` to ``b`` inclusive, ties broken N, E, S, W."""
    if not graph.is_free(a) or not graph.is_free(b):
        raise ValueError(f"endpoint not traversable: {a} -> {b}")
    parent = {a: None}
    q = deque([a])
    while q:
        u = q.popleft()
        if u == b:
            break
        for v in graph.neighbors(u):
            if v not in parent:
                parent[v] = u
                q.append(v)
    if b not in parent:
        return None
    path = [b]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def min_action_count(graph: NavGraph, cell: int, heading: int, goal: int) -> int:
    """Fewest MoveForward/Turn actions to bring a robot at (cell, heading) onto ``goal``."""
    if cell == goal:
        return 0
    start = (cell, heading)
    dist = {start: 0}
    q = deque([start])
    while q:
        u, hd = q.popleft()
        d = dist[(u, hd)]
        r, c = graph.rc(u)
        dr, dc = OFFSETS[hd]
        nxt = []
        if graph.free_rc(r + dr, c + dc):
            nxt.append((graph.node(r + dr, c + dc), hd))
        nxt.append((u, (hd - 1) % 4))
        nxt.append((u, (hd + 1) % 4))
        for s in nxt:
            if s not in dist:
                if s[0] == goal:
                    return d + 1
                dist[s] = d + 1
                q.append(s)
    raise ValueError("goal unreachable")


# ---------------------------------------------------------------- sound signatures

def make_signatures(master_seed: int = 0, bins: int = 16) -> np.ndarray:
    """102 unit-norm non-negative spectra, one row per signature id."""
    rng = np.random.default_rng(master_seed)
    spec = np.abs(rng.standard_normal((NUM_SIGNATURES, bins)))
    return spec / np.linalg.norm(spec, axis=1, keepdims=True)


def default_splits() -> Dict[str, List[int]]:
    """Non-overlapping 73/11/18 partition of signature ids."""
    ids = list(range(NUM_SIGNATURES))
    return {"train": ids[:73], "val": ids[73:84], "test": ids[84:]}


# ---------------------------------------------------------------- episode state

@dataclass(frozen=True)
class Pose:
    cell: int
    heading: int


@dataclass
class SourceState:
    cell: int
    destination: int
    planned_path: List[int]
    signature: int


@dataclass
class Observation:
    depth: np.ndarray  # H x W in [0, 1]
    audio: np.ndarray  # 2 x F, non-negative
    rgb: Optional[np.ndarray] = None


@dataclass
class EpisodeSummary:
    success: bool
    path_length: int  # p_i
    action_count: int  # p^a_i
    shortest_path_length: int  # l_i
    shortest_action_count: int  # l^a_i
    final_distance: int  # d^a_i
    start_distance: int  # d_i
    total_reward: float

    def to_dict(self) -> dict:
        return {
            "success": bool(self.success),
            "path_length": int(self.path_length),
            "action_count": int(self.action_count),
            "shortest_path_length": int(self.shortest_path_length),
            "shortest_action_count": int(self.shortest_action_count),
            "final_distance": int(self.final_distance),
            "start_distance": int(self.start_distance),
            "total_reward": float(self.total_reward),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSummary":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class EnvParams:
    max_steps: int = 500
    depth_res: Tuple[int, int] = (16, 16)
    max_range: int = 8
    noise_std: float = 0.02
    move_prob: float = 0.3
    success_reward: float = 10.0
    slack_reward: float = -0.01
    distance_reward: float = 0.25
    distance_reward_scale: float = 1.0


@dataclass(eq=False)
class EpisodeState:
    graph: NavGraph
    robot: Pose
    source: SourceState
    spectrum: np.ndarray
    rng_env: np.random.Generator
    rng_source: np.random.Generator
    start_robot: Pose
    start_source_cell: int
    prev_manhattan: int
    params: EnvParams = field(default_factory=EnvParams)
    step_count: int = 0
    done: bool = False
    success: bool = False
    path_length: int = 0
    total_reward: float = 0.0

    def summary(self) -> EpisodeSummary:
        g = self.graph
        final = self.source.cell
        return EpisodeSummary(
            success=self.success,
            path_length=self.path_length,
            action_count=self.step_count,
            shortest_path_length=g.distance(self.start_robot.cell, final),
            shortest_action_count=min_action_count(
                g, self.start_robot.cell, self.start_robot.heading, final),
            final_distance=g.distance(self.robot.cell, final),
            start_distance=g.distance(self.start_robot.cell, final),
            total_reward=self.total_reward,
        )

    def to_dict(self) -> dict:
        """JSON-safe snapshot (graph and spectrum excluded; they are rebuilt from config)."""
        return {
            "robot": [self.robot.cell, self.robot.heading],
            "source": {"cell": self.source.cell, "destination": self.source.destination,
                       "planned_path": list(self.source.planned_path),
                       "signature": self.source.signature},
            "rng_env": self.rng_env.bit_generator.state,
            "rng_source": self.rng_source.bit_generator.state,
            "start_robot": [self.start_robot.cell, self.start_robot.heading],
            "start_source_cell": self.start_source_cell,
            "prev_manhattan": self.prev_manhattan,
            "step_count": self.step_count,
            "done": self.done,
            "success": self.success,
            "path_length": self.path_length,
            "total_reward": self.total_reward,
        }

    @classmethod
    def from_dict(cls, d: dict, graph: NavGraph, spectrum: np.ndarray,
                  params: EnvParams) -> "EpisodeState":
        rng_env = np.random.default_rng()
        rng_env.bit_generator.state = d["rng_env"]
        rng_source = np.random.default_rng()
        rng_source.bit_generator.state = d["rng_source"]
        s = d["source"]
        return cls(
            graph=graph, robot=Pose(*d["robot"]),
            source=SourceState(s["cell"], s["destination"], list(s["planned_path"]), s["signature"]),
            spectrum=spectrum, rng_env=rng_env, rng_source=rng_source,
            start_robot=Pose(*d["start_robot"]), start_source_cell=d["start_source_cell"],
            prev_manhattan=d["prev_manhattan"], params=params, step_count=d["step_count"],
            done=d["done"], success=d["success"], path_length=d["path_length"],
            total_reward=d["total_reward"])


def _pick_destination(graph: NavGraph, cell: int, rng: np.random.Generator) -> int:
    choices = [int(n) for n in graph.free_nodes if n != cell and graph.distances[cell, n] > 0]
    return choices[int(rng.integers(len(choices)))]


def reset(graph: NavGraph, episode_seed: int, signature: int, spectrum: np.ndarray,
          params: Optional[EnvParams] = None) -> Tuple[EpisodeState, Observation]:
    params = params or EnvParams()
    free = graph.free_nodes
    if len(free) < 2:
        raise ValueError("graph needs at least two traversable cells")
    ss = np.random.SeedSequence(int(episode_seed))
    rng_env, rng_source = (np.random.default_rng(s) for s in ss.spawn(2))
    i, j = rng_env.choice(len(free), size=2, replace=False)
    robot = Pose(int(free[i]), int(rng_env.integers(4)))
    src_cell = int(free[j])
    dest = _pick_destination(graph, src_cell, rng_source)
    source = SourceState(src_cell, dest, bfs_shortest_path(graph, src_cell, dest), int(signature))
    state = EpisodeState(
        graph=graph, robot=robot, source=source, spectrum=np.asarray(spectrum, dtype=np.float64),
        rng_env=rng_env, rng_source=rng_source, start_robot=robot, start_source_cell=src_cell,
        prev_manhattan=graph.manhattan(robot.cell, src_cell), params=params)
    return state, observe(state)


def source_tick(state: EpisodeState, draw: Optional[float] = None) -> EpisodeState:
    """Advance the source one node with probability ``move_prob``.

    ``draw`` overrides the uniform sample from ``rng_source``.
    """
    u = state.rng_source.random() if draw is None else draw
    if u >= state.params.move_prob:
        return state
    src = state.source
    if src.cell == src.destination:
        src.destination = _pick_destination(state.graph, src.cell, state.rng_source)
        src.planned_path = bfs_shortest_path(state.graph, src.cell, src.destination)
    src.planned_path = src.planned_path[1:]
    src.cell = src.planned_path[0]
    if src.cell == src.destination:
        src.destination = _pick_destination(state.graph, src.cell, state.rng_source)
        src.planned_path = bfs_shortest_path(state.graph, src.cell, src.destination)
    return state


def _apply_action(state: EpisodeState, action: Action) -> None:
    r = state.robot
    if action == Action.MOVE_FORWARD:
        row, col = state.graph.rc(r.cell)
        dr, dc = OFFSETS[r.heading]
        if state.graph.free_rc(row + dr, col + dc):
            state.robot = Pose(state.graph.node(row + dr, col + dc), r.heading)
            state.path_length += 1
    elif action == Action.TURN_LEFT:
        state.robot = Pose(r.cell, (r.heading - 1) % 4)
    elif action == Action.TURN_RIGHT:
        state.robot = Pose(r.cell, (r.heading + 1) % 4)


def step(state: EpisodeState, action) -> Tuple[EpisodeState, Observation, float, bool, dict]:
    """Robot move, catch check, source tick, catch check, then reward."""
    if state.done:
        raise EpisodeDone("episode already finished")
    action = Action(int(action))
    p = state.params
    _apply_action(state, action)
    state.step_count += 1
    caught = state.robot.cell == state.source.cell
    stopped = action == Action.STOP
    if not caught and not stopped:
        source_tick(state)
        caught = state.robot.cell == state.source.cell
    manhattan = state.graph.manhattan(state.robot.cell, state.source.cell)
    reward = p.slack_reward
    if caught:
        reward += p.success_reward
    if manhattan < state.prev_manhattan:
        reward += p.distance_reward * p.distance_reward_scale
    state.prev_manhattan = manhattan
    state.total_reward += reward
    if caught:
        state.done, state.success = True, True
    elif stopped or state.step_count >= p.max_steps:
        state.done = True
    obs = observe(state)
    info = {"success": state.success, "step": state.step_count}
    if state.done:
        info["summary"] = state.summary()
    return state, obs, reward, state.done, info


# ---------------------------------------------------------------- observations

def render_depth(graph: NavGraph, pose: Pose, res: Tuple[int, int] = (16, 16),
                 max_range: int = 8) -> np.ndarray:
    """Egocentric depth over a 90 degree FOV by grid traversal (DDA).

    A ray's depth is the forward (along-heading) offset from the robot's cell
    centre to the centre of the first blocked or off-grid cell it enters,
    divided by ``max_range`` and clamped to [0, 1].
    """
    key = (pose.cell, pose.heading, tuple(res), max_range)
    cache = graph._depth_cache
    if key in cache:
        return cache[key].copy()
    h, w = res
    r0, c0 = graph.rc(pose.cell)
    fr, fc = OFFSETS[pose.heading]
    # left of heading in (row, col): rotate forward vector counter-clockwise
    lr, lc = -fc, fr
    cols = np.empty(w)
    for j in range(w):
        ang = math.radians(45.0 - 90.0 * (j + 0.5) / w)  # left edge first
        dr = fr * math.cos(ang) + lr * math.sin(ang)
        dc = fc * math.cos(ang) + lc * math.sin(ang)
        cols[j] = _march(graph, r0, c0, dr, dc, fr, fc, max_range)
    img = np.repeat((np.minimum(cols, max_range) / max_range)[None, :], h, axis=0)
    cache[key] = img
    return img.copy()


def _march(graph, r0, c0, dr, dc, fr, fc, max_range) -> float:
    r, c = r0, c0
    step_r = 1 if dr > 0 else -1
    step_c = 1 if dc > 0 else -1
    t_dr = abs(1.0 / dr) if abs(dr) > 1e-12 else math.inf
    t_dc = abs(1.0 / dc) if abs(dc) > 1e-12 else math.inf
    t_r = 0.5 * t_dr
    t_c = 0.5 * t_dc
    while True:
        if t_r < t_c:
            r += step_r
            t_r += t_dr
        else:
            c += step_c
            t_c += t_dc
        fwd = (r - r0) * fr + (c - c0) * fc
        if fwd > max_range:
            return float(max_range)
        if not graph.free_rc(r, c):
            return float(fwd)


def bearing(graph: NavGraph, robot: Pose, target: int) -> float:
    """Angle of ``target`` relative to the robot heading, positive to the left."""
    r0, c0 = graph.rc(robot.cell)
    r1, c1 = graph.rc(target)
    vr, vc = r1 - r0, c1 - c0
    if vr == 0 and vc == 0:
        return 0.0
    fr, fc = OFFSETS[robot.heading]
    lr, lc = -fc, fr
    return math.atan2(vr * lr + vc * lc, vr * fr + vc * fc)


def binaural_gains(distance: float, phi: float, floor: float = 0.01) -> Tuple[float, float]:
    att = 1.0 / (1.0 + distance)
    s = math.sin(phi)
    return att * (1.0 + s) / 2.0 + floor, att * (1.0 - s) / 2.0 + floor


def synthesize_binaural(graph: NavGraph, robot: Pose, source_cell: int, spectrum: np.ndarray,
                        noise_std: float = 0.0,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    g = graph.distance(robot.cell, source_cell)
    if g < 0:
        raise ValueError("source unreachable from robot")
    gl, gr = binaural_gains(g, bearing(graph, robot, source_cell))
    out = np.stack([gl * spectrum, gr * spectrum])
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        out = np.maximum(out + rng.normal(0.0, noise_std, out.shape), 0.0)
    return out


def observe(state: EpisodeState) -> Observation:
    p = state.params
    depth = render_depth(state.graph, state.robot, p.depth_res, p.max_range)
    audio = synthesize_binaural(state.graph, state.robot, state.source.cell, state.spectrum,
                                p.noise_std, state.rng_env)
    return Observation(depth, audio)
