"""Partially observable multi-agent grid environments.

Three tasks:
    coverage        -- visit globally-uncovered free cells (reward 1 each)
    split_coverage  -- same, but only right-half cells pay; a wall with a
                       single opening separates the halves
    path_planning   -- reach an assigned goal; reward 1 per step on it;
                       cells are exclusive

Grids are (W, H) boolean arrays indexed [x, y]; agent positions are (x, y)
cell coordinates. All randomness flows through numpy Generators, so a
(config, seed, action sequence) triple reproduces a trajectory bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

TASKS = ("coverage", "split_coverage", "path_planning")
LAYOUTS = ("random", "split", "split_disconnected", "warehouse")

# action encoding: up/down/left/right/wait
ACTIONS = ("up", "down", "left", "right", "wait")
DELTAS = np.array([(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)], dtype=np.int64)
N_ACTIONS = 5

_CONN4 = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class EnvConfig:
    task: str = "coverage"
    width: int = 24
    height: int = 24
    n_agents: int = 6
    obstacle_fraction: float = 0.4
    comm_range: float = 8.0
    fov: tuple[int, int] = (11, 11)
    horizon: int = 346
    stall_limit: int = 10
    layout: str = "random"
    si_agent: int | None = None
    si_placement: str = "shared"   # "shared" | "left"
    early_termination: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if min(self.width, self.height, self.n_agents) < 1:
            raise ValueError("width, height and n_agents must be >= 1")
        if self.fov[0] % 2 == 0 or self.fov[1] % 2 == 0:
            raise ValueError(f"fov must be odd (agent-centered), got {self.fov}")
        if not (0.0 <= self.obstacle_fraction < 1.0):
            raise ValueError(f"obstacle_fraction out of range: {self.obstacle_fraction}")
        if self.si_agent is not None and not (0 <= self.si_agent < self.n_agents):
            raise ValueError(f"si_agent {self.si_agent} out of range")


def default_config(task: str, **overrides) -> EnvConfig:
    """Per-task defaults; keyword overrides win."""
    if task == "coverage":
        base = dict(task=task, width=24, height=24, n_agents=6, obstacle_fraction=0.4,
                    comm_range=8.0, horizon=346, layout="random")
    elif task == "split_coverage":
        base = dict(task=task, width=24, height=24, n_agents=6, obstacle_fraction=0.0,
                    comm_range=8.0, horizon=288, layout="split")
    elif task == "path_planning":
        base = dict(task=task, width=12, height=12, n_agents=16, obstacle_fraction=0.25,
                    comm_range=5.0, horizon=50, layout="warehouse", stall_limit=0)
    else:
        raise ValueError(f"unknown task {task!r}")
    base.update(overrides)
    return EnvConfig(**base)


def eval_horizon(config: EnvConfig) -> int:
    """Fixed-length evaluation horizons: ceil(0.6*W*H) for coverage,
    ceil(W*H/2) for split coverage, the training horizon for path planning."""
    area = config.width * config.height
    if config.task == "coverage":
        return int(np.ceil(0.6 * area))
    if config.task == "split_coverage":
        return int(np.ceil(area / 2))
    return config.horizon


@dataclass
class WorldState:
    obstacles: np.ndarray                 # (W, H) bool
    positions: np.ndarray                 # (N, 2) int
    coverage: np.ndarray | None           # (N, W, H) bool, coverage tasks
    goals: np.ndarray | None              # (N, 2) int, path task
    t: int = 0

    def copy(self) -> "WorldState":
        return WorldState(
            obstacles=self.obstacles.copy(),
            positions=self.positions.copy(),
            coverage=None if self.coverage is None else self.coverage.copy(),
            goals=None if self.goals is None else self.goals.copy(),
            t=self.t,
        )

    def global_coverage(self) -> np.ndarray:
        """Logical disjunction of all agents' coverage maps."""
        if self.coverage is None:
            raise ValueError("no coverage maps on a path-planning state")
        return np.any(self.coverage, axis=0)


@dataclass
class StepResult:
    state: WorldState
    rewards: np.ndarray          # (N,) float32
    done: bool
    observations: np.ndarray     # (N, 2, W_FOV, H_FOV) float32
    edges: list[tuple[int, int]]
    info: dict = field(default_factory=dict)


class WorldGenerationError(RuntimeError):
    pass


def _free_space_connected(free: np.ndarray) -> bool:
    if not free.any():
        return False
    _, n = ndimage.label(free, structure=_CONN4)
    return n == 1


def _scatter_obstacles(free: np.ndarray, target: int, rng: np.random.Generator,
                       protected: np.ndarray | None = None) -> int:
    """Add up to `target` obstacles one at a time, skipping any placement that
    disconnects the remaining free space. Mutates `free`; returns count added."""
    w, h = free.shape
    added = 0
    order = rng.permutation(w * h)
    for flat in order:
        if added >= target:
            break
        x, y = divmod(int(flat), h)
        if not free[x, y]:
            continue
        if protected is not None and protected[x, y]:
            continue
        free[x, y] = False
        if not _free_space_connected(free):
            free[x, y] = True
            continue
        added += 1
    return added


def _place_distinct(free: np.ndarray, count: int, rng: np.random.Generator,
                    region: np.ndarray | None = None) -> np.ndarray:
    mask = free if region is None else (free & region)
    cells = np.argwhere(mask)
    if len(cells) < count:
        raise WorldGenerationError(f"only {len(cells)} free cells for {count} agents")
    pick = rng.choice(len(cells), size=count, replace=False)
    return cells[pick].astype(np.int64)


def generate_world(config: EnvConfig, rng: np.random.Generator | int) -> WorldState:
    """Sample a world layout; retries (bounded) until constraints hold."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    last_err = None
    for attempt in range(100):
        try:
            return _generate_once(config, rng)
        except WorldGenerationError as e:
            last_err = e
    raise WorldGenerationError(f"world generation failed after 100 attempts: {last_err}")


def _generate_once(config: EnvConfig, rng: np.random.Generator) -> WorldState:
    w, h = config.width, config.height
    free = np.ones((w, h), dtype=bool)
    left_half = np.zeros((w, h), dtype=bool)
    left_half[: w // 2, :] = True

    if config.layout == "random":
        target = int(round(config.obstacle_fraction * w * h))
        added = _scatter_obstacles(free, target, rng)
        if added < target:
            raise WorldGenerationError(f"placed only {added}/{target} obstacles")
    elif config.layout in ("split", "split_disconnected"):
        wall = w // 2
        free[wall, :] = False
        if config.layout == "split":
            opening = int(rng.integers(0, h))
            free[wall, opening] = True
        if config.obstacle_fraction > 0:
            protected = np.zeros((w, h), dtype=bool)
            protected[wall, :] = True
            target = int(round(config.obstacle_fraction * w * h))
            _scatter_obstacles_per_region(free, target, rng, protected)
        if config.layout == "split" and not _free_space_connected(free):
            raise WorldGenerationError("split world free space disconnected")
    elif config.layout == "warehouse":
        xs, ys = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
        free[(xs % 2 == 1) & (ys % 2 == 1)] = False
    else:
        raise ValueError(f"unknown layout {config.layout!r}")

    obstacles = ~free

    # agent placement
    if config.layout == "split":
        positions = _place_distinct(free, config.n_agents, rng, region=left_half)
    elif config.layout == "split_disconnected":
        positions = np.zeros((config.n_agents, 2), dtype=np.int64)
        right = ~left_half
        si = config.si_agent if config.si_placement == "left" else None
        coop_idx = [i for i in range(config.n_agents) if i != si]
        coop_pos = _place_distinct(free, len(coop_idx), rng, region=right)
        for slot, i in enumerate(coop_idx):
            positions[i] = coop_pos[slot]
        if si is not None:
            positions[si] = _place_distinct(free, 1, rng, region=left_half)[0]
    else:
        positions = _place_distinct(free, config.n_agents, rng)

    if config.task == "path_planning":
        goals = _place_distinct(free, config.n_agents, rng)
        return WorldState(obstacles=obstacles, positions=positions,
                          coverage=None, goals=goals)

    coverage = np.zeros((config.n_agents, w, h), dtype=bool)
    for i, (x, y) in enumerate(positions):
        coverage[i, x, y] = True
    return WorldState(obstacles=obstacles, positions=positions,
                      coverage=coverage, goals=None)


def _scatter_obstacles_per_region(free: np.ndarray, target: int,
                                  rng: np.random.Generator,
                                  protected: np.ndarray) -> None:
    """Obstacle scatter that keeps each already-separate free region connected."""
    labels, n = ndimage.label(free, structure=_CONN4)
    w, h = free.shape
    added = 0
    order = rng.permutation(w * h)
    for flat in order:
        if added >= target:
            break
        x, y = divmod(int(flat), h)
        if not free[x, y] or protected[x, y]:
            continue
        region = labels == labels[x, y]
        region[x, y] = False
        if not _free_space_connected(region):
            continue
        free[x, y] = False
        labels[x, y] = 0
        added += 1


# ---------------------------------------------------------------------------
# observation & communication


def observe(state: WorldState, agent: int, config: EnvConfig) -> np.ndarray:
    """Agent-centered 2-channel window.

    Channel 0: obstacles (out-of-world reads occupied). Channel 1: own
    coverage (coverage tasks, out-of-world reads 0) or the goal map with
    out-of-FOV goals projected onto the window perimeter (path task).
    """
    fw, fh = config.fov
    rx, ry = fw // 2, fh // 2
    px, py = (int(v) for v in state.positions[agent])
    obs = np.zeros((2, fw, fh), dtype=np.float32)

    w, h = state.obstacles.shape
    x0, x1 = px - rx, px + rx + 1
    y0, y1 = py - ry, py + ry + 1
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x1, w), min(y1, h)

    obs[0] = 1.0  # out-of-world padding: occupied
    if sx0 < sx1 and sy0 < sy1:
        obs[0, sx0 - x0:sx1 - x0, sy0 - y0:sy1 - y0] = \
            state.obstacles[sx0:sx1, sy0:sy1].astype(np.float32)
        if state.coverage is not None:
            obs[1, sx0 - x0:sx1 - x0, sy0 - y0:sy1 - y0] = \
                state.coverage[agent, sx0:sx1, sy0:sy1].astype(np.float32)

    if state.goals is not None:
        gx, gy = (int(v) for v in state.goals[agent])
        dx, dy = gx - px, gy - py
        fx, fy = _project_to_window(dx, dy, rx, ry)
        obs[1, fx + rx, fy + ry] = 1.0
    return obs


def _project_to_window(dx: int, dy: int, rx: int, ry: int) -> tuple[int, int]:
    """Project an offset onto the window box; offsets outside land on the
    perimeter along the ray to the target."""
    if abs(dx) <= rx and abs(dy) <= ry:
        return dx, dy
    tx = rx / abs(dx) if abs(dx) > 0 else np.inf
    ty = ry / abs(dy) if abs(dy) > 0 else np.inf
    t = min(tx, ty)
    fx = int(round(dx * t))
    fy = int(round(dy * t))
    fx = int(np.clip(fx, -rx, rx))
    fy = int(np.clip(fy, -ry, ry))
    # rounding can pull the point inside; pin the binding axis to the edge
    if abs(fx) < rx and abs(fy) < ry:
        if tx <= ty:
            fx = rx if dx > 0 else -rx
        else:
            fy = ry if dy > 0 else -ry
    return fx, fy


def comm_graph(positions: np.ndarray, comm_range: float) -> list[tuple[int, int]]:
    """Undirected edges between agents strictly closer than `comm_range`."""
    if comm_range <= 0:
        raise ValueError("comm_range must be positive")
    n = len(positions)
    p = positions.astype(np.float64)
    edges = []
    for i in range(n):
        d = np.linalg.norm(p[i + 1:] - p[i], axis=1)
        for off in np.flatnonzero(d < comm_range):
            edges.append((i, i + 1 + int(off)))
    return edges


# ---------------------------------------------------------------------------
# environment


class GridWorld:
    """One environment instance; stepped by exactly one caller at a time."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: WorldState | None = None
        self.stall = np.zeros(config.n_agents, dtype=np.int64)
        self.right_reached = False
        self._episode = 0

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    def reset(self, seed: int | None = None) -> StepResult:
        if seed is None:
            seed = self.config.seed + self._episode
        self._episode += 1
        rng = np.random.default_rng(seed)
        self.state = generate_world(self.config, rng)
        self.stall = np.zeros(self.config.n_agents, dtype=np.int64)
        self.right_reached = self._any_agent_right()
        return StepResult(
            state=self.state,
            rewards=np.zeros(self.config.n_agents, dtype=np.float32),
            done=False,
            observations=self._observations(),
            edges=comm_graph(self.state.positions, self.config.comm_range),
            info={"seed": seed},
        )

    def step(self, joint_actions: Sequence[int]) -> StepResult:
        if self.state is None:
            raise RuntimeError("reset() before step()")
        cfg = self.config
        actions = np.asarray(joint_actions, dtype=np.int64)
        if actions.shape != (cfg.n_agents,):
            raise ValueError(f"need one action per agent, got shape {actions.shape}")
        if actions.min() < 0 or actions.max() >= N_ACTIONS:
            raise ValueError(f"action out of range in {actions}")

        st = self.state
        w, h = st.obstacles.shape
        exclusive = cfg.task == "path_planning"
        occupied = set(map(tuple, st.positions)) if exclusive else None

        rewards = np.zeros(cfg.n_agents, dtype=np.float32)
        global_cov = st.global_coverage() if st.coverage is not None else None

        # agents move in ascending index order; blocked moves leave them in place
        for i in range(cfg.n_agents):
            x, y = (int(v) for v in st.positions[i])
            dx, dy = DELTAS[actions[i]]
            nx, ny = x + int(dx), y + int(dy)
            blocked = not (0 <= nx < w and 0 <= ny < h) or st.obstacles[nx, ny]
            if exclusive and not blocked and (nx, ny) != (x, y) and (nx, ny) in occupied:
                blocked = True
            if blocked:
                nx, ny = x, y
            if exclusive:
                occupied.discard((x, y))
                occupied.add((nx, ny))
            st.positions[i] = (nx, ny)

            if st.coverage is not None:
                newly = not global_cov[nx, ny]
                st.coverage[i, nx, ny] = True
                if newly:
                    global_cov[nx, ny] = True
                    if self._cell_pays(nx):
                        rewards[i] = 1.0
                    self.stall[i] = 0  # any globally-new cell counts as progress
                else:
                    self.stall[i] += 1
            else:
                if (nx, ny) == tuple(int(v) for v in st.goals[i]):
                    rewards[i] = 1.0

        st.t += 1
        if cfg.task == "split_coverage" and not self.right_reached:
            self.right_reached = self._any_agent_right()
        done = self._termination_check()
        return StepResult(
            state=st,
            rewards=rewards,
            done=done,
            observations=self._observations(),
            edges=comm_graph(st.positions, cfg.comm_range),
            info={"stall": self.stall.copy()},
        )

    def _cell_pays(self, x: int) -> bool:
        if self.config.task == "split_coverage":
            return x >= self.config.width // 2
        return True

    def _any_agent_right(self) -> bool:
        if self.config.task != "split_coverage":
            return False
        return bool(np.any(self.state.positions[:, 0] >= self.config.width // 2))

    def _termination_check(self) -> bool:
        cfg = self.config
        if self.state.t >= cfg.horizon:
            return True
        if not cfg.early_termination or cfg.stall_limit <= 0:
            return False
        if cfg.task == "coverage":
            return bool(np.any(self.stall >= cfg.stall_limit))
        if cfg.task == "split_coverage":
            return self.right_reached and bool(np.any(self.stall >= cfg.stall_limit))
        return False

    def _observations(self) -> np.ndarray:
        return np.stack([observe(self.state, i, self.config)
                         for i in range(self.config.n_agents)])


# ---------------------------------------------------------------------------
# snapshots


def state_to_snapshot(state: WorldState, config: EnvConfig) -> dict:
    """Portable JSON document for replay / dataset provenance."""
    doc = {
        "task": config.task,
        "width": config.width,
        "height": config.height,
        "t": state.t,
        "obstacles": state.obstacles.astype(int).tolist(),
        "positions": state.positions.tolist(),
    }
    if state.coverage is not None:
        doc["coverage"] = state.coverage.astype(int).tolist()
    if state.goals is not None:
        doc["goals"] = state.goals.tolist()
    return doc


def snapshot_to_state(doc: dict) -> WorldState:
    return WorldState(
        obstacles=np.asarray(doc["obstacles"], dtype=bool),
        positions=np.asarray(doc["positions"], dtype=np.int64),
        coverage=(np.asarray(doc["coverage"], dtype=bool)
                  if "coverage" in doc else None),
        goals=(np.asarray(doc["goals"], dtype=np.int64)
               if "goals" in doc else None),
        t=int(doc["t"]),
    )


def save_snapshot(state: WorldState, config: EnvConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(state_to_snapshot(state, config), f)


def load_snapshot(path: str) -> WorldState:
    with open(path) as f:
        return snapshot_to_state(json.load(f))
