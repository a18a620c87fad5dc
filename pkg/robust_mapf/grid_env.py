"""
Deterministic grid MAPF simulator with egocentric local observations.

Agents move simultaneously on an L×L grid. Blocked moves revert to WAIT;
vertex and swap conflicts revert every involved agent and flag a collision.
Agents that reach their goal stay parked there for the rest of the episode.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

GOAL_REWARD = 1.0
STEP_PENALTY = -0.01
COLLISION_PENALTY = -0.05

MAX_GENERATION_RETRIES = 1000
NUM_CHANNELS = 3

# 4-connectivity for reachability labelling
_FOUR_NEIGHBOURS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class InstanceGenerationError(RuntimeError):
    pass


class TerminalEpisodeError(RuntimeError):
    pass


class NonTerminalEpisodeError(RuntimeError):
    pass


class Action(IntEnum):
    WAIT = 0
    UP = 1
    DOWN = 2
    LEFT = 3
    RIGHT = 4

    @property
    def delta(self) -> Cell:
        return _DELTAS[self]


_DELTAS: Dict[Action, Cell] = {
    Action.WAIT: (0, 0),
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}

NUM_ACTIONS = len(Action)


@dataclass(frozen=True)
class EnvConfig:
    side: int = 8
    density: float = 0.1
    num_agents: int = 4
    horizon: int = 64
    radius: int = 2

    def __post_init__(self) -> None:
        if self.side < 4:
            raise ValueError("side must be at least 4")
        if not 0.0 <= self.density < 0.5:
            raise ValueError("density must lie in [0, 0.5)")
        if self.num_agents < 1:
            raise ValueError("num_agents must be at least 1")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.radius < 1:
            raise ValueError("radius must be at least 1")

    @property
    def window(self) -> int:
        return 2 * self.radius + 1


@dataclass(frozen=True)
class GridMap:
    side: int
    obstacles: np.ndarray  # (side, side) bool

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.side and 0 <= cell[1] < self.side

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.obstacles[cell]

    @property
    def obstacle_count(self) -> int:
        return int(self.obstacles.sum())


@dataclass(frozen=True)
class AgentState:
    position: Cell
    goal: Cell
    reached: bool = False


@dataclass(frozen=True)
class EpisodeState:
    map: GridMap
    agents: Tuple[AgentState, ...]
    t: int = 0
    horizon: int = 64
    density: float = 0.0

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def terminal(self) -> bool:
        return self.t >= self.horizon or all(a.reached for a in self.agents)

    @property
    def positions(self) -> List[Cell]:
        return [a.position for a in self.agents]


@dataclass(frozen=True)
class StepOutcome:
    rewards: np.ndarray  # (N,) float
    collisions: np.ndarray  # (N,) bool
    done: bool
    newly_reached: np.ndarray  # (N,) bool


def obstacle_budget(side: int, density: float) -> int:
    # guard against 0.07 * 100 == 7.000000000000001 style float noise
    return int(math.floor(density * side * side + 1e-9))


def _connected(obstacles: np.ndarray, starts: Sequence[Cell], goals: Sequence[Cell]) -> bool:
    labels, _ = ndimage.label(~obstacles, structure=_FOUR_NEIGHBOURS)
    return all(labels[s] != 0 and labels[s] == labels[g] for s, g in zip(starts, goals))


def generate_instance(
    seed: int,
    side: int = 8,
    density: float = 0.1,
    num_agents: int = 4,
    horizon: int = 64,
) -> EpisodeState:
    """Draw a map, starts and goals as a pure function of ``seed``.

    Places exactly ``floor(density * side**2)`` obstacles by a seeded shuffle,
    then 2N distinct free cells for starts and goals. Instances where some
    start cannot reach its goal are discarded and fully resampled.
    """
    if side < 4:
        raise ValueError("side must be at least 4")
    if not 0.0 <= density < 0.5:
        raise ValueError("density must lie in [0, 0.5)")
    if num_agents < 1:
        raise ValueError("num_agents must be at least 1")
    cells = side * side
    n_obstacles = obstacle_budget(side, density)
    if cells - n_obstacles < 2 * num_agents:
        raise ValueError(
            f"{cells - n_obstacles} free cells cannot hold {num_agents} starts and goals"
        )

    rng = np.random.default_rng(seed)
    for attempt in range(MAX_GENERATION_RETRIES):
        order = rng.permutation(cells)
        obstacles = np.zeros(cells, dtype=bool)
        obstacles[order[:n_obstacles]] = True
        obstacles = obstacles.reshape(side, side)
        picked = rng.choice(order[n_obstacles:], size=2 * num_agents, replace=False)
        coords = [(int(i // side), int(i % side)) for i in picked]
        starts, goals = coords[:num_agents], coords[num_agents:]
        if _connected(obstacles, starts, goals):
            if attempt:
                logger.debug("seed %d: connected instance after %d resamples", seed, attempt)
            agents = tuple(AgentState(s, g) for s, g in zip(starts, goals))
            return EpisodeState(GridMap(side, obstacles), agents, 0, horizon, density)

    raise InstanceGenerationError(
        f"no connected instance for seed {seed} after {MAX_GENERATION_RETRIES} retries"
    )


def instance_from_config(seed: int, config: EnvConfig) -> EpisodeState:
    return generate_instance(
        seed, config.side, config.density, config.num_agents, config.horizon
    )


def _border_cells(radius: int) -> np.ndarray:
    """Window border cells as (row, col) offsets from the centre, row-major."""
    span = range(-radius, radius + 1)
    return np.array(
        [(r, c) for r in span for c in span if max(abs(r), abs(c)) == radius],
        dtype=np.float64,
    )


def hint_cell(position: Cell, goal: Cell, radius: int) -> Cell:
    """Window offset of the goal hint for an agent at ``position``."""
    dr, dc = goal[0] - position[0], goal[1] - position[1]
    if max(abs(dr), abs(dc)) <= radius:
        return dr, dc
    # where the straight line towards the goal leaves the window square
    scale = radius / max(abs(dr), abs(dc))
    target = np.array([dr * scale, dc * scale])
    border = _border_cells(radius)
    nearest = int(np.argmin(np.hypot(*(border - target).T)))
    return int(border[nearest, 0]), int(border[nearest, 1])


def observe(state: EpisodeState, agent: int, radius: int = 2) -> np.ndarray:
    """Egocentric (3, 2r+1, 2r+1) float32 observation of one agent.

    Channel 0 holds obstacles with out-of-grid cells set to 1, channel 1 the
    other agents, channel 2 a single goal-hint cell.
    """
    if not 0 <= agent < state.num_agents:
        raise IndexError(f"agent index {agent} out of range")
    size = 2 * radius + 1
    row, col = state.agents[agent].position
    obs = np.zeros((NUM_CHANNELS, size, size), dtype=np.float32)

    padded = np.pad(state.map.obstacles, radius, constant_values=True)
    obs[0] = padded[row : row + size, col : col + size]

    for j, other in enumerate(state.agents):
        if j == agent:
            continue
        dr, dc = other.position[0] - row, other.position[1] - col
        if abs(dr) <= radius and abs(dc) <= radius:
            obs[1, dr + radius, dc + radius] = 1.0

    hr, hc = hint_cell((row, col), state.agents[agent].goal, radius)
    obs[2, hr + radius, hc + radius] = 1.0
    return obs


def observe_all(state: EpisodeState, radius: int = 2) -> np.ndarray:
    return np.stack([observe(state, i, radius) for i in range(state.num_agents)])


def _resolve_moves(
    current: List[Cell], proposed: List[Cell], movable: List[bool]
) -> Tuple[List[Cell], np.ndarray]:
    """Revert conflicting proposals to WAIT until no vertex or swap conflict remains.

    Every movable agent involved in a conflict is flagged, including one that
    chose WAIT and was bumped into. Agents parked on their goal still block
    their cell but are never flagged: they act no more and earn no reward.
    """
    targets = list(proposed)
    collided = np.zeros(len(current), dtype=bool)
    while True:
        changed = False
        claims: Dict[Cell, List[int]] = {}
        for i, cell in enumerate(targets):
            claims.setdefault(cell, []).append(i)
        for cell, who in claims.items():
            if len(who) < 2:
                continue
            for i in who:
                if movable[i]:
                    collided[i] = True
                if targets[i] != current[i]:
                    targets[i] = current[i]
                    changed = True
        for i in range(len(targets)):
            for j in range(i + 1, len(targets)):
                if (
                    targets[i] == current[j]
                    and targets[j] == current[i]
                    and targets[i] != current[i]
                ):
                    collided[i] = collided[j] = True
                    targets[i], targets[j] = current[i], current[j]
                    changed = True
        if not changed:
            return targets, collided


def step(
    state: EpisodeState, actions: Sequence[Union[Action, int]]
) -> Tuple[EpisodeState, StepOutcome]:
    """Advance every agent simultaneously by one step."""
    if state.terminal:
        raise TerminalEpisodeError(f"episode already terminal at t={state.t}")
    if len(actions) != state.num_agents:
        raise ValueError(f"expected {state.num_agents} actions, got {len(actions)}")

    current = state.positions
    movable = [not a.reached for a in state.agents]
    proposed: List[Cell] = []
    for agent, action, can_move in zip(state.agents, actions, movable):
        dr, dc = Action(int(action)).delta if can_move else (0, 0)
        target = (agent.position[0] + dr, agent.position[1] + dc)
        proposed.append(target if state.map.is_free(target) else agent.position)

    final, collided = _resolve_moves(current, proposed, movable)

    rewards = np.zeros(state.num_agents, dtype=np.float64)
    newly = np.zeros(state.num_agents, dtype=bool)
    agents = []
    for i, (agent, cell) in enumerate(zip(state.agents, final)):
        if agent.reached:
            agents.append(agent)
            continue
        reached = cell == agent.goal
        if reached:
            rewards[i] = GOAL_REWARD
            newly[i] = True
        else:
            rewards[i] = STEP_PENALTY
        if collided[i]:
            rewards[i] += COLLISION_PENALTY
        agents.append(replace(agent, position=cell, reached=reached))

    next_state = replace(state, agents=tuple(agents), t=state.t + 1)
    outcome = StepOutcome(rewards, collided, next_state.terminal, newly)
    return next_state, outcome


def success_rate(state: EpisodeState) -> float:
    if not state.terminal:
        raise NonTerminalEpisodeError("success rate is only defined at episode end")
    return sum(a.reached for a in state.agents) / state.num_agents


def dump_instance(state: EpisodeState) -> Dict[str, Any]:
    rows, cols = np.nonzero(state.map.obstacles)
    return {
        "L": state.map.side,
        "rho": state.density,
        "N": state.num_agents,
        "T": state.horizon,
        "obstacles": [[int(r), int(c)] for r, c in zip(rows, cols)],
        "starts": [list(a.position) for a in state.agents],
        "goals": [list(a.goal) for a in state.agents],
    }


def load_instance(doc: Dict[str, Any]) -> EpisodeState:
    side = int(doc["L"])
    obstacles = np.zeros((side, side), dtype=bool)
    for r, c in doc["obstacles"]:
        obstacles[r, c] = True
    grid = GridMap(side, obstacles)
    if len(doc["starts"]) != int(doc["N"]) or len(doc["goals"]) != int(doc["N"]):
        raise ValueError("starts and goals must both have N entries")
    agents = []
    for s, g in zip(doc["starts"], doc["goals"]):
        start, goal = (int(s[0]), int(s[1])), (int(g[0]), int(g[1]))
        if not (grid.is_free(start) and grid.is_free(goal)):
            raise ValueError(f"start {start} or goal {goal} is not a free cell")
        agents.append(AgentState(start, goal))
    return EpisodeState(grid, tuple(agents), 0, int(doc["T"]), float(doc["rho"]))


def save_instance(state: EpisodeState, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(dump_instance(state), indent=2))


def read_instance(path: Union[str, Path], horizon: Optional[int] = None) -> EpisodeState:
    state = load_instance(json.loads(Path(path).read_text()))
    return replace(state, horizon=horizon) if horizon is not None else state
