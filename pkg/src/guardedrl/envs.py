"""Desk-scale environments with explicit rule-based safety.

Hazard gridworlds (cliff-walk family) provide the main testbed: five
actions (UP, DOWN, LEFT, RIGHT, NOOP) with 2-D displacement embeddings,
optional perpendicular slip noise, and a safety predicate keyed to the
*intended* successor so the rule stays deterministic while slip keeps a
near-miss signal alive. Random safe MDPs back the randomized property
tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .guardian import project_action
from .mdp import SafetySpec, TabularMdp
from .sampling import OfflineDataset, TransitionRecord

UP, DOWN, LEFT, RIGHT, NOOP = range(5)
NUM_GRID_ACTIONS = 5
ACTION_NAMES = ("UP", "DOWN", "LEFT", "RIGHT", "NOOP")
# Displacements double as the projection embeddings.
GRID_DISPLACEMENTS = np.array(
    [(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)], dtype=np.float64
)
_PERPENDICULAR = {UP: (LEFT, RIGHT), DOWN: (LEFT, RIGHT), LEFT: (UP, DOWN), RIGHT: (UP, DOWN)}


@dataclass(frozen=True)
class GridWorldSpec:
    """Rectangular hazard grid; cells are (x, y) with y increasing upward."""

    width: int
    height: int
    start: tuple[int, int]
    goal: tuple[int, int]
    hazards: frozenset[tuple[int, int]] = frozenset()
    step_reward: float = -0.01
    goal_reward: float = 1.0
    hazard_reward: float = -1.0
    slip_prob: float = 0.0
    gamma: float = 0.95

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.width * self.height < 2:
            raise ValueError("grid must contain at least two cells")
        object.__setattr__(self, "hazards", frozenset(tuple(c) for c in self.hazards))
        object.__setattr__(self, "start", tuple(self.start))
        object.__setattr__(self, "goal", tuple(self.goal))
        for name, cell in (("start", self.start), ("goal", self.goal), *(("hazard", c) for c in self.hazards)):
            if not (0 <= cell[0] < self.width and 0 <= cell[1] < self.height):
                raise ValueError(f"{name} cell {cell} outside {self.width}x{self.height} grid")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        if self.start in self.hazards or self.goal in self.hazards:
            raise ValueError("start and goal must not be hazard cells")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def num_states(self) -> int:
        return self.width * self.height

    def state_index(self, cell: tuple[int, int]) -> int:
        return cell[1] * self.width + cell[0]

    def cell_of(self, s: int) -> tuple[int, int]:
        return s % self.width, s // self.width

    @property
    def start_state(self) -> int:
        return self.state_index(self.start)

    @property
    def goal_state(self) -> int:
        return self.state_index(self.goal)

    @property
    def hazard_states(self) -> frozenset[int]:
        return frozenset(self.state_index(c) for c in self.hazards)

    @classmethod
    def from_ascii(cls, rows: str | list[str], **numeric) -> "GridWorldSpec":
        """Build from a map block: S start, G goal, X hazard, . free.

        The first text row is the top of the grid (highest y), so UP in
        the action set moves toward earlier rows. Numeric fields pass
        through as keyword arguments.
        """
        if isinstance(rows, str):
            rows = [line for line in rows.splitlines() if line.strip()]
        rows = [row.strip() for row in rows]
        height = len(rows)
        if height == 0 or len({len(r) for r in rows}) != 1:
            raise ValueError("ASCII map must be a non-empty rectangle")
        width = len(rows[0])
        start = goal = None
        hazards = set()
        for ri, row in enumerate(rows):
            y = height - 1 - ri
            for x, ch in enumerate(row):
                if ch == "S":
                    start = (x, y)
                elif ch == "G":
                    goal = (x, y)
                elif ch == "X":
                    hazards.add((x, y))
                elif ch != ".":
                    raise ValueError(f"unknown map character {ch!r}")
        if start is None or goal is None:
            raise ValueError("map needs exactly one S and one G")
        return cls(width=width, height=height, start=start, goal=goal, hazards=frozenset(hazards), **numeric)


def _move(spec: GridWorldSpec, cell: tuple[int, int], action: int) -> tuple[int, int]:
    dx, dy = GRID_DISPLACEMENTS[action]
    nx, ny = cell[0] + int(dx), cell[1] + int(dy)
    if 0 <= nx < spec.width and 0 <= ny < spec.height:
        return nx, ny
    return cell


def build_cliff_grid(spec: GridWorldSpec) -> tuple[TabularMdp, SafetySpec]:
    """Construct the MDP and safety predicate for a hazard grid.

    Goal and hazard cells are absorbing terminal states (self-loop,
    reward 0, all actions safe: there is no move left to guard). At
    non-terminal states g(s, a) is false iff the intended (non-slip)
    successor of a is a hazard; with slip probability the move deviates
    to one of the two perpendicular directions. R(s, a) is the step
    reward plus the slip-expected entry bonus for the goal or a hazard.
    """
    n = spec.num_states
    transition = np.zeros((n, NUM_GRID_ACTIONS, n))
    reward = np.zeros((n, NUM_GRID_ACTIONS))
    safe = np.ones((n, NUM_GRID_ACTIONS), dtype=bool)
    terminal = np.zeros(n, dtype=bool)
    terminal[spec.goal_state] = True
    for h in spec.hazard_states:
        terminal[h] = True

    def entry_bonus(cell):
        if cell == spec.goal:
            return spec.goal_reward
        if cell in spec.hazards:
            return spec.hazard_reward
        return 0.0

    for s in range(n):
        cell = spec.cell_of(s)
        if terminal[s]:
            transition[s, :, s] = 1.0
            continue
        for a in range(NUM_GRID_ACTIONS):
            intended = _move(spec, cell, a)
            safe[s, a] = intended not in spec.hazards
            if a == NOOP or spec.slip_prob == 0.0:
                outcomes = [(intended, 1.0)]
            else:
                left, right = _PERPENDICULAR[a]
                outcomes = [
                    (intended, 1.0 - spec.slip_prob),
                    (_move(spec, cell, left), spec.slip_prob / 2.0),
                    (_move(spec, cell, right), spec.slip_prob / 2.0),
                ]
            expected_bonus = 0.0
            for target, prob in outcomes:
                transition[s, a, spec.state_index(target)] += prob
                expected_bonus += prob * entry_bonus(target)
            reward[s, a] = spec.step_reward + expected_bonus

    mdp = TabularMdp(transition=transition, reward=reward, gamma=spec.gamma, terminal=terminal)
    safety = SafetySpec(safe=safe, action_embedding=GRID_DISPLACEMENTS.copy())
    return mdp, safety


def build_random_safe_mdp(
    num_states: int,
    num_actions: int,
    safe_fraction: float,
    seed: int,
    gamma: float = 0.9,
) -> tuple[TabularMdp, SafetySpec]:
    """Random MDP + safety predicate for property tests, deterministic per seed.

    Dirichlet(1) transition rows, rewards uniform in [-1, 1], each
    (s, a) safe independently with the given probability and empty rows
    patched with one action; embeddings are one-hot per action.
    """
    if not 0.0 < safe_fraction <= 1.0:
        raise ValueError("safe_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    raw = rng.exponential(1.0, size=(num_states, num_actions, num_states))
    transition = raw / raw.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    safe = rng.random((num_states, num_actions)) < safe_fraction
    for s in np.flatnonzero(~safe.any(axis=1)):
        safe[s, int(rng.integers(num_actions))] = True
    mdp = TabularMdp(transition=transition, reward=reward, gamma=gamma)
    spec = SafetySpec(safe=safe, action_embedding=np.eye(num_actions))
    return mdp, spec


def env_step(
    mdp: TabularMdp, s: int, a: int, rng: np.random.Generator
) -> tuple[float, int, bool]:
    """Sample one transition: reward from the table, successor from P[s][a]."""
    row = mdp.transition[s, a]
    cumulative = np.cumsum(row)
    s_next = int(np.searchsorted(cumulative, rng.random(), side="right"))
    s_next = min(s_next, mdp.num_states - 1)
    return float(mdp.reward[s, a]), s_next, mdp.is_terminal(s_next)


def uniform_policy(num_states: int, num_actions: int) -> np.ndarray:
    return np.full((num_states, num_actions), 1.0 / num_actions)


def uniform_safe_policy(spec: SafetySpec) -> np.ndarray:
    """Uniform distribution over each state's safe action set."""
    mask = spec.safe.astype(np.float64)
    return mask / mask.sum(axis=1, keepdims=True)


def collect_offline_dataset(
    mdp: TabularMdp,
    spec: SafetySpec,
    behavior: np.ndarray,
    n_episodes: int,
    max_ep_len: int,
    seed: int,
    guardian_filter: bool = True,
    start_state: int = 0,
) -> OfflineDataset:
    """Roll out a behavior policy and package the transitions as a dataset.

    With guardian_filter on (the default) every proposal is projected
    before execution, so the dataset is rule-consistent. Deterministic
    given the seed.
    """
    behavior = np.asarray(behavior, dtype=np.float64)
    if behavior.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("behavior must be an (S, A) distribution table")
    if not np.allclose(behavior.sum(axis=1), 1.0, atol=1e-9) or np.any(behavior < 0.0):
        raise ValueError("behavior rows must be probability distributions")
    if mdp.is_terminal(start_state):
        raise ValueError("start_state must not be terminal")
    rng = np.random.default_rng(seed)
    cum_behavior = behavior.cumsum(axis=1)
    episodes: list[list[TransitionRecord]] = []
    for ep in range(n_episodes):
        s = start_state
        records: list[TransitionRecord] = []
        for t in range(max_ep_len):
            a_raw = int(np.searchsorted(cum_behavior[s], rng.random(), side="right"))
            a_raw = min(a_raw, mdp.num_actions - 1)
            a_exec = project_action(s, a_raw, spec).exec_action if guardian_filter else a_raw
            r, s_next, done = env_step(mdp, s, a_exec, rng)
            records.append(
                TransitionRecord(
                    s=s, a_exec=a_exec, r=r, s_next=s_next, done=done, t=t, episode=ep, a_prop=a_raw
                )
            )
            s = s_next
            if done:
                break
        episodes.append(records)
    return OfflineDataset(episodes)
