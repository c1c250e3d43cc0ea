"""Desk-scale cooperative grid worlds with shared reward.

Four scenarios with distinct coordination structure:

* lbf1    -- 5x5 foraging, one level-2 food at (4,4); collection additionally
             requires the two agents to have been adjacent to each other on at
             least two earlier timesteps.
* lbf4    -- 6x6 foraging, four level-2 corner foods; partners must agree on
             a food and collect it together.
* grid_pp -- 7x7 pursuit; a prey is captured when every predator is within
             one cell of it on the same step. pp1: 3 random-walk preys,
             pp2: 5 fleeing preys.
* grid_cn -- navigation; +1 per step while every landmark holds exactly one
             agent, -0.1 per colliding pair.

All dynamics are deterministic given the rng stream; environments are plain
state machines (reset/step produce new states, nothing hidden).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

N_ACTIONS = 5
# up, down, left, right, stay
MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0), (0, 0))

SCENARIOS = ("lbf1", "lbf4", "grid_pp", "grid_cn")


@dataclass(frozen=True)
class EnvSpec:
    scenario: str
    grid_size: tuple[int, int]
    n_agents: int
    n_ego: int
    horizon: int
    scenario_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not (1 <= self.n_ego <= self.n_agents):
            raise ValueError("need 1 <= n_ego <= n_agents")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def to_obj(self):
        return {
            "scenario": self.scenario,
            "grid_size": list(self.grid_size),
            "n_agents": self.n_agents,
            "n_ego": self.n_ego,
            "horizon": self.horizon,
            "scenario_params": _params_to_obj(self.scenario_params),
        }

    @classmethod
    def from_obj(cls, obj):
        return cls(
            scenario=obj["scenario"],
            grid_size=tuple(obj["grid_size"]),
            n_agents=int(obj["n_agents"]),
            n_ego=int(obj["n_ego"]),
            horizon=int(obj["horizon"]),
            scenario_params=_params_from_obj(obj.get("scenario_params", {})),
        )


def _params_to_obj(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, (list, tuple)) and v and isinstance(v[0], tuple):
            out[k] = [list(c) for c in v]
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


_CELL_LIST_KEYS = ("foods", "spawns", "landmarks", "predator_spawns")


def _params_from_obj(obj):
    out = {}
    for k, v in obj.items():
        if k in _CELL_LIST_KEYS:
            out[k] = [tuple(c) for c in v]
        else:
            out[k] = v
    return out


@dataclass
class EnvState:
    agent_cells: list[tuple[int, int]]
    entity_cells: list[tuple[int, int]]
    entity_alive: list[bool]
    step: int = 0
    adjacency_count: int = 0


@dataclass
class StepResult:
    next_obs: list[np.ndarray]
    reward: float
    done: bool


_DEFAULTS = {
    "lbf1": dict(
        grid_size=(5, 5), n_agents=2, n_ego=1, horizon=25,
        params=dict(foods=[(4, 4)], food_levels=[2], agent_levels=[1, 1],
                    spawns=[(0, 0), (0, 1), (1, 0), (1, 1)], adjacency_required=2),
    ),
    "lbf4": dict(
        grid_size=(6, 6), n_agents=2, n_ego=1, horizon=25,
        params=dict(foods=[(0, 0), (0, 5), (5, 0), (5, 5)], food_levels=[2, 2, 2, 2],
                    agent_levels=[1, 1], spawns=[(2, 2), (2, 3), (3, 2), (3, 3)]),
    ),
    "pp1": dict(
        scenario="grid_pp", grid_size=(7, 7), n_agents=2, n_ego=1, horizon=50,
        params=dict(n_prey=3, prey_behavior="random",
                    predator_spawns=[(x, y) for x in (2, 3, 4) for y in (2, 3, 4)]),
    ),
    "pp2": dict(
        scenario="grid_pp", grid_size=(7, 7), n_agents=2, n_ego=1, horizon=50,
        params=dict(n_prey=5, prey_behavior="flee",
                    predator_spawns=[(x, y) for x in (2, 3, 4) for y in (2, 3, 4)]),
    ),
    "cn2": dict(
        scenario="grid_cn", grid_size=(5, 5), n_agents=2, n_ego=1, horizon=25,
        params=dict(landmarks=[(0, 0), (4, 4)]),
    ),
    "cn3": dict(
        scenario="grid_cn", grid_size=(5, 5), n_agents=3, n_ego=2, horizon=25,
        params=dict(landmarks=[(0, 0), (4, 4), (0, 4)]),
    ),
}

ENV_NAMES = tuple(_DEFAULTS)


def default_spec(name: str, **overrides) -> EnvSpec:
    """Spec for one of the named scenarios (lbf1|lbf4|pp1|pp2|cn2|cn3)."""
    if name not in _DEFAULTS:
        raise ValueError(f"unknown environment name {name!r}")
    d = _DEFAULTS[name]
    params = dict(d["params"])
    params.update(overrides.pop("scenario_params", {}))
    kw = dict(
        scenario=d.get("scenario", name),
        grid_size=d["grid_size"],
        n_agents=d["n_agents"],
        n_ego=d["n_ego"],
        horizon=d["horizon"],
    )
    kw.update(overrides)
    return EnvSpec(scenario_params=params, **kw)


def make_env(spec) -> "GridEnv":
    """Build an environment from an EnvSpec or a named scenario string."""
    if isinstance(spec, str):
        spec = default_spec(spec)
    return GridEnv(spec)


def _manhattan(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


class GridEnv:
    def __init__(self, spec: EnvSpec):
        self.spec = spec
        w, h = spec.grid_size
        p = spec.scenario_params
        if spec.scenario in ("lbf1", "lbf4"):
            foods = p["foods"]
            if len(p["food_levels"]) != len(foods):
                raise ValueError("food_levels must match foods")
            if len(p["agent_levels"]) != spec.n_agents:
                raise ValueError("agent_levels must match n_agents")
            if len(p["spawns"]) < spec.n_agents:
                raise ValueError("not enough spawn cells")
            self.n_entities = len(foods)
            cells = list(foods) + list(p["spawns"])
        elif spec.scenario == "grid_pp":
            if p["n_prey"] < 1:
                raise ValueError("need at least one prey")
            if p["prey_behavior"] not in ("random", "flee"):
                raise ValueError(f"unknown prey behavior {p['prey_behavior']!r}")
            self.n_entities = p["n_prey"]
            cells = list(p.get("predator_spawns", []))
        else:
            landmarks = p["landmarks"]
            if len(landmarks) != spec.n_agents:
                raise ValueError("grid_cn needs one landmark per agent")
            self.n_entities = len(landmarks)
            cells = list(landmarks)
        for x, y in cells:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"cell ({x},{y}) outside the {w}x{h} grid")
        self.obs_dim = 2 + 2 * (spec.n_agents - 1) + 3 * self.n_entities + spec.n_agents
        self.n_actions = N_ACTIONS

    # -- lifecycle ------------------------------------------------------------

    def reset(self, rng: np.random.Generator):
        spec = self.spec
        w, h = spec.grid_size
        p = spec.scenario_params
        if spec.scenario in ("lbf1", "lbf4"):
            spawn_idx = rng.choice(len(p["spawns"]), size=spec.n_agents, replace=False)
            agents = [p["spawns"][i] for i in spawn_idx]
            entities = list(p["foods"])
        elif spec.scenario == "grid_pp":
            spawns = p.get("predator_spawns") or [(x, y) for x in range(w) for y in range(h)]
            spawn_idx = rng.choice(len(spawns), size=spec.n_agents, replace=False)
            agents = [spawns[i] for i in spawn_idx]
            free = [(x, y) for x in range(w) for y in range(h) if (x, y) not in agents]
            prey_idx = rng.choice(len(free), size=self.n_entities, replace=False)
            entities = [free[i] for i in prey_idx]
        else:
            landmarks = p["landmarks"]
            free = [(x, y) for x in range(w) for y in range(h) if (x, y) not in landmarks]
            spawn_idx = rng.choice(len(free), size=spec.n_agents, replace=False)
            agents = [free[i] for i in spawn_idx]
            entities = list(landmarks)
        state = EnvState(agent_cells=agents, entity_cells=entities,
                         entity_alive=[True] * self.n_entities)
        return state, self.observe(state)

    def is_terminal(self, state: EnvState) -> bool:
        if state.step >= self.spec.horizon:
            return True
        if self.spec.scenario in ("lbf1", "lbf4", "grid_pp"):
            return not any(state.entity_alive)
        return False

    def step(self, state: EnvState, joint_action, rng: np.random.Generator):
        spec = self.spec
        if self.is_terminal(state):
            raise RuntimeError("step() called on a terminal state")
        if len(joint_action) != spec.n_agents:
            raise ValueError("joint action length must equal n_agents")
        agents = self._move_agents(state.agent_cells, joint_action)
        entities = list(state.entity_cells)
        alive = list(state.entity_alive)
        reward = 0.0
        p = spec.scenario_params

        if spec.scenario in ("lbf1", "lbf4"):
            required = p.get("adjacency_required", 0)
            ok = spec.scenario != "lbf1" or state.adjacency_count >= required
            for e, cell in enumerate(entities):
                if not alive[e]:
                    continue
                lvl = sum(p["agent_levels"][i] for i, a in enumerate(agents)
                          if _manhattan(a, cell) <= 1)
                if lvl >= p["food_levels"][e] and ok:
                    reward += 1.0
                    alive[e] = False
        elif spec.scenario == "grid_pp":
            for e, cell in enumerate(entities):
                if alive[e] and all(_manhattan(a, cell) <= 1 for a in agents):
                    reward += 1.0
                    alive[e] = False
            for e in range(len(entities)):
                if alive[e]:
                    entities[e] = self._move_prey(entities[e], agents, rng)
        else:
            on = [sum(1 for a in agents if a == lm) for lm in entities]
            if all(c == 1 for c in on):
                reward += 1.0
            n = len(agents)
            for i in range(n):
                for j in range(i + 1, n):
                    if agents[i] == agents[j]:
                        reward -= 0.1

        adjacency = state.adjacency_count
        if spec.scenario == "lbf1" and _manhattan(agents[0], agents[1]) <= 1:
            adjacency += 1

        nxt = EnvState(agent_cells=agents, entity_cells=entities, entity_alive=alive,
                       step=state.step + 1, adjacency_count=adjacency)
        done = self.is_terminal(nxt)
        return nxt, StepResult(next_obs=self.observe(nxt), reward=reward, done=done)

    # -- movement -------------------------------------------------------------

    def _clip(self, cell):
        w, h = self.spec.grid_size
        return (min(max(cell[0], 0), w - 1), min(max(cell[1], 0), h - 1))

    def _move_agents(self, cells, joint_action):
        targets = []
        for cell, a in zip(cells, joint_action):
            a = int(a)
            if not (0 <= a < N_ACTIONS):
                raise ValueError(f"action index {a} out of range")
            dx, dy = MOVES[a]
            targets.append(self._clip((cell[0] + dx, cell[1] + dy)))
        # Two movers aiming at the same cell both stay; stepping onto a
        # stationary agent is allowed (that is a collision in grid_cn).
        moving = [i for i, t in enumerate(targets) if t != cells[i]]
        counts = {}
        for i in moving:
            counts[targets[i]] = counts.get(targets[i], 0) + 1
        return [targets[i] if (i in moving and counts[targets[i]] == 1) or i not in moving
                else cells[i] for i in range(len(cells))]

    def _move_prey(self, cell, predators, rng):
        if self.spec.scenario_params["prey_behavior"] == "random":
            dx, dy = MOVES[rng.integers(N_ACTIONS)]
            return self._clip((cell[0] + dx, cell[1] + dy))
        best, best_d = cell, -1
        for a in range(N_ACTIONS):
            dx, dy = MOVES[a]
            cand = self._clip((cell[0] + dx, cell[1] + dy))
            d = min(_manhattan(cand, pr) for pr in predators)
            if d > best_d:
                best, best_d = cand, d
        return best

    # -- observations ---------------------------------------------------------

    def observe(self, state: EnvState):
        w, h = self.spec.grid_size
        n = self.spec.n_agents
        sx, sy = max(w - 1, 1), max(h - 1, 1)
        obs = []
        for i in range(n):
            v = np.zeros(self.obs_dim)
            k = 0
            v[k:k + 2] = (state.agent_cells[i][0] / sx, state.agent_cells[i][1] / sy)
            k += 2
            for j in range(n):
                if j == i:
                    continue
                v[k:k + 2] = (state.agent_cells[j][0] / sx, state.agent_cells[j][1] / sy)
                k += 2
            for e in range(self.n_entities):
                if state.entity_alive[e]:
                    v[k:k + 3] = (state.entity_cells[e][0] / sx,
                                  state.entity_cells[e][1] / sy, 1.0)
                k += 3
            v[k + i] = 1.0
            obs.append(v)
        return obs
