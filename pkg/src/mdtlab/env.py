"""Two-stage Markov decision tasks with goal and transition-uncertainty manipulation.

States are 0-based internally (``S1`` is state 0); files and CSVs use the
1-based ``S1..S9`` names. Actions are 0 (Left) and 1 (Right).

Every environment event (goal per trial, transition probability per trial,
the uniform draw behind every transition) is materialized from ``env_seed``
when the environment is built, so the event sequence never depends on what
an agent does and two agents run on the same spec see the same world.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

LEFT, RIGHT = 0, 1
ACTIONS = ("L", "R")
GOALS = ("flexible", "red", "blue", "yellow")
FLEXIBLE = 0
REWARD_SET = (0, 10, 20, 40)
DYNAMICS_KINDS = ("fixed", "drift", "switch", "driftswitch")
STRUCTURES = ("tree", "ladder")
TASK_SCHEMA = "mdt-task/1"
GRAPH_SCHEMA = "mdt-graph/1"
# max(p, 1 - p) below this counts as the high-uncertainty condition
HIGH_UNCERTAINTY_CUTOFF = 0.7


class GraphError(ValueError):
    """Task graph violates a structural invariant."""


class ProtocolError(RuntimeError):
    """Environment used out of order (e.g. stepping a finished trial)."""


class SessionComplete(Exception):
    """Raised when advancing past the last trial."""


def state_name(s: int) -> str:
    return f"S{s + 1}"


def parse_state(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) - 1
    if not (isinstance(name, str) and name.startswith("S")):
        raise GraphError(f"bad state name {name!r}")
    return int(name[1:]) - 1


def goal_index(goal) -> int:
    if isinstance(goal, (int, np.integer)):
        if not 0 <= goal < len(GOALS):
            raise ValueError(f"goal index {goal} out of range")
        return int(goal)
    try:
        return GOALS.index(goal)
    except ValueError:
        raise ValueError(f"unknown goal condition {goal!r}") from None


@dataclass(frozen=True)
class TaskGraph:
    """State graph of a two-stage task.

    ``successors`` maps ``(state, action)`` to the ordered pair of candidate
    next states; the first candidate is the one taken with probability ``p``.
    """

    n_states: int
    stage_of: tuple
    successors: dict
    token_value: dict
    token_color: dict
    name: str = "custom"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.stage_of) != self.n_states:
            raise GraphError("stage_of must list a stage for every state")
        for s, st in enumerate(self.stage_of):
            if st not in (1, 2, 3):
                raise GraphError(f"{state_name(s)} has invalid stage {st}")
        if self.stage_of.count(1) != 1:
            raise GraphError("graph needs exactly one stage-1 (root) state")
        for s, st in enumerate(self.stage_of):
            if st == 3:
                if self.successors.get((s, LEFT)) or self.successors.get((s, RIGHT)):
                    raise GraphError(f"terminal {state_name(s)} has successors")
                v = self.token_value.get(s)
                if v not in REWARD_SET:
                    raise GraphError(f"terminal {state_name(s)} token value {v!r} not in {REWARD_SET}")
                continue
            for a in (LEFT, RIGHT):
                succ = self.successors.get((s, a))
                if succ is None:
                    raise GraphError(f"missing successor for ({state_name(s)}, {ACTIONS[a]})")
                if len(succ) != 2:
                    raise GraphError(
                        f"({state_name(s)}, {ACTIONS[a]}) has {len(succ)} candidate successors, need 2")
                for nxt in succ:
                    if not 0 <= nxt < self.n_states or self.stage_of[nxt] != st + 1:
                        raise GraphError(
                            f"({state_name(s)}, {ACTIONS[a]}) -> {state_name(nxt)} skips or reverses a stage")

    @property
    def root(self) -> int:
        return self.stage_of.index(1)

    @property
    def terminals(self) -> list:
        return [s for s, st in enumerate(self.stage_of) if st == 3]

    def successor_array(self) -> np.ndarray:
        """(n_states, 2, 2) int array of candidate successors, -1 for terminals."""
        out = np.full((self.n_states, 2, 2), -1, dtype=np.int64)
        for (s, a), succ in self.successors.items():
            out[s, a] = succ
        return out

    def reward_table(self) -> np.ndarray:
        """(n_goals, n_states) payoff for landing on each state under each goal."""
        table = np.zeros((len(GOALS), self.n_states))
        for s in self.terminals:
            v = self.token_value[s]
            table[FLEXIBLE, s] = v
            c = self.token_color.get(s)
            if c in GOALS:
                table[GOALS.index(c), s] = v
        return table

    @classmethod
    def from_dict(cls, d: dict) -> "TaskGraph":
        n = int(d["n_states"])
        stage = [0] * n
        for name, st in d["stage"].items():
            stage[parse_state(name)] = int(st)
        succ = {}
        for name, acts in d.get("successors", {}).items():
            for a_name, pair in acts.items():
                succ[(parse_state(name), ACTIONS.index(a_name))] = tuple(parse_state(x) for x in pair)
        values, colors = {}, {}
        for name, tok in d.get("tokens", {}).items():
            values[parse_state(name)] = tok["value"]
            colors[parse_state(name)] = tok.get("color", "none")
        return cls(n, tuple(stage), succ, values, colors, d.get("name", "custom"))

    def to_dict(self) -> dict:
        succ: dict = {}
        for (s, a), pair in sorted(self.successors.items()):
            succ.setdefault(state_name(s), {})[ACTIONS[a]] = [state_name(x) for x in pair]
        return {
            "schema": GRAPH_SCHEMA,
            "name": self.name,
            "n_states": self.n_states,
            "stage": {state_name(s): st for s, st in enumerate(self.stage_of)},
            "successors": succ,
            "tokens": {state_name(s): {"value": self.token_value[s], "color": self.token_color.get(s, "none")}
                       for s in sorted(self.token_value)},
        }


def load_graph(structure: str) -> TaskGraph:
    if structure not in STRUCTURES:
        raise GraphError(f"unknown structure {structure!r}")
    text = resources.files("mdtlab").joinpath("data", "graphs", f"{structure}.json").read_text()
    return TaskGraph.from_dict(json.loads(text))


@dataclass(frozen=True)
class UncertaintyDynamics:
    kind: str = "fixed"
    fixed_p: float = 0.9
    drift_sigma: float = 0.025
    drift_bounds: tuple = (0.2, 0.8)
    switch_low: tuple = (0.9, 0.1)
    switch_high: tuple = (0.5, 0.5)
    switch_block: int = 20

    def __post_init__(self):
        if self.kind not in DYNAMICS_KINDS:
            raise ValueError(f"unknown dynamics kind {self.kind!r}")
        lo, hi = self.drift_bounds
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"drift bounds {self.drift_bounds} not an interval in [0, 1]")
        for pair in (self.switch_low, self.switch_high):
            if len(pair) != 2 or abs(pair[0] + pair[1] - 1.0) > 1e-12 or min(pair) < 0:
                raise ValueError(f"switch probabilities {pair} must be a distribution over two successors")
        if not 0.0 <= self.fixed_p <= 1.0:
            raise ValueError("fixed_p must lie in [0, 1]")
        if self.drift_sigma < 0 or self.switch_block < 1:
            raise ValueError("drift_sigma must be >= 0 and switch_block >= 1")
        if self.kind == "drift" and not lo <= self.fixed_p <= hi:
            raise ValueError("drift start (fixed_p) must lie inside drift_bounds")
        if self.kind == "driftswitch":
            for p in (self.switch_low[0], self.switch_high[0]):
                if not lo <= p <= hi:
                    raise ValueError("switch regimes must lie inside drift_bounds for driftswitch")


def reflect(p: float, lo: float, hi: float) -> float:
    if hi - lo <= 0:
        return lo
    while p < lo or p > hi:
        if p < lo:
            p = 2 * lo - p
        if p > hi:
            p = 2 * hi - p
    return p


def transition_schedule(dyn: UncertaintyDynamics, n_trials: int, rng: np.random.Generator) -> np.ndarray:
    """Probability of the first candidate successor on every trial."""
    p = np.empty(n_trials)
    lo, hi = dyn.drift_bounds
    if dyn.kind == "fixed":
        p[:] = dyn.fixed_p
        return p
    if dyn.kind == "switch":
        for t in range(n_trials):
            p[t] = dyn.switch_low[0] if (t // dyn.switch_block) % 2 == 0 else dyn.switch_high[0]
        return p
    noise = rng.normal(0.0, dyn.drift_sigma, size=n_trials)
    cur = dyn.fixed_p if dyn.kind == "drift" else dyn.switch_low[0]
    for t in range(n_trials):
        if t > 0:
            if dyn.kind == "driftswitch" and t % dyn.switch_block == 0:
                cur = dyn.switch_low[0] if (t // dyn.switch_block) % 2 == 0 else dyn.switch_high[0]
            else:
                cur = reflect(cur + noise[t], lo, hi)
        p[t] = cur
    return p


@dataclass(frozen=True)
class TaskSpec:
    """Declarative description of one task: graph, dynamics, goals, length, seed.

    ``goal_schedule`` is either an explicit sequence of goal names (at least
    ``n_trials`` long) or ``None``, in which case goals are drawn i.i.d.
    uniformly from ``goal_alphabet`` using the environment seed.
    """

    structure: str = "tree"
    dynamics: UncertaintyDynamics = field(default_factory=UncertaintyDynamics)
    n_trials: int = 200
    env_seed: int = 0
    goal_alphabet: tuple = GOALS
    goal_schedule: tuple | None = None
    task_id: str = "custom"
    name: str = ""
    graph: TaskGraph | None = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise GraphError(f"unknown structure {self.structure!r}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be positive")
        for g in self.goal_alphabet:
            goal_index(g)
        if self.goal_schedule is not None:
            if len(self.goal_schedule) < self.n_trials:
                raise ValueError("goal_schedule shorter than n_trials")
            for g in self.goal_schedule:
                goal_index(g)

    def task_graph(self) -> TaskGraph:
        return self.graph if self.graph is not None else load_graph(self.structure)

    def with_seed(self, seed: int) -> "TaskSpec":
        return dataclasses.replace(self, env_seed=int(seed))

    def with_trials(self, n_trials: int) -> "TaskSpec":
        return dataclasses.replace(self, n_trials=int(n_trials))

    def to_dict(self) -> dict:
        d = {
            "schema": TASK_SCHEMA,
            "task_id": self.task_id,
            "name": self.name,
            "structure": self.structure,
            "dynamics": {
                "kind": self.dynamics.kind,
                "fixed_p": self.dynamics.fixed_p,
                "drift_sigma": self.dynamics.drift_sigma,
                "drift_bounds": list(self.dynamics.drift_bounds),
                "switch_low": list(self.dynamics.switch_low),
                "switch_high": list(self.dynamics.switch_high),
                "switch_block": self.dynamics.switch_block,
            },
            "goal_alphabet": list(self.goal_alphabet),
            "goal_schedule": None if self.goal_schedule is None else list(self.goal_schedule),
            "n_trials": self.n_trials,
            "env_seed": self.env_seed,
        }
        if self.graph is not None:
            d["graph"] = self.graph.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        if d.get("schema") != TASK_SCHEMA:
            raise ValueError(f"unsupported task schema {d.get('schema')!r}")
        dyn = d.get("dynamics", {})
        dynamics = UncertaintyDynamics(
            kind=dyn.get("kind", "fixed"),
            fixed_p=dyn.get("fixed_p", 0.9),
            drift_sigma=dyn.get("drift_sigma", 0.025),
            drift_bounds=tuple(dyn.get("drift_bounds", (0.2, 0.8))),
            switch_low=tuple(dyn.get("switch_low", (0.9, 0.1))),
            switch_high=tuple(dyn.get("switch_high", (0.5, 0.5))),
            switch_block=dyn.get("switch_block", 20),
        )
        sched = d.get("goal_schedule")
        return cls(
            structure=d.get("structure", "tree"),
            dynamics=dynamics,
            n_trials=d.get("n_trials", 200),
            env_seed=d.get("env_seed", 0),
            goal_alphabet=tuple(d.get("goal_alphabet", GOALS)),
            goal_schedule=None if sched is None else tuple(sched),
            task_id=d.get("task_id", "custom"),
            name=d.get("name", ""),
            graph=TaskGraph.from_dict(d["graph"]) if d.get("graph") else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TaskSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def goal_rewards(graph: TaskGraph, goal: int) -> np.ndarray:
    return graph.reward_table()[goal]


def solve_values(succ: np.ndarray, stage_of: Sequence[int], payoff: np.ndarray, p: float):
    """Finite-horizon backup under the first-successor probability ``p``.

    Returns ``(q, v)``: ``q[s, a]`` action values for non-terminal states and
    ``v[s]`` state values (payoff at terminals).
    """
    n = len(stage_of)
    v = np.zeros(n)
    q = np.zeros((n, 2))
    for s in range(n):
        if stage_of[s] == 3:
            v[s] = payoff[s]
    for stage in (2, 1):
        for s in range(n):
            if stage_of[s] != stage:
                continue
            for a in (0, 1):
                s0, s1 = succ[s, a]
                q[s, a] = p * v[s0] + (1.0 - p) * v[s1]
            v[s] = max(q[s, 0], q[s, 1])
    return q, v


@dataclass(frozen=True)
class StepResult:
    next_state: int
    stage: int
    reward: float
    trial_done: bool
    token_color_collected: str | None = None


class MDTEnv:
    """Mutable environment state for one session of a task."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.graph = spec.task_graph()
        self.succ = self.graph.successor_array()
        self.stage_of = self.graph.stage_of
        self.root = self.graph.root
        self._payoff = self.graph.reward_table()
        self._colors = self.graph.token_color
        ss = np.random.SeedSequence(int(spec.env_seed) & (2**64 - 1))
        goal_ss, dyn_ss, draw_ss = ss.spawn(3)
        n = spec.n_trials
        if spec.goal_schedule is not None:
            self.goals = np.array([goal_index(g) for g in spec.goal_schedule[:n]], dtype=np.int64)
        else:
            alphabet = np.array([goal_index(g) for g in spec.goal_alphabet], dtype=np.int64)
            self.goals = alphabet[np.random.default_rng(goal_ss).integers(0, len(alphabet), size=n)]
        self.p_schedule = transition_schedule(spec.dynamics, n, np.random.default_rng(dyn_ss))
        self.draws = np.random.default_rng(draw_ss).random((n, 2))
        self._value_cache: dict = {}
        self.trial_index = 0
        self.current_state = self.root
        self.trial_done = False
        self._step_in_trial = 0

    @property
    def n_trials(self) -> int:
        return self.spec.n_trials

    @property
    def current_goal(self) -> int:
        return int(self.goals[self.trial_index])

    @property
    def p(self) -> float:
        return float(self.p_schedule[self.trial_index])

    @property
    def uncertainty(self) -> int:
        """1 for the high-uncertainty condition on the current trial, else 0."""
        return uncertainty_label(self.p)

    @property
    def current_transition_matrix(self) -> dict:
        p = self.p
        return {key: (p, 1.0 - p) for key in self.graph.successors}

    def step(self, action: int):
        if self.trial_done or self.stage_of[self.current_state] == 3:
            raise ProtocolError("step called on a terminal state; call advance_trial first")
        if action not in (LEFT, RIGHT):
            raise ValueError(f"action must be 0 (Left) or 1 (Right), got {action!r}")
        first, second = self.succ[self.current_state, action]
        u = self.draws[self.trial_index, self._step_in_trial]
        nxt = int(first if u < self.p else second)
        self._step_in_trial += 1
        self.current_state = nxt
        stage = self.stage_of[nxt]
        reward = 0.0
        color = None
        if stage == 3:
            self.trial_done = True
            reward = float(self._payoff[self.current_goal, nxt])
            color = self._colors.get(nxt)
        return StepResult(nxt, stage, reward, self.trial_done, color)

    def advance_trial(self) -> "MDTEnv":
        if not self.trial_done:
            raise ProtocolError("advance_trial before the trial finished")
        if self.trial_index + 1 >= self.n_trials:
            raise SessionComplete(f"session of {self.n_trials} trials complete")
        self.trial_index += 1
        self.current_state = self.root
        self.trial_done = False
        self._step_in_trial = 0
        return self

    def _values(self, trial: int | None = None):
        t = self.trial_index if trial is None else trial
        key = (float(self.p_schedule[t]), int(self.goals[t]))
        hit = self._value_cache.get(key)
        if hit is None:
            hit = solve_values(self.succ, self.stage_of, self._payoff[key[1]], key[0])
            self._value_cache[key] = hit
        return hit

    def ideal_action(self, state: int | None = None, trial: int | None = None):
        """Best action under the true transition probability and goal; ties go Left."""
        s = self.current_state if state is None else state
        if self.stage_of[s] == 3:
            raise ProtocolError("no action at a terminal state")
        q, _ = self._values(trial)
        values = (float(q[s, 0]), float(q[s, 1]))
        return (LEFT if values[0] >= values[1] else RIGHT), values

    def max_trial_value(self, trial: int | None = None) -> float:
        _, v = self._values(trial)
        return float(v[self.root])


def uncertainty_label(p: float) -> int:
    return int(max(p, 1.0 - p) < HIGH_UNCERTAINTY_CUTOFF)


def new_env(spec: TaskSpec) -> MDTEnv:
    return MDTEnv(spec)


def step(env: MDTEnv, action: int):
    return env.step(action)


def advance_trial(env: MDTEnv) -> MDTEnv:
    return env.advance_trial()


def ideal_action(env: MDTEnv, state: int | None = None):
    return env.ideal_action(state)


def max_trial_value(env: MDTEnv) -> float:
    return env.max_trial_value()


def ideal_for(graph: TaskGraph, p: float, goal: int, state: int):
    """Ideal action at ``state`` for a trial with first-successor probability ``p``."""
    q, _ = solve_values(graph.successor_array(), graph.stage_of, graph.reward_table()[goal], p)
    return (LEFT if q[state, 0] >= q[state, 1] else RIGHT), (float(q[state, 0]), float(q[state, 1]))


def original_task(n_trials: int = 400, env_seed: int = 0) -> TaskSpec:
    """The original two-stage MDT: tree graph, switching (0.9, 0.1)/(0.5, 0.5)."""
    return dataclasses.replace(load_suite()[-1], n_trials=n_trials, env_seed=env_seed)


def canonical_suite() -> list:
    """The ten generalization tasks T1..T10, built from code (see ``load_suite``)."""
    fixed = lambda p: UncertaintyDynamics("fixed", fixed_p=p)
    drift = UncertaintyDynamics("drift", fixed_p=0.5, drift_sigma=0.025, drift_bounds=(0.2, 0.8))
    switch = lambda block: UncertaintyDynamics("switch", switch_block=block)
    dswitch = UncertaintyDynamics("driftswitch", drift_sigma=0.025, drift_bounds=(0.05, 0.95), switch_block=20)
    rows = [
        ("T1", "two-step (fixed 0.7, flexible goals)", "tree", fixed(0.7), ("flexible",)),
        ("T2", "ladder / fixed", "ladder", fixed(0.9), GOALS),
        ("T3", "ladder / drift", "ladder", drift, GOALS),
        ("T4", "ladder / switch", "ladder", switch(20), GOALS),
        ("T5", "ladder / drift+switch", "ladder", dswitch, GOALS),
        ("T6", "tree / fixed", "tree", fixed(0.9), GOALS),
        ("T7", "tree / drift", "tree", drift, GOALS),
        ("T8", "tree / fast switch", "tree", switch(10), GOALS),
        ("T9", "tree / drift+switch", "tree", dswitch, GOALS),
        ("T10", "original two-stage MDT", "tree", switch(20), GOALS),
    ]
    return [TaskSpec(structure=st, dynamics=dyn, n_trials=200, env_seed=1000 + i, goal_alphabet=tuple(alpha),
                     task_id=tid, name=name)
            for i, (tid, name, st, dyn, alpha) in enumerate(rows, start=1)]


def load_suite() -> list:
    """The ten shipped task files, in T1..T10 order."""
    root = resources.files("mdtlab").joinpath("data", "tasks")
    return [TaskSpec.from_dict(json.loads(root.joinpath(f"T{i}.json").read_text())) for i in range(1, 11)]
