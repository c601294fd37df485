"""Tabular learners, observation encoding and the agent contract.

All agents share one small protocol used by the simulation loops:

``start_task(graph, env=None)``
    reset fast (within-session) state for a fresh session on ``graph``.
``act(obs) -> ndarray``
    probability of Left and Right at an :class:`Observation`.
``observe(transition)``
    feed back one step of experience.
``checkpoint() / from_checkpoint(d)``
    JSON-ready dict of every array and parameter; restore is bit-exact.

Agents hold no random stream of their own; action sampling happens in the
caller with a stream it owns, so restoring a checkpoint and replaying the
same stream reproduces behavior exactly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .env import GOALS, TaskGraph

CHECKPOINT_VERSION = "mdtlab-checkpoint/1"
N_GOALS = len(GOALS)


class FrozenError(RuntimeError):
    """Learnable state of a frozen agent was about to change."""


@dataclass(frozen=True)
class Observation:
    state: int
    goal: int


@dataclass(frozen=True)
class Transition:
    """One step: at ``obs`` the agent took ``action`` and landed on ``next_state``."""

    obs: Observation
    action: int
    reward: float
    next_state: int
    done: bool


def obs_index(state: int, goal: int) -> int:
    return state * N_GOALS + goal


def obs_from_index(index: int) -> Observation:
    return Observation(index // N_GOALS, index % N_GOALS)


def n_observations(n_states: int = 9) -> int:
    return n_states * N_GOALS


def sarsa_update(q: np.ndarray, s: int, a: int, r: float, s_next: int | None, a_next: int | None,
                 alpha: float, gamma: float = 1.0) -> float:
    """In-place SARSA backup of ``q[s, a]``; returns the reward prediction error.

    ``s_next=None`` marks a terminal transition (no bootstrap term).
    """
    nxt = 0.0 if s_next is None else q[s_next, a_next]
    delta = r + gamma * nxt - q[s, a]
    q[s, a] += alpha * delta
    return float(delta)


class TransitionModel:
    """Learned state-transition probabilities ``t_hat[s, a, s']``."""

    def __init__(self, t_hat: np.ndarray, eta: float = 0.2):
        self.t_hat = t_hat
        self.eta = eta

    @classmethod
    def uniform(cls, graph: TaskGraph, eta: float = 0.2) -> "TransitionModel":
        t = np.zeros((graph.n_states, 2, graph.n_states))
        for (s, a), (s0, s1) in graph.successors.items():
            t[s, a, s0] += 0.5
            t[s, a, s1] += 0.5
        return cls(t, eta)

    def update(self, s: int, a: int, s_next: int) -> float:
        return forward_update(self.t_hat, s, a, s_next, self.eta)


def forward_update(t_hat: np.ndarray, s: int, a: int, s_next: int, eta: float) -> float:
    """State-prediction-error update of one transition row, in place.

    The observed successor moves toward 1 by ``eta * spe`` and every other
    entry shrinks by ``(1 - eta)``, so the row stays on the simplex. A
    successor the row never predicted enters with probability ``eta``.
    """
    row = t_hat[s, a]
    spe = 1.0 - row[s_next]
    row *= 1.0 - eta
    row[s_next] += eta
    return float(spe)


def mb_values(t_hat: np.ndarray, graph: TaskGraph, goal: int) -> np.ndarray:
    """Two-step Bellman backup over a learned model; returns ``q[s, a]`` for all states."""
    payoff = graph.reward_table()[goal]
    return mb_values_from_payoff(t_hat, graph.stage_of, payoff)


def mb_values_from_payoff(t_hat: np.ndarray, stage_of, payoff: np.ndarray) -> np.ndarray:
    n = len(stage_of)
    q = np.zeros((n, 2))
    v = np.where(np.asarray(stage_of) == 3, payoff, 0.0)
    for stage in (2, 1):
        idx = [s for s in range(n) if stage_of[s] == stage]
        q[idx] = t_hat[idx] @ v
        v = v.copy()
        v[idx] = q[idx].max(axis=1)
    return q


def softmax_policy(values, inv_temp: float) -> np.ndarray:
    z = inv_temp * np.asarray(values, dtype=float)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def random_agent_act(obs: Observation | None = None) -> np.ndarray:
    return np.array([0.5, 0.5])


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    return 0 if rng.random() < probs[0] else 1


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def decode_array(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def state_digest(arrays: dict) -> str:
    """Hash of a dict of arrays; used to prove frozen state did not move."""
    h = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[key], dtype=np.float64))
        h.update(key.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class Agent:
    """Base class for the agent protocol described in the module docstring."""

    kind = "agent"
    frozen = False

    def start_task(self, graph: TaskGraph, env=None) -> None:
        pass

    def act(self, obs: Observation) -> np.ndarray:
        raise NotImplementedError

    def observe(self, tr: Transition) -> None:
        pass

    def learnable_state(self) -> dict:
        return {}

    def freeze(self) -> "Agent":
        """Make learnable state read-only; fast state keeps evolving."""
        self.frozen = True
        for a in self.learnable_state().values():
            if isinstance(a, np.ndarray):
                a.flags.writeable = False
        return self

    def _check_mutable(self) -> None:
        if self.frozen:
            raise FrozenError(f"{self.kind} agent is frozen; learnable state is read-only")

    def checkpoint(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "kind": self.kind, "params": {}, "arrays": {}}

    @classmethod
    def from_checkpoint(cls, d: dict) -> "Agent":
        return cls()


class RandomAgent(Agent):
    """Control agent: Left and Right with equal probability, always."""

    kind = "random"

    def act(self, obs):
        return random_agent_act(obs)


class IdealAgent(Agent):
    """Acts on the true transition probabilities and goal of the bound environment."""

    kind = "ideal"

    def __init__(self):
        self.env = None

    def start_task(self, graph, env=None):
        self.env = env

    def act(self, obs):
        a, _ = self.env.ideal_action(obs.state)
        out = np.zeros(2)
        out[a] = 1.0
        return out


class SarsaAgent(Agent):
    """Model-free tabular SARSA with softmax choice over goal-indexed observations."""

    kind = "sarsa"

    def __init__(self, alpha: float = 0.1, inv_temp: float = 0.2, gamma: float = 1.0, n_states: int = 9):
        self.alpha = alpha
        self.inv_temp = inv_temp
        self.gamma = gamma
        self.n_states = n_states
        self.q = np.zeros((n_observations(n_states), 2))
        self._pending = None
        self.last_rpe = 0.0

    def start_task(self, graph, env=None):
        self._pending = None

    def act(self, obs):
        return softmax_policy(self.q[obs_index(obs.state, obs.goal)], self.inv_temp)

    def observe(self, tr):
        if self.frozen:
            return
        o = obs_index(tr.obs.state, tr.obs.goal)
        if self._pending is not None:
            po, pa, pr = self._pending
            self.last_rpe = sarsa_update(self.q, po, pa, pr, o, tr.action, self.alpha, self.gamma)
            self._pending = None
        if tr.done:
            self.last_rpe = sarsa_update(self.q, o, tr.action, tr.reward, None, None, self.alpha, self.gamma)
        else:
            self._pending = (o, tr.action, tr.reward)

    def learnable_state(self):
        return {"q": self.q}

    def checkpoint(self):
        d = super().checkpoint()
        d["params"] = {"alpha": self.alpha, "inv_temp": self.inv_temp, "gamma": self.gamma,
                       "n_states": self.n_states}
        d["arrays"] = {"q": encode_array(self.q)}
        return d

    @classmethod
    def from_checkpoint(cls, d):
        p = d["params"]
        agent = cls(p["alpha"], p["inv_temp"], p["gamma"], p["n_states"])
        agent.q = decode_array(d["arrays"]["q"])
        return agent
