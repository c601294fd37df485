"""Agent-in-environment loops shared by generation, training and evaluation."""
from __future__ import annotations

import numpy as np

from .data import BehaviorRecord, SubjectDataset
from .env import MDTEnv, TaskGraph, TaskSpec
from .rl import Agent, Observation, Transition, sample_action


def run_session(agent: Agent, spec: TaskSpec, rng: np.random.Generator, subject_id: str = "agent",
                provenance: dict | None = None, env: MDTEnv | None = None, events: list | None = None,
                start: bool = True) -> SubjectDataset:
    """Let ``agent`` play every trial of ``spec``; actions are sampled from ``rng``.

    ``events``, when given, receives one ``(goal, p, draw1, draw2)`` tuple per
    trial: the environment side of the session, for cross-agent comparisons.
    """
    env = env or MDTEnv(spec)
    if start:
        agent.start_task(env.graph, env)
    records = []
    for t in range(env.n_trials):
        goal = env.current_goal
        p_now = env.p
        unc = env.uncertainty
        s1 = env.current_state
        obs1 = Observation(s1, goal)
        a1 = sample_action(agent.act(obs1), rng)
        r1 = env.step(a1)
        agent.observe(Transition(obs1, a1, r1.reward, r1.next_state, False))
        obs2 = Observation(r1.next_state, goal)
        a2 = sample_action(agent.act(obs2), rng)
        r2 = env.step(a2)
        agent.observe(Transition(obs2, a2, r2.reward, r2.next_state, True))
        records.append(BehaviorRecord(subject_id, t, goal, unc, s1, a1, r1.next_state, a2, r2.next_state,
                                      r2.reward, p_now, block=0))
        if events is not None:
            events.append((goal, p_now, float(env.draws[t, 0]), float(env.draws[t, 1])))
        if t + 1 < env.n_trials:
            env.advance_trial()
    return SubjectDataset(subject_id, tuple(records), spec.task_id, spec.structure,
                          provenance or {"kind": "synthetic", "agent": agent.kind})


def replay_likelihood(agent: Agent, ds: SubjectDataset, graph: TaskGraph, start: bool = True) -> np.ndarray:
    """Per-trial probabilities the agent gives the recorded choices, shape ``(n, 2)``.

    The agent observes the recorded trajectory (not its own choices), so its
    internal state follows the subject's experience.
    """
    if start:
        agent.start_task(graph)
    out = np.empty((len(ds.records), 2))
    for i, r in enumerate(ds.records):
        obs1 = Observation(r.s1, r.goal)
        out[i, 0] = agent.act(obs1)[r.a1]
        agent.observe(Transition(obs1, r.a1, 0.0, r.s2, False))
        obs2 = Observation(r.s2, r.goal)
        out[i, 1] = agent.act(obs2)[r.a2]
        agent.observe(Transition(obs2, r.a2, r.reward, r.s3, True))
    return out
