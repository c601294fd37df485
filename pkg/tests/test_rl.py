import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdtlab.env import GOALS, TaskSpec, UncertaintyDynamics, ideal_for, load_graph, solve_values
from mdtlab.rl import (CHECKPOINT_VERSION, FrozenError, Observation, RandomAgent, SarsaAgent, Transition,
                       TransitionModel, forward_update, mb_values, n_observations, obs_from_index, obs_index,
                       random_agent_act, sample_action, sarsa_update, softmax_policy, state_digest)
from mdtlab.simulate import run_session

from oracles import expectation_values, sarsa_reference

TREE = load_graph("tree")
LADDER = load_graph("ladder")


def test_observation_index_bijective():
    seen = set()
    for s in range(9):
        for g in range(len(GOALS)):
            i = obs_index(s, g)
            assert obs_from_index(i) == Observation(s, g)
            seen.add(i)
    assert seen == set(range(n_observations(9)))


# ------------------------------------------------------------------ SARSA

def test_sarsa_alpha_zero_reports_delta():
    q = np.arange(8, dtype=float).reshape(4, 2)
    before = q.copy()
    d = sarsa_update(q, 1, 0, 5.0, 2, 1, alpha=0.0, gamma=0.5)
    assert np.array_equal(q, before)
    assert d == 5.0 + 0.5 * before[2, 1] - before[1, 0]


def test_sarsa_zero_table():
    q = np.zeros((4, 2))
    d = sarsa_update(q, 0, 1, 40.0, None, None, alpha=0.3, gamma=1.0)
    assert d == 40.0 and q[0, 1] == pytest.approx(12.0)


def test_sarsa_matches_straight_line_reference(rng):
    q = rng.normal(size=(36, 2)) * 5
    q0 = q.copy()
    steps = []
    for _ in range(100):
        s, a = int(rng.integers(36)), int(rng.integers(2))
        if rng.random() < 0.5:
            steps.append((s, a, float(rng.choice([0, 10, 20, 40])), None, None))
        else:
            steps.append((s, a, 0.0, int(rng.integers(36)), int(rng.integers(2))))
    deltas = [sarsa_update(q, *st_, alpha=0.15, gamma=0.9) for st_ in steps]
    ref, ref_d = sarsa_reference(q0, steps, 0.15, 0.9)
    assert np.allclose(q, ref, atol=1e-12, rtol=0)
    assert np.allclose(deltas, ref_d, atol=1e-12, rtol=0)


# ---------------------------------------------------------------- FORWARD

def test_forward_certain_successor_no_change():
    t = np.zeros((9, 2, 9))
    t[0, 0, 1] = 1.0
    before = t.copy()
    spe = forward_update(t, 0, 0, 1, 0.3)
    assert spe == 0.0 and np.array_equal(t, before)


def test_forward_hand_evaluated():
    m = TransitionModel.uniform(TREE, eta=0.2)
    s0, s1 = TREE.successors[(TREE.root, 0)]
    spe = m.update(TREE.root, 0, s0)
    assert spe == pytest.approx(0.5)
    assert m.t_hat[TREE.root, 0, s0] == pytest.approx(0.6)
    assert m.t_hat[TREE.root, 0, s1] == pytest.approx(0.4)


def test_forward_unknown_successor_enters_with_eta():
    m = TransitionModel.uniform(TREE, eta=0.25)
    other = [s for s in range(9) if s not in TREE.successors[(TREE.root, 0)]][0]
    m.update(TREE.root, 0, other)
    assert m.t_hat[TREE.root, 0, other] == pytest.approx(0.25)
    assert m.t_hat[TREE.root, 0].sum() == pytest.approx(1.0)


def test_forward_converges(rng):
    # stationary spread of the estimate is sqrt(eta / (2 - eta) * p (1 - p)) ~ 0.02 at eta = 0.01
    m = TransitionModel.uniform(TREE, eta=0.01)
    s0, s1 = TREE.successors[(TREE.root, 1)]
    trace = []
    for _ in range(10_000):
        m.update(TREE.root, 1, s0 if rng.random() < 0.9 else s1)
        trace.append(m.t_hat[TREE.root, 1, s0])
    assert abs(trace[-1] - 0.9) < 0.05
    assert abs(np.mean(trace[5000:]) - 0.9) < 0.01


def test_forward_eta_zero_noop(rng):
    m = TransitionModel.uniform(TREE, eta=0.0)
    before = m.t_hat.copy()
    for _ in range(50):
        s = int(rng.integers(5))
        m.update(s, int(rng.integers(2)), int(rng.integers(9)))
    # rows only change through eta; unseen successors with eta=0 stay at 0
    assert np.array_equal(m.t_hat, before)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1), st.integers(0, 8)), min_size=1, max_size=60),
       st.floats(0.0, 1.0))
def test_transition_rows_stay_on_simplex(obs, eta):
    m = TransitionModel.uniform(TREE, eta=eta)
    for s, a, nxt in obs:
        m.update(s, a, nxt)
        row = m.t_hat[s, a]
        assert abs(row.sum() - 1.0) <= 1e-9
        assert row.min() >= -1e-12


# ---------------------------------------------------------------- MB values

def _true_model(graph, p):
    t = np.zeros((9, 2, 9))
    for (s, a), (s0, s1) in graph.successors.items():
        t[s, a, s0] += p
        t[s, a, s1] += 1.0 - p
    return t


@pytest.mark.parametrize("graph", [TREE, LADDER])
@pytest.mark.parametrize("p", [0.9, 0.5, 0.3])
def test_mb_on_true_model_matches_ideal(graph, p):
    for g in range(4):
        q = mb_values(_true_model(graph, p), graph, g)
        ref, _ = solve_values(graph.successor_array(), graph.stage_of, graph.reward_table()[g], p)
        for s in range(9):
            if graph.stage_of[s] < 3:
                assert q[s] == pytest.approx(ref[s], abs=1e-12)
                if q[s, 0] != q[s, 1]:
                    assert int(q[s, 1] > q[s, 0]) == ideal_for(graph, p, g, s)[0]


def test_mb_unreachable_color_all_zero():
    d = TREE.to_dict()
    for tok in d["tokens"].values():
        if tok["color"] == "yellow":
            tok["color"] = "red"
    from mdtlab.env import TaskGraph
    g = TaskGraph.from_dict(d)
    q = mb_values(_true_model(g, 0.9), g, GOALS.index("yellow"))
    assert np.all(q == 0)


def test_mb_random_model_matches_enumeration(rng):
    for graph in (TREE, LADDER):
        for _ in range(10):
            # learned rows only put mass on next-stage states
            t = np.zeros((9, 2, 9))
            for s in range(9):
                if graph.stage_of[s] < 3:
                    nxt = [j for j in range(9) if graph.stage_of[j] == graph.stage_of[s] + 1]
                    t[s, :, nxt] = rng.random((len(nxt), 2))
            t /= np.maximum(t.sum(axis=2, keepdims=True), 1e-300)
            g = int(rng.integers(4))
            q = mb_values(t, graph, g)
            ref = expectation_values(t, graph, g)
            for s in range(9):
                if graph.stage_of[s] < 3:
                    assert q[s] == pytest.approx(ref[s], abs=1e-10)


# ----------------------------------------------------------------- softmax

def test_softmax_cases():
    assert np.allclose(softmax_policy([3.0, 3.0], 2.0), [0.5, 0.5])
    assert np.allclose(softmax_policy([1.0, 7.0], 0.0), [0.5, 0.5])
    e = math.e
    assert np.allclose(softmax_policy([1.0, 0.0], 1.0), [e / (e + 1), 1 / (e + 1)], atol=1e-15)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2), st.floats(0, 50))
def test_softmax_is_distribution(values, beta):
    p = softmax_policy(values, beta)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12 and np.all(np.isfinite(p))


# ------------------------------------------------------------------ random

def test_random_agent_uniform():
    assert np.array_equal(random_agent_act(Observation(0, 0)), [0.5, 0.5])
    rng = np.random.default_rng(1)
    left = sum(sample_action(random_agent_act(), rng) == 0 for _ in range(100_000))
    assert abs(left / 100_000 - 0.5) < 0.01


def test_random_agent_checkpoint_restore():
    a = RandomAgent()
    b = RandomAgent.from_checkpoint(json.loads(json.dumps(a.checkpoint())))
    for s in range(9):
        assert np.array_equal(a.act(Observation(s, 1)), b.act(Observation(s, 1)))


# ------------------------------------------------------------- SARSA agent

def test_sarsa_agent_checkpoint_bit_exact():
    spec = TaskSpec(dynamics=UncertaintyDynamics("fixed", fixed_p=0.8), n_trials=120, env_seed=5)
    a = SarsaAgent(alpha=0.3, inv_temp=0.4)
    run_session(a, spec, np.random.default_rng(2))
    d = json.loads(json.dumps(a.checkpoint()))
    assert d["version"] == CHECKPOINT_VERSION and d["kind"] == "sarsa"
    b = SarsaAgent.from_checkpoint(d)
    assert np.array_equal(a.q, b.q)
    assert state_digest(a.learnable_state()) == state_digest(b.learnable_state())
    ds_a = run_session(a, spec.with_seed(9), np.random.default_rng(7))
    ds_b = run_session(b, spec.with_seed(9), np.random.default_rng(7))
    assert ds_a.records == ds_b.records


def test_sarsa_agent_frozen_table_read_only():
    a = SarsaAgent()
    a.freeze()
    with pytest.raises(ValueError):
        a.q[0, 0] = 1.0
    with pytest.raises(FrozenError):
        a._check_mutable()


@given(st.integers(0, 2**31 - 1))
def test_every_act_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    a = SarsaAgent(alpha=0.2, inv_temp=float(rng.uniform(0, 5)))
    a.q[:] = rng.normal(size=a.q.shape) * 40
    for _ in range(20):
        p = a.act(Observation(int(rng.integers(5)), int(rng.integers(4))))
        assert p.min() >= 0 and abs(p.sum() - 1.0) <= 1e-12


def test_sarsa_agent_learns_terminal_value():
    a = SarsaAgent(alpha=0.5)
    o = Observation(1, 0)
    a.observe(Transition(Observation(0, 0), 0, 0.0, 1, False))
    a.observe(Transition(o, 1, 40.0, 6, True))
    assert a.q[obs_index(1, 0), 1] == pytest.approx(20.0)
    assert a.q[obs_index(0, 0), 0] == 0.0
    a.observe(Transition(Observation(0, 0), 0, 0.0, 1, False))
    a.observe(Transition(o, 1, 40.0, 6, True))
    # stage-1 entry bootstraps from the stage-2 value learned so far
    assert a.q[obs_index(0, 0), 0] == pytest.approx(0.5 * 20.0)
