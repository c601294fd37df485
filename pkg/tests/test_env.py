import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdtlab.env import (GOALS, REWARD_SET, GraphError, ProtocolError, SessionComplete, TaskGraph, TaskSpec,
                        UncertaintyDynamics, advance_trial, canonical_suite, ideal_action, load_graph, load_suite,
                        max_trial_value, new_env, original_task, reflect, step, transition_schedule,
                        uncertainty_label)
from mdtlab.analysis import build_oracle, normalized_reward
from mdtlab.rl import IdealAgent
from mdtlab.simulate import run_session

from oracles import brute_force_values


def _play(env, a1, a2):
    r1 = step(env, a1)
    r2 = step(env, a2)
    return r1, r2


def test_tree_stage_counts():
    g = load_graph("tree")
    assert g.n_states == 9
    counts = {k: g.stage_of.count(k) for k in (1, 2, 3)}
    assert counts == {1: 1, 2: 4, 3: 4}
    assert sorted(g.token_value[s] for s in g.terminals) == sorted(REWARD_SET)


def test_ladder_shares_a_common_successor():
    g = load_graph("ladder")
    left = set(g.successors[(g.root, 0)])
    right = set(g.successors[(g.root, 1)])
    assert left & right


def test_three_successors_rejected():
    d = load_graph("tree").to_dict()
    d["successors"]["S1"]["L"] = ["S2", "S3", "S4"]
    with pytest.raises(GraphError, match="3 candidate successors"):
        TaskGraph.from_dict(d)


def test_missing_successor_names_state_and_action():
    d = load_graph("tree").to_dict()
    del d["successors"]["S2"]["R"]
    with pytest.raises(GraphError, match=r"\(S2, R\)"):
        TaskGraph.from_dict(d)


def test_stage_skip_rejected():
    d = load_graph("tree").to_dict()
    term = [k for k, v in d["stage"].items() if v == 3][0]
    d["successors"]["S1"]["L"] = [term, d["successors"]["S1"]["L"][1]]
    with pytest.raises(GraphError, match="skips or reverses"):
        TaskGraph.from_dict(d)


def test_same_seed_same_schedule():
    spec = load_suite()[8]
    a, b = new_env(spec), new_env(spec)
    assert np.array_equal(a.goals, b.goals)
    assert np.array_equal(a.p_schedule, b.p_schedule)
    assert np.array_equal(a.draws, b.draws)
    c = new_env(spec.with_seed(spec.env_seed + 1))
    assert not np.array_equal(a.draws, c.draws)


def test_degenerate_probability_always_first():
    spec = TaskSpec(dynamics=UncertaintyDynamics("fixed", fixed_p=1.0), n_trials=300, env_seed=4)
    env = new_env(spec)
    g = env.graph
    for t in range(300):
        r1, r2 = _play(env, t % 2, (t // 2) % 2)
        assert r1.next_state == g.successors[(g.root, t % 2)][0]
        if t + 1 < 300:
            advance_trial(env)


def test_first_successor_frequency():
    spec = TaskSpec(dynamics=UncertaintyDynamics("fixed", fixed_p=0.9), n_trials=50_000, env_seed=11)
    env = new_env(spec)
    g = env.graph
    first = 0
    for t in range(spec.n_trials):
        r1, r2 = _play(env, 0, 1)
        first += r1.next_state == g.successors[(g.root, 0)][0]
        first += r2.next_state == g.successors[(r1.next_state, 1)][0]
        if t + 1 < spec.n_trials:
            advance_trial(env)
    assert abs(first / (2 * spec.n_trials) - 0.9) < 0.01


def test_flexible_goal_pays_token_value():
    g = load_graph("tree")
    forty = [s for s in g.terminals if g.token_value[s] == 40][0]
    spec = TaskSpec(dynamics=UncertaintyDynamics("fixed", fixed_p=1.0), n_trials=1,
                    goal_schedule=("flexible",))
    # find the deterministic path to the 40 token
    for a1, a2 in itertools.product((0, 1), repeat=2):
        env = new_env(spec)
        r1, r2 = _play(env, a1, a2)
        if r2.next_state == forty:
            assert r2.reward == 40 and r2.trial_done and r2.stage == 3
            assert r1.reward == 0 and not r1.trial_done
            return
    pytest.fail("no deterministic path to the 40 token")


@pytest.mark.parametrize("goal", GOALS)
def test_reward_iff_goal_condition(goal):
    g = load_graph("tree")
    spec = TaskSpec(dynamics=UncertaintyDynamics("fixed", fixed_p=0.5), n_trials=400, env_seed=2,
                    goal_schedule=(goal,) * 400)
    env = new_env(spec)
    rng = np.random.default_rng(0)
    for t in range(400):
        r1, r2 = _play(env, int(rng.integers(2)), int(rng.integers(2)))
        value = g.token_value[r2.next_state]
        if goal == "flexible":
            assert (r2.reward > 0) == (value > 0)
        else:
            assert (r2.reward > 0) == (r2.token_color_collected == goal and value > 0)
        if r2.reward > 0:
            assert r2.reward == value
        if t + 1 < 400:
            advance_trial(env)


def test_step_on_terminal_is_protocol_error():
    env = new_env(original_task(3))
    _play(env, 0, 0)
    with pytest.raises(ProtocolError):
        step(env, 0)


def test_advance_before_done_is_protocol_error():
    env = new_env(original_task(3))
    with pytest.raises(ProtocolError):
        advance_trial(env)


def test_advance_past_end_signals_complete():
    env = new_env(original_task(2))
    _play(env, 0, 0)
    advance_trial(env)
    _play(env, 0, 0)
    with pytest.raises(SessionComplete):
        advance_trial(env)


def test_fixed_dynamics_constant():
    p = transition_schedule(UncertaintyDynamics("fixed", fixed_p=0.7), 500, np.random.default_rng(0))
    assert np.all(p == 0.7)


def test_switch_blocks():
    p = transition_schedule(UncertaintyDynamics("switch", switch_block=20), 80, np.random.default_rng(0))
    assert np.all(p[:20] == 0.9) and np.all(p[20:40] == 0.5) and np.all(p[40:60] == 0.9) and np.all(p[60:] == 0.5)


def test_drift_stays_in_bounds():
    dyn = UncertaintyDynamics("drift", fixed_p=0.5, drift_sigma=0.025, drift_bounds=(0.2, 0.8))
    p = transition_schedule(dyn, 10_000, np.random.default_rng(3))
    assert p.min() >= 0.2 and p.max() <= 0.8
    assert np.std(np.diff(p)) > 0.01


def test_driftswitch_resets_at_block_boundaries():
    dyn = UncertaintyDynamics("driftswitch", drift_sigma=0.025, drift_bounds=(0.05, 0.95), switch_block=20)
    p = transition_schedule(dyn, 200, np.random.default_rng(3))
    for t in range(0, 200, 20):
        assert p[t] == (0.9 if (t // 20) % 2 == 0 else 0.5)


@given(st.floats(-3, 4, allow_nan=False), st.floats(0, 0.5), st.floats(0.5, 1.0))
def test_reflect_lands_in_bounds(p, lo, hi):
    r = reflect(p, lo, hi)
    assert lo - 1e-12 <= r <= hi + 1e-12


@given(st.sampled_from(range(10)), st.integers(0, 199))
def test_transition_rows_sum_to_one(task, trial):
    env = new_env(load_suite()[task])
    env.trial_index = trial
    for p, q in env.current_transition_matrix.values():
        assert abs(p + q - 1.0) <= 1e-12
        assert 0.0 <= p <= 1.0


def test_suite_shape():
    suite = canonical_suite()
    assert len(suite) == 10
    assert [s.task_id for s in suite] == [f"T{i}" for i in range(1, 11)]
    grid = {(s.structure, s.dynamics.kind) for s in suite[1:9]}
    assert grid == {(st_, k) for st_ in ("ladder", "tree") for k in ("fixed", "drift", "switch", "driftswitch")}
    t10 = suite[-1]
    assert t10.structure == "tree" and t10.dynamics.kind == "switch"
    assert t10.dynamics.switch_low == (0.9, 0.1) and t10.dynamics.switch_high == (0.5, 0.5)
    for spec in suite:
        new_env(spec)


def test_shipped_suite_matches_code():
    assert [s.to_dict() for s in load_suite()] == [s.to_dict() for s in canonical_suite()]


def test_task_spec_json_round_trip(tmp_path):
    for spec in load_suite():
        spec.save(tmp_path / "t.json")
        assert TaskSpec.load(tmp_path / "t.json") == spec


def test_ideal_deterministic_flexible():
    spec = TaskSpec(dynamics=UncertaintyDynamics("fixed", fixed_p=1.0), n_trials=1, goal_schedule=("flexible",))
    env = new_env(spec)
    a, values = ideal_action(env)
    assert max(values) == 40.0
    assert max_trial_value(env) == 40.0
    r1, r2 = _play(env, a, ideal_action(env)[0])
    assert r2.reward == 40


def test_ideal_symmetric_values_tie_left():
    d = load_graph("tree").to_dict()
    for tok in d["tokens"].values():
        tok["value"] = 20
    spec = TaskSpec(dynamics=UncertaintyDynamics("fixed", fixed_p=0.5), n_trials=1, goal_schedule=("flexible",),
                    graph=TaskGraph.from_dict(d))
    env = new_env(spec)
    a, (vl, vr) = ideal_action(env)
    assert vl == vr and a == 0


@pytest.mark.parametrize("structure", ["tree", "ladder"])
@pytest.mark.parametrize("goal", range(4))
@pytest.mark.parametrize("p", [0.9, 0.7, 0.5, 0.2])
def test_ideal_matches_policy_enumeration(structure, goal, p):
    graph = load_graph(structure)
    spec = TaskSpec(structure=structure, dynamics=UncertaintyDynamics("fixed", fixed_p=p), n_trials=1,
                    goal_schedule=(GOALS[goal],))
    env = new_env(spec)
    brute = brute_force_values(graph, goal, p)
    best = max(brute.values())
    assert max_trial_value(env) == pytest.approx(best, abs=1e-12)
    a, values = ideal_action(env)
    best_per_a1 = [max(v for (a1, _), v in brute.items() if a1 == x) for x in (0, 1)]
    assert values == pytest.approx(tuple(best_per_a1), abs=1e-12)
    assert best_per_a1[a] == pytest.approx(best, abs=1e-12)


def test_zero_value_when_goal_color_absent():
    g = load_graph("tree").to_dict()
    for tok in g["tokens"].values():
        if tok["color"] == "red":
            tok["color"] = "blue"
    graph = TaskGraph.from_dict(g)
    spec = TaskSpec(n_trials=1, goal_schedule=("red",), graph=graph)
    env = new_env(spec)
    assert max_trial_value(env) == 0.0


def test_max_value_equals_root_ideal_value():
    env = new_env(original_task(50, 9))
    for t in range(50):
        _, values = ideal_action(env)
        assert max_trial_value(env) == max(values)
        _play(env, 0, 0)
        if t < 49:
            advance_trial(env)


@pytest.mark.parametrize("task", range(10))
def test_ideal_agent_normalized_reward_is_one_in_expectation(task):
    spec = dataclasses.replace(load_suite()[task], n_trials=3000)
    ds = run_session(IdealAgent(), spec, np.random.default_rng(task))
    oracle = build_oracle(ds, spec.task_graph())
    den = oracle.max_value
    env = new_env(spec)
    assert np.allclose(den[:200], [env.max_trial_value(t) for t in range(200)])
    r = ds.column("reward") / np.where(den > 0, den, 1)
    r = r[den > 0]
    ci = 3.0 * r.std(ddof=1) / np.sqrt(len(r))
    assert abs(normalized_reward(ds, den) - 1.0) < ci


def test_uncertainty_label():
    assert uncertainty_label(0.9) == 0 and uncertainty_label(0.1) == 0
    assert uncertainty_label(0.5) == 1 and uncertainty_label(0.65) == 1


def test_event_sequence_pure_function_of_spec():
    spec = load_suite()[4]
    runs = []
    for _ in range(2):
        ev = []
        run_session(IdealAgent(), spec, np.random.default_rng(0), events=ev)
        runs.append(ev)
    assert runs[0] == runs[1]
