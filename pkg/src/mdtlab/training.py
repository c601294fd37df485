"""Goal-matching and policy-matching training, likelihoods and frozen evaluation.

Goal matching (GM) lets an agent play the task for reward. Policy matching
(PM) replays a subject's session with the agent teacher-forced along the
subject's states and inputs; the agent's own two choices in each game are
compared with the subject's and the matching reward ``pm_terminal_reward``
is the only learning signal. Because the successor state is the subject's
whatever the agent chose, a one-step bootstrap would give stage-1 choices
no matching credit; stage-1 targets therefore use the game's return
(discounted terminal reward), as the actor-critic's returns already do.
Prefrontal arbitration agents have no gradient
channel, so their PM is a maximum-likelihood fit of the parameter vector
by coordinate descent with random restarts.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .arbitration import PFC_BOUNDS, PfcAgent, PfcConfig, PfcParams
from .data import DatasetError, SubjectDataset, validate_against_task
from .deep import DDQNAgent, MetaRLAgent, Rollout, a2c_update, ddqn_train_step, epsilon_at, fit_inv_temp
from .env import MDTEnv, TaskGraph, TaskSpec
from .rl import (Agent, FrozenError, IdealAgent, Observation, RandomAgent, SarsaAgent, Transition, obs_index,
                 sample_action, sarsa_update, state_digest)
from .seeding import stable_seed
from .simulate import replay_likelihood, run_session

REGIMES = ("GM", "PM")
DEFAULT_EPOCHS = {"ddqn": 1000, "metarl": 8000, "sarsa": 1000, "pfc1": 8, "pfc2": 8}
BUNDLE_SCHEMA = "mdtlab-bundle/1"


# ----------------------------------------------------------- PM reward

def pm_terminal_reward(a_ag1: int, a_ag2: int, a_h1: int, a_h2: int, k: float = 10.0, n: float = 10.0) -> float:
    """k + n when both choices match the subject's, k - n when both differ, k otherwise."""
    if not k > 0:
        raise ValueError("k must be positive")
    if n < 0:
        raise ValueError("n must be non-negative")
    hits = (a_ag1 == a_h1) + (a_ag2 == a_h2)
    if hits == 2:
        return float(k + n)
    if hits == 0:
        return float(k - n)
    return float(k)


# --------------------------------------------------------- likelihood

def episode_likelihood(agent: Agent, ds: SubjectDataset, graph: TaskGraph, start: bool = True):
    """``(per_trial, total)``: the agent's probability of each recorded choice, shape ``(n, 2)``, and its sum."""
    if isinstance(agent, PfcAgent) and start:
        per = kernels.pfc_choice_probs(agent.params.to_array(), agent.config, graph, ds)
    else:
        per = replay_likelihood(agent, ds, graph, start=start)
    return per, float(per.sum())


# ------------------------------------------------------------- config

@dataclass
class TrainingConfig:
    regime: str = "GM"
    epochs: int | None = None
    games_min: int = 200
    games_max: int = 400
    pm_k: float = 10.0
    pm_n: float = 10.0
    early_stop: float | None = None      # reference mean likelihood per choice
    seed: int = 0
    restarts: int = 3                    # prefrontal fits only
    holdout_every: int = 5               # DDQN temperature fit uses every n-th trial

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.pm_k > 0 or self.pm_n < 0:
            raise ValueError("PM reward needs k > 0 and n >= 0")
        if not 1 <= self.games_min <= self.games_max:
            raise ValueError("games per episode must satisfy 1 <= min <= max")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")

    def n_epochs(self, kind: str) -> int:
        return DEFAULT_EPOCHS.get(kind, 100) if self.epochs is None else self.epochs


@dataclass
class TrainedModel:
    agent: Agent
    curve: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    frozen: bool = False

    @property
    def kind(self) -> str:
        return self.agent.kind

    def freeze(self) -> "TrainedModel":
        self.agent.freeze()
        self.frozen = True
        return self

    def digest(self) -> str:
        return state_digest(self.agent.learnable_state())


def _games(rng: np.random.Generator, cfg: TrainingConfig) -> int:
    return int(rng.integers(cfg.games_min, cfg.games_max + 1))


def _mutable(agent: Agent):
    if agent.frozen:
        raise FrozenError(f"{agent.kind} agent is frozen; it cannot be trained")


# ----------------------------------------------------------------- GM

def train_gm(agent: Agent, spec: TaskSpec, config: TrainingConfig | None = None) -> TrainedModel:
    """Free play on ``spec`` for reward; the curve logs mean normalized reward per epoch."""
    config = config or TrainingConfig("GM")
    config.validate()
    _mutable(agent)
    epochs = config.n_epochs(agent.kind)
    rng = np.random.default_rng(stable_seed(config.seed, "gm", agent.kind))
    graph = spec.task_graph()
    curve = []
    total_steps = 0
    schedule = [_games(rng, config) for _ in range(epochs)]
    planned = 2 * sum(schedule)
    for epoch, games in enumerate(schedule):
        env = MDTEnv(replace(spec, n_trials=games, env_seed=stable_seed(config.seed, "gm-env", epoch)))
        agent.start_task(graph, env)
        ratios, losses = [], []
        rollout = Rollout() if isinstance(agent, MetaRLAgent) else None
        if rollout is not None:
            agent.recording = rollout
        for t in range(games):
            best = env.max_trial_value()
            trial_reward = 0.0
            for stage in range(2):
                obs = Observation(env.current_state, env.current_goal)
                if isinstance(agent, DDQNAgent):
                    a = agent.explore(obs, epsilon_at(agent.config, total_steps / max(planned, 1)), rng)
                    x = agent._input(obs)
                else:
                    a = sample_action(agent.act(obs), rng)
                res = env.step(a)
                tr = Transition(obs, a, res.reward, res.next_state, res.trial_done)
                agent.observe(tr)
                total_steps += 1
                if isinstance(agent, DDQNAgent):
                    nxt = (np.zeros_like(x) if res.trial_done else
                           agent._input(Observation(res.next_state, env.current_goal)))
                    agent.buffer.add(x, a, res.reward, nxt, res.trial_done)
                    loss = ddqn_train_step(agent, rng=rng)
                    if loss is not None:
                        losses.append(loss)
                trial_reward += res.reward
            if best > 0:
                ratios.append(trial_reward / best)
            if t + 1 < games:
                env.advance_trial()
        if rollout is not None:
            agent.recording = None
            terms = a2c_update(agent, rollout)
            losses.append(terms["loss"])
        curve.append({"epoch": epoch, "games": games,
                      "loss": float(np.mean(losses)) if losses else math.nan,
                      "mean_reward": float(np.mean(ratios)) if ratios else math.nan,
                      "mean_likelihood": math.nan})
    return TrainedModel(agent, curve, {"regime": "GM", "training": asdict(config), "task": spec.to_dict()})


# ----------------------------------------------------------------- PM

def _check_subject(ds: SubjectDataset, spec: TaskSpec | None, config: TrainingConfig):
    if not ds.records:
        raise DatasetError("policy matching needs a nonempty subject dataset")
    if spec is not None:
        problems = validate_against_task(ds, replace(spec, n_trials=max(spec.n_trials, len(ds))))
        if problems:
            v = problems[0]
            raise DatasetError(f"subject data does not fit the task (row {v.row}, {v.kind}): {v.message}")
    if len(ds) < config.games_min:
        raise DatasetError(f"subject has {len(ds)} trials; the episode schedule needs at least {config.games_min}")


def train_pm(agent: Agent, ds: SubjectDataset, spec: TaskSpec | None = None,
             config: TrainingConfig | None = None) -> TrainedModel:
    """Teacher-forced policy matching to one subject; the curve logs mean choice likelihood."""
    config = config or TrainingConfig("PM")
    config.validate()
    _mutable(agent)
    graph = spec.task_graph() if spec is not None else _graph_for(ds)
    if isinstance(agent, PfcAgent):
        _check_subject(ds, spec, replace(config, games_min=1))
        return _fit_pfc(agent, ds, graph, config, spec)
    _check_subject(ds, spec, config)
    if isinstance(agent, (DDQNAgent, MetaRLAgent, SarsaAgent)):
        return _pm_loop(agent, ds, graph, config, spec)
    raise TypeError(f"policy matching is not defined for {agent.kind} agents")


def _graph_for(ds: SubjectDataset) -> TaskGraph:
    from .env import load_graph
    return load_graph(ds.structure)


def _pm_loop(agent, ds, graph, config, spec):
    epochs = config.n_epochs(agent.kind)
    rng = np.random.default_rng(stable_seed(config.seed, "pm", agent.kind, ds.subject_id))
    recs = ds.records
    k, n = config.pm_k, config.pm_n
    holdout = np.array([i % config.holdout_every == config.holdout_every - 1 for i in range(len(recs))])
    schedule = [min(_games(rng, config), len(recs)) for _ in range(epochs)]
    planned = 2 * sum(schedule)
    steps = 0
    curve = []
    for epoch, games in enumerate(schedule):
        agent.start_task(graph)
        probs, losses, q_rows, q_act = [], [], [], []
        rollout = Rollout() if isinstance(agent, MetaRLAgent) else None
        if rollout is not None:
            agent.recording = rollout
        for i in range(games):
            r = recs[i]
            o1, o2 = Observation(r.s1, r.goal), Observation(r.s2, r.goal)
            # stage 1: the agent chooses, the subject's choice and successor are kept
            p1 = agent.act(o1)
            if isinstance(agent, DDQNAgent):
                x1 = agent._input(o1)
                a1 = agent.explore(o1, epsilon_at(agent.config, steps / max(planned, 1)), rng)
                if holdout[i]:
                    q_rows.append(agent.q(o1))
                    q_act.append(r.a1)
            else:
                a1 = sample_action(p1, rng)
            tr1 = Transition(o1, r.a1, 0.0, r.s2, False)
            if isinstance(agent, MetaRLAgent):
                agent.observe(tr1, learn_action=a1, learn_reward=0.0)
            elif not isinstance(agent, SarsaAgent):
                agent.observe(tr1)
            p2 = agent.act(o2)
            if isinstance(agent, DDQNAgent):
                x2 = agent._input(o2)
                a2 = agent.explore(o2, epsilon_at(agent.config, (steps + 1) / max(planned, 1)), rng)
                if holdout[i]:
                    q_rows.append(agent.q(o2))
                    q_act.append(r.a2)
            else:
                a2 = sample_action(p2, rng)
            steps += 2
            r_omega = pm_terminal_reward(a1, a2, r.a1, r.a2, k, n)
            tr2 = Transition(o2, r.a2, r.reward, r.s3, True)
            if isinstance(agent, MetaRLAgent):
                agent.observe(tr2, learn_action=a2, learn_reward=r_omega)
            elif isinstance(agent, SarsaAgent):
                s1i, s2i = obs_index(r.s1, r.goal), obs_index(r.s2, r.goal)
                sarsa_update(agent.q, s1i, a1, agent.gamma * r_omega, None, None, agent.alpha, agent.gamma)
                sarsa_update(agent.q, s2i, a2, r_omega, None, None, agent.alpha, agent.gamma)
            else:
                agent.observe(tr2)
            if isinstance(agent, DDQNAgent):
                if not holdout[i]:
                    agent.buffer.add(x1, a1, agent.config.gamma * r_omega, x2, True)
                    agent.buffer.add(x2, a2, r_omega, np.zeros_like(x2), True)
                    for _ in range(2):
                        loss = ddqn_train_step(agent, rng=rng)
                        if loss is not None:
                            losses.append(loss)
            probs.extend((p1[r.a1], p2[r.a2]))
        if rollout is not None:
            agent.recording = None
            losses.append(a2c_update(agent, rollout)["loss"])
        if isinstance(agent, DDQNAgent):
            if q_rows:
                agent.inv_temp = fit_inv_temp(np.array(q_rows), np.array(q_act))
            per, _ = episode_likelihood(agent, ds.with_records(recs[:games]), graph)
            mean_l = float(per.mean())
        else:
            mean_l = float(np.mean(probs))
        curve.append({"epoch": epoch, "games": games, "loss": float(np.mean(losses)) if losses else math.nan,
                      "mean_reward": math.nan, "mean_likelihood": mean_l})
        if config.early_stop is not None and mean_l > config.early_stop:
            break
    if isinstance(agent, DDQNAgent):
        q_rows, q_act = _replay_q(agent, ds, graph, holdout)
        agent.inv_temp = fit_inv_temp(q_rows, q_act)
    echo = {"regime": "PM", "training": asdict(config), "subject": ds.subject_id,
            "task": spec.to_dict() if spec is not None else None}
    return TrainedModel(agent, curve, echo)


def _replay_q(agent: DDQNAgent, ds: SubjectDataset, graph: TaskGraph, mask):
    """Q rows and recorded actions at the masked trials, inputs following the subject."""
    agent.start_task(graph)
    rows, acts = [], []
    for i, r in enumerate(ds.records):
        o1 = Observation(r.s1, r.goal)
        if mask[i]:
            rows.append(agent.q(o1))
            acts.append(r.a1)
        agent.observe(Transition(o1, r.a1, 0.0, r.s2, False))
        o2 = Observation(r.s2, r.goal)
        if mask[i]:
            rows.append(agent.q(o2))
            acts.append(r.a2)
        agent.observe(Transition(o2, r.a2, r.reward, r.s3, True))
    return np.array(rows).reshape(-1, 2), np.array(acts, dtype=int)


# --------------------------------------------------- prefrontal fitting

def fit_pfc(ds: SubjectDataset, graph: TaskGraph, config: PfcConfig, rng: np.random.Generator,
            restarts: int = 3, max_sweeps: int = 8, tol: float = 1e-3, start: PfcParams | None = None):
    """Coordinate-descent maximum likelihood over the seven arbitration parameters.

    Each coordinate move is a bounded scalar minimization of the negative
    log-likelihood; sweeps stop when a full pass gains less than ``tol``.
    The first restart begins at ``start`` (default parameters when None),
    the others at uniform draws inside the bounds. Returns
    ``(params, log_likelihood, curve)``; the curve holds the mean choice
    likelihood after every sweep of every restart.
    """
    from scipy.optimize import minimize_scalar

    names = PfcParams.names()
    lo = np.array([PFC_BOUNDS[n][0] for n in names])
    hi = np.array([PFC_BOUNDS[n][1] for n in names])
    session = kernels.SessionArrays(ds)

    def nll(x):
        return -kernels.pfc_log_likelihood(x, config, graph, session)

    best_x, best_f = None, math.inf
    curve = []
    for r in range(restarts):
        if r == 0:
            x = np.clip((start or PfcParams()).to_array(), lo, hi)
        else:
            x = lo + (hi - lo) * rng.random(len(names))
        f = nll(x)
        for sweep in range(max_sweeps):
            f_start = f
            for j in range(len(x)):
                def line(v, j=j):
                    y = x.copy()
                    y[j] = v
                    return nll(y)
                res = minimize_scalar(line, bounds=(lo[j], hi[j]), method="bounded",
                                      options={"xatol": 1e-3 * (hi[j] - lo[j])})
                if res.fun < f:
                    x[j] = res.x
                    f = float(res.fun)
            probs = kernels.pfc_choice_probs(x, config, graph, session)
            curve.append({"epoch": len(curve), "restart": r, "sweep": sweep, "loss": f,
                          "mean_reward": math.nan, "mean_likelihood": float(probs.mean())})
            if f_start - f < tol:
                break
        if f < best_f:
            best_x, best_f = x.copy(), f
    return PfcParams.from_array(best_x), -best_f, curve


def _fit_pfc(agent: PfcAgent, ds, graph, config: TrainingConfig, spec):
    rng = np.random.default_rng(stable_seed(config.seed, "pfc-fit", agent.kind, ds.subject_id))
    sweeps = config.n_epochs(agent.kind)
    params, ll, curve = fit_pfc(ds, graph, agent.config, rng, restarts=config.restarts,
                                max_sweeps=max(sweeps, 1))
    if sweeps == 0:
        params, curve = agent.params, []
    agent.set_params(params)
    agent.start_task(graph)
    echo = {"regime": "PM", "training": asdict(config), "subject": ds.subject_id, "log_likelihood": ll,
            "task": spec.to_dict() if spec is not None else None}
    return TrainedModel(agent, curve, echo)


# ------------------------------------------------------ frozen evaluation

FAST_STATE_MODES = ("evolve", "reset")


class _PerTrialReset(Agent):
    """Wraps an agent so its fast state is restored to the task-start state every trial."""

    def __init__(self, inner: Agent):
        self.inner = inner
        self.kind = inner.kind
        self._graph = None

    def start_task(self, graph, env=None):
        self._graph, self._env = graph, env
        self.inner.start_task(graph, env)

    def act(self, obs):
        return self.inner.act(obs)

    def observe(self, tr):
        self.inner.observe(tr)
        if tr.done:
            self.inner.start_task(self._graph, self._env)


def agent_from_checkpoint(d: dict) -> Agent:
    kind = d.get("kind")
    table = {"random": RandomAgent, "ideal": IdealAgent, "sarsa": SarsaAgent, "pfc1": PfcAgent,
             "pfc2": PfcAgent, "ddqn": DDQNAgent, "metarl": MetaRLAgent}
    if kind not in table:
        raise ValueError(f"unknown agent kind in checkpoint: {kind!r}")
    return table[kind].from_checkpoint(d)


def freeze_and_evaluate(model: TrainedModel, spec: TaskSpec, n_trials: int | None = None,
                        rng: np.random.Generator | None = None, fast_state: str = "evolve",
                        subject_id: str | None = None, events: list | None = None) -> SubjectDataset:
    """Play ``spec`` with every learnable parameter frozen.

    The model is evaluated through a restored copy, so its own checkpoint is
    untouched. ``fast_state='evolve'`` lets Q tables, transition estimates,
    arbitration weight and recurrent state adapt within the task;
    ``'reset'`` restores them at the end of every trial.
    """
    if fast_state not in FAST_STATE_MODES:
        raise ValueError(f"fast_state must be one of {FAST_STATE_MODES}")
    agent = agent_from_checkpoint(json.loads(json.dumps(model.agent.checkpoint())))
    agent.freeze()
    before = state_digest(agent.learnable_state())
    if n_trials is not None:
        spec = replace(spec, n_trials=n_trials)
    runner = agent if fast_state == "evolve" else _PerTrialReset(agent)
    rng = rng or np.random.default_rng(stable_seed("evaluate", spec.task_id, spec.env_seed))
    prov = {"kind": "model", "agent": agent.kind, "fast_state": fast_state, "env_seed": spec.env_seed}
    ds = run_session(runner, spec, rng, subject_id=subject_id or agent.kind, provenance=prov, events=events)
    if state_digest(agent.learnable_state()) != before:
        raise FrozenError("learnable state changed during frozen evaluation")
    return ds


# ------------------------------------------------------------ bundles

CURVE_COLUMNS = ("epoch", "games", "loss", "mean_reward", "mean_likelihood")


def curve_to_csv(curve: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in curve:
        w.writerow([_cell(row.get(c, "")) for c in CURVE_COLUMNS])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def save_bundle(model: TrainedModel, out_dir) -> dict:
    """Checkpoint, config and curve files plus a manifest of their digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "checkpoint.json": _dump(model.agent.checkpoint()),
        "config.json": _dump(model.config),
        "curve.csv": curve_to_csv(model.curve),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {"schema": BUNDLE_SCHEMA, "kind": model.kind, "frozen": model.frozen,
                "learnable_digest": model.digest(),
                "files": {k: hashlib.sha256(v.encode()).hexdigest() for k, v in files.items()}}
    (out / "manifest.json").write_text(_dump(manifest))
    return manifest


def load_bundle(bundle_dir) -> TrainedModel:
    d = Path(bundle_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("schema") != BUNDLE_SCHEMA:
        raise ValueError(f"{d}: not a model bundle")
    for name, digest in manifest["files"].items():
        if hashlib.sha256((d / name).read_bytes()).hexdigest() != digest:
            raise ValueError(f"{d / name}: digest does not match the bundle manifest")
    agent = agent_from_checkpoint(json.loads((d / "checkpoint.json").read_text()))
    rows = list(csv.DictReader(io.StringIO((d / "curve.csv").read_text())))
    curve = [{k: (int(v) if k in ("epoch", "games") and v != "" else float(v) if v != "" else v)
              for k, v in row.items()} for row in rows]
    model = TrainedModel(agent, curve, json.loads((d / "config.json").read_text()), manifest["frozen"])
    if model.frozen:
        agent.freeze()
    return model
