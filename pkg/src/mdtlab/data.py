"""Behavioral records, the CSV schema, validation and the synthetic-subject generator.

CSV layout (UTF-8, ``\\n`` line endings)::

    # mdt-behavior v1 {"provenance": ..., "structure": ..., "subject_id": ..., "task_id": ...}
    subject_id,trial_index,goal,uncertainty,p_common,s1,a1,s2,a2,s3,reward,block
    sub01,0,red,0,0.9,S1,L,S3,R,S8,0,0
    ...

``goal`` is one of flexible/red/blue/yellow, ``uncertainty`` is 0 (low) or 1
(high), ``p_common`` is the first-successor probability in force on the trial
(empty when unknown), states are ``S1..S9`` and actions ``L``/``R``. Floats
are written with ``repr`` so a save/load round trip is exact.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import ACTIONS, GOALS, REWARD_SET, TaskSpec, goal_index, original_task, parse_state, state_name
from .seeding import stable_seed

FORMAT_TAG = "# mdt-behavior v1"
COLUMNS = ("subject_id", "trial_index", "goal", "uncertainty", "p_common",
           "s1", "a1", "s2", "a2", "s3", "reward", "block")


class DatasetError(ValueError):
    """A behavior file or dataset breaks the schema."""


@dataclass(frozen=True)
class BehaviorRecord:
    subject_id: str
    trial_index: int
    goal: int
    uncertainty: int
    s1: int
    a1: int
    s2: int
    a2: int
    s3: int
    reward: float
    p_common: float = math.nan
    block: int = 0


@dataclass(frozen=True)
class SubjectDataset:
    subject_id: str
    records: tuple
    task_id: str = "T10"
    structure: str = "tree"
    provenance: dict = field(default_factory=lambda: {"kind": "synthetic"}, hash=False, compare=True)

    def __post_init__(self):
        if not self.records:
            raise DatasetError("dataset has no records")

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def with_records(self, records) -> "SubjectDataset":
        return replace(self, records=tuple(records))


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return ""
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def dataset_to_text(ds: SubjectDataset) -> str:
    meta = {"subject_id": ds.subject_id, "task_id": ds.task_id, "structure": ds.structure,
            "provenance": ds.provenance}
    lines = [f"{FORMAT_TAG} {json.dumps(meta, sort_keys=True)}", ",".join(COLUMNS)]
    for r in ds.records:
        lines.append(",".join([
            r.subject_id, str(r.trial_index), GOALS[r.goal], str(r.uncertainty), _fmt_float(r.p_common),
            state_name(r.s1), ACTIONS[r.a1], state_name(r.s2), ACTIONS[r.a2], state_name(r.s3),
            _fmt_float(r.reward), str(r.block),
        ]))
    return "\n".join(lines) + "\n"


def save_dataset(ds: SubjectDataset, path) -> None:
    Path(path).write_text(dataset_to_text(ds), encoding="utf-8")


def _parse_row(row: list, rowno: int) -> BehaviorRecord:
    if len(row) != len(COLUMNS):
        raise DatasetError(f"row {rowno}: expected {len(COLUMNS)} fields, got {len(row)}")
    f = dict(zip(COLUMNS, row))
    try:
        reward = float(f["reward"])
        rec = BehaviorRecord(
            subject_id=f["subject_id"],
            trial_index=int(f["trial_index"]),
            goal=goal_index(f["goal"]),
            uncertainty=int(f["uncertainty"]),
            s1=parse_state(f["s1"]), a1=ACTIONS.index(f["a1"]),
            s2=parse_state(f["s2"]), a2=ACTIONS.index(f["a2"]),
            s3=parse_state(f["s3"]),
            reward=reward,
            p_common=float(f["p_common"]) if f["p_common"] else math.nan,
            block=int(f["block"]) if f["block"] else 0,
        )
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"row {rowno}: {exc}") from None
    if reward not in REWARD_SET:
        raise DatasetError(f"row {rowno}: reward {f['reward']} not in {REWARD_SET}")
    if rec.uncertainty not in (0, 1):
        raise DatasetError(f"row {rowno}: uncertainty must be 0 or 1")
    return rec


def dataset_from_text(text: str) -> SubjectDataset:
    lines = text.splitlines()
    if not lines or not any(ln.strip() for ln in lines):
        raise DatasetError("no records: file is empty")
    if not lines[0].startswith(FORMAT_TAG):
        raise DatasetError(f"row 1: bad header, expected '{FORMAT_TAG} {{...}}'")
    try:
        meta = json.loads(lines[0][len(FORMAT_TAG):].strip() or "{}")
    except json.JSONDecodeError as exc:
        raise DatasetError(f"row 1: bad header metadata ({exc})") from None
    if len(lines) < 2 or lines[1].split(",") != list(COLUMNS):
        raise DatasetError(f"row 2: bad header, expected columns {','.join(COLUMNS)}")
    records = []
    for i, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        rec = _parse_row(line.split(","), i)
        if rec.trial_index != len(records):
            raise DatasetError(f"row {i}: non-dense trial index {rec.trial_index}, expected {len(records)}")
        records.append(rec)
    if not records:
        raise DatasetError("no records")
    return SubjectDataset(meta.get("subject_id", records[0].subject_id), tuple(records),
                          meta.get("task_id", "T10"), meta.get("structure", "tree"),
                          meta.get("provenance", {"kind": "external"}))


def load_dataset(path) -> SubjectDataset:
    text = Path(path).read_text(encoding="utf-8")
    ds = dataset_from_text(text)
    if ds.provenance.get("kind") == "external" and "sha256" not in ds.provenance:
        prov = dict(ds.provenance, sha256=hashlib.sha256(text.encode()).hexdigest())
        ds = replace(ds, provenance=prov)
    return ds


@dataclass
class Violation:
    row: int
    kind: str
    message: str


def validate_against_task(ds: SubjectDataset, spec: TaskSpec) -> list:
    """Every way the dataset disagrees with the task graph; empty list means clean."""
    g = spec.task_graph()
    alphabet = {goal_index(x) for x in spec.goal_alphabet}
    out = []
    for i, r in enumerate(ds.records):
        if r.trial_index != i:
            out.append(Violation(i, "non-dense index", f"trial_index {r.trial_index} at position {i}"))
        if r.goal not in alphabet:
            out.append(Violation(i, "goal", f"goal {GOALS[r.goal]} outside the task's goal alphabet"))
        if r.a1 not in (0, 1) or r.a2 not in (0, 1):
            out.append(Violation(i, "action", "actions must be Left or Right"))
            continue
        states_ok = all(0 <= s < g.n_states for s in (r.s1, r.s2, r.s3))
        if not states_ok:
            out.append(Violation(i, "state", "state id outside the graph"))
            continue
        for s, want in ((r.s1, 1), (r.s2, 2), (r.s3, 3)):
            if g.stage_of[s] != want:
                out.append(Violation(i, "stage mismatch", f"{state_name(s)} is stage {g.stage_of[s]}, expected {want}"))
        if g.stage_of[r.s1] == 1 and r.s2 not in g.successors.get((r.s1, r.a1), ()):
            out.append(Violation(i, "illegal transition", f"{state_name(r.s1)}-{ACTIONS[r.a1]} cannot reach {state_name(r.s2)}"))
        if g.stage_of[r.s2] == 2 and r.s3 not in g.successors.get((r.s2, r.a2), ()):
            out.append(Violation(i, "illegal transition", f"{state_name(r.s2)}-{ACTIONS[r.a2]} cannot reach {state_name(r.s3)}"))
        if r.reward not in REWARD_SET:
            out.append(Violation(i, "reward", f"reward {r.reward} not in {REWARD_SET}"))
        elif g.stage_of[r.s3] == 3:
            expect = g.reward_table()[r.goal, r.s3]
            if r.reward != expect:
                out.append(Violation(i, "reward mismatch", f"reward {r.reward} but goal pays {expect}"))
    return out


# ---------------------------------------------------------------- generator

DEFAULT_PRIORS = {
    "alpha": (0.05, 0.5),
    "eta": (0.05, 0.5),
    "inv_temp": (0.1, 0.6),
    "a_alpha": (0.05, 1.0),
    "a_beta": (0.05, 1.0),
    "b_alpha": (2.0, 15.0),
    "b_beta": (2.0, 15.0),
}


# every parameter spread over its whole fitting domain (rate slopes floored at
# 0.01); used where between-subject spread matters more than typicality
DISPERSED_PRIORS = {
    "alpha": (0.01, 0.6),
    "eta": (0.01, 0.6),
    "inv_temp": (0.01, 1.0),
    "a_alpha": (0.01, 1.0),
    "a_beta": (0.01, 1.0),
    "b_alpha": (0.01, 20.0),
    "b_beta": (0.01, 20.0),
}
PRIOR_PRESETS = {"default": DEFAULT_PRIORS, "dispersed": DISPERSED_PRIORS}


@dataclass
class SubjectGeneratorConfig:
    n_subjects: int = 82
    family: str = "pfc1"          # pfc1 | pfc2 | sarsa | random | mixed
    priors: dict = field(default_factory=lambda: dict(DEFAULT_PRIORS))
    session_length: int = 400
    master_seed: int = 0

    def validate(self) -> None:
        from .arbitration import PFC_BOUNDS
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be at least 1")
        if self.session_length < 2:
            raise ValueError("session_length must be at least 2")
        if self.family not in ("pfc1", "pfc2", "sarsa", "random", "mixed"):
            raise ValueError(f"unknown generator family {self.family!r}")
        for name, (lo, hi) in self.priors.items():
            if name not in PFC_BOUNDS:
                raise ValueError(f"unknown prior parameter {name!r}")
            blo, bhi = PFC_BOUNDS[name]
            if not blo <= lo <= hi <= bhi:
                raise ValueError(f"prior for {name} ({lo}, {hi}) outside the valid domain ({blo}, {bhi})")


def subject_family(cfg: SubjectGeneratorConfig, i: int) -> str:
    if cfg.family != "mixed":
        return cfg.family
    return ("pfc1", "sarsa", "random")[i % 3]


def generate_subjects(cfg: SubjectGeneratorConfig, task: TaskSpec | None = None) -> list:
    """Synthetic corpus: ``[(dataset, truth), ...]`` with truth holding the hidden parameters."""
    from .arbitration import PfcAgent, PfcConfig, PfcParams
    from .rl import RandomAgent, SarsaAgent
    from .simulate import run_session

    cfg.validate()
    base = task or original_task()
    out = []
    for i in range(cfg.n_subjects):
        sid = f"sub{i + 1:03d}"
        rng = np.random.default_rng(stable_seed(cfg.master_seed, sid, "params"))
        family = subject_family(cfg, i)
        params = PfcParams()
        for name in PfcParams.names():
            lo, hi = cfg.priors.get(name, (getattr(params, name),) * 2)
            setattr(params, name, float(lo + (hi - lo) * rng.random()))
        if family in ("pfc1", "pfc2"):
            agent = PfcAgent(params, PfcConfig(variant=int(family[-1])))
            truth = asdict(params)
        elif family == "sarsa":
            agent = SarsaAgent(alpha=params.alpha, inv_temp=params.inv_temp)
            truth = {"alpha": params.alpha, "inv_temp": params.inv_temp}
        else:
            agent = RandomAgent()
            truth = {}
        spec = replace(base, n_trials=cfg.session_length,
                       env_seed=stable_seed(cfg.master_seed, sid, "env") & (2**63 - 1))
        act_rng = np.random.default_rng(stable_seed(cfg.master_seed, sid, "actions"))
        prov = {"kind": "synthetic", "family": family, "master_seed": cfg.master_seed, "env_seed": spec.env_seed}
        ds = run_session(agent, spec, act_rng, subject_id=sid, provenance=prov)
        out.append((ds, {"subject_id": sid, "family": family, "params": truth}))
    return out


def save_corpus(corpus: list, cfg: SubjectGeneratorConfig, out_dir) -> dict:
    """Write one CSV per subject plus ``corpus.json`` and a separate ``ground_truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for ds, _ in corpus:
        name = f"{ds.subject_id}.csv"
        save_dataset(ds, out / name)
        files.append(name)
    manifest = {"schema": "mdt-corpus/1", "config": asdict(cfg), "subjects": files}
    (out / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    truth = {"schema": "mdt-ground-truth/1", "subjects": [t for _, t in corpus]}
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(corpus_dir) -> list:
    d = Path(corpus_dir)
    manifest = json.loads((d / "corpus.json").read_text())
    return [load_dataset(d / name) for name in manifest["subjects"]]
