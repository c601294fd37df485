"""Experiment orchestration: manifests, per-cell seeding, training, the battery and reports.

A run is a directory::

    <out>/manifest.json          resolved manifest (seeds, task order, scale)
    <out>/corpus/                synthetic subjects + ground truth (gen)
    <out>/models/<model>/<who>/  trained-model bundles (train)
    <out>/battery/<model>/<subject>/<task>.csv   frozen evaluations (battery)
    <out>/reports/*.csv          analysis tables (battery)
    <out>/figures/*.csv          figure-shaped tables (report)

Every unit of work (a *cell*) draws its randomness from
``stable_seed(master_seed, subject, model, task, stage)``, so results do
not depend on how cells are scheduled across worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing as mp
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .analysis import (REGRESSORS, GlmProfile, build_oracle, choice_consistency, choice_optimality, encoding_efficacy,
                       episode_mi, glm_profile, normalized_reward, recovery_test)
from .arbitration import PfcAgent, PfcConfig
from .data import (PRIOR_PRESETS, DatasetError, SubjectDataset, SubjectGeneratorConfig, generate_subjects,
                   load_dataset, save_corpus, save_dataset, validate_against_task)
from .deep import DDQNAgent, DDQNConfig, MetaRLAgent, MetaRLConfig
from .env import TaskSpec, load_suite, original_task
from .rl import RandomAgent
from .seeding import stable_seed
from .stats import paired_ttest
from .training import (TrainedModel, TrainingConfig, episode_likelihood, freeze_and_evaluate, load_bundle,
                       save_bundle, train_gm, train_pm)

MANIFEST_SCHEMA = "mdt-manifest/1"
MODEL_IDS = ("random", "GM-DDQN", "PM-DDQN", "GM-metaRL", "PM-metaRL", "PM-pfcRL1", "PM-pfcRL2")
GM_MODELS = ("GM-DDQN", "GM-metaRL")
PM_MODELS = ("PM-DDQN", "PM-metaRL", "PM-pfcRL1", "PM-pfcRL2")
BASELINE = "random"
ALPHA = 0.05
GM_DIR = "_gm"
SEED_MASK = 2**63 - 1

# full-scale epochs per model (prefrontal entries count coordinate sweeps)
FULL_EPOCHS = {"GM-DDQN": 1000, "PM-DDQN": 1000, "GM-metaRL": 8000, "PM-metaRL": 8000,
               "PM-pfcRL1": 8, "PM-pfcRL2": 8}
# --desk-scale: 8 subjects, epochs cut to the values below, LSTM 256 -> 48 units,
# 2 fit restarts; task lengths and session length are unchanged
DESK_EPOCHS = {"GM-DDQN": 10, "PM-DDQN": 20, "GM-metaRL": 20, "PM-metaRL": 20, "PM-pfcRL1": 8, "PM-pfcRL2": 8}
DESK_SUBJECTS = 8
DESK_HIDDEN = 48
DESK_RESTARTS = 2


class ManifestError(ValueError):
    """The manifest or its inputs are invalid (exit code 1)."""


@dataclass
class Manifest:
    out: str = "mdt-run"
    master_seed: int = 0
    corpus: dict = field(default_factory=lambda: {"n_subjects": 82, "family": "pfc1", "session_length": 400,
                                                  "priors": "default"})
    data_path: str | None = None
    models: list = field(default_factory=lambda: [x for x in MODEL_IDS if x != BASELINE])
    tasks: list = field(default_factory=lambda: [f"T{i}" for i in range(1, 11)])
    epochs: dict = field(default_factory=dict)
    metarl_hidden: int = 256
    pfc_restarts: int = 3
    recovery_sessions: int = 8
    eval_trials: int | None = None
    fast_state: str = "evolve"
    jobs: int = 1
    desk_scale: bool = False
    task_order: list | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        d = dict(d)
        schema = d.pop("schema", MANIFEST_SCHEMA)
        if schema != MANIFEST_SCHEMA:
            raise ManifestError(f"unsupported manifest schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ManifestError(f"unknown manifest fields: {', '.join(unknown)}")
        m = cls(**d)
        m.validate()
        return m

    @classmethod
    def load(cls, path) -> "Manifest":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ManifestError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, **asdict(self)}

    def validate(self) -> None:
        bad = [m for m in self.models if m not in MODEL_IDS]
        if bad:
            raise ManifestError(f"unknown models {bad}; choose from {list(MODEL_IDS)}")
        suite = {t.task_id for t in load_suite()}
        bad = [t for t in self.tasks if t not in suite]
        if bad:
            raise ManifestError(f"unknown tasks {bad}")
        if self.data_path is None:
            try:
                self.generator_config().validate()
            except (ValueError, TypeError) as e:
                raise ManifestError(f"corpus: {e}") from None
        if self.jobs < 1:
            raise ManifestError("jobs must be at least 1")
        if self.fast_state not in ("evolve", "reset"):
            raise ManifestError("fast_state must be 'evolve' or 'reset'")
        if self.recovery_sessions < 1 or self.pfc_restarts < 1 or self.metarl_hidden < 1:
            raise ManifestError("recovery_sessions, pfc_restarts and metarl_hidden must be positive")
        for k, v in self.epochs.items():
            if k not in FULL_EPOCHS or int(v) < 0:
                raise ManifestError(f"bad epochs entry {k}: {v}")

    def generator_config(self) -> SubjectGeneratorConfig:
        c = dict(self.corpus)
        priors = c.pop("priors", "default")
        if isinstance(priors, str):
            if priors not in PRIOR_PRESETS:
                raise ManifestError(f"unknown prior preset {priors!r}")
            priors = dict(PRIOR_PRESETS[priors])
        elif priors is None:
            priors = dict(PRIOR_PRESETS["default"])
        else:
            priors = {k: tuple(v) for k, v in priors.items()}
        return SubjectGeneratorConfig(priors=priors, master_seed=self.master_seed, **c)

    def resolved(self, desk_scale: bool = False, out: str | None = None, jobs: int | None = None) -> "Manifest":
        """Apply command-line overrides and fill in the seeded task order."""
        m = replace(self, corpus=dict(self.corpus), epochs=dict(self.epochs), models=list(self.models),
                    tasks=list(self.tasks))
        if out is not None:
            m.out = str(out)
        if jobs is not None:
            m.jobs = jobs
        if desk_scale and not m.desk_scale:
            m.desk_scale = True
            m.corpus["n_subjects"] = min(int(m.corpus.get("n_subjects", 82)), DESK_SUBJECTS)
            m.epochs = {**DESK_EPOCHS, **m.epochs}
            m.metarl_hidden = min(m.metarl_hidden, DESK_HIDDEN)
            m.pfc_restarts = min(m.pfc_restarts, DESK_RESTARTS)
        if m.task_order is None:
            rng = np.random.default_rng(stable_seed(m.master_seed, "task-order"))
            m.task_order = [m.tasks[i] for i in rng.permutation(len(m.tasks))]
        m.validate()
        return m

    def n_epochs(self, model: str) -> int:
        return int(self.epochs.get(model, FULL_EPOCHS[model]))


# --------------------------------------------------------------- helpers

def cell_seed(m: Manifest, subject: str, model: str, task: str, stage: str) -> int:
    return stable_seed(m.master_seed, subject, model, task, stage) & SEED_MASK


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return "" if v is None else str(v)


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def task_map() -> dict:
    return {t.task_id: t for t in load_suite()}


def eval_spec(m: Manifest, task_id: str) -> TaskSpec:
    """The evaluation task: its shipped env seed, so every subject and model sees the same events."""
    spec = task_map()[task_id]
    return replace(spec, n_trials=m.eval_trials) if m.eval_trials else spec


def subject_task(ds: SubjectDataset) -> TaskSpec:
    """The task a subject's session was recorded on (original MDT; own env seed when known)."""
    seed = ds.provenance.get("env_seed")
    if seed is None:
        seed = stable_seed("subject-task", ds.subject_id) & SEED_MASK
    return original_task(len(ds), int(seed))


def corpus_dir(m: Manifest) -> Path:
    return Path(m.data_path) if m.data_path else Path(m.out) / "corpus"


def load_subjects(m: Manifest) -> list:
    d = corpus_dir(m)
    if not d.exists():
        raise ManifestError(f"no subject data at {d}; run 'gen' first or set data_path")
    index = d / "corpus.json"
    if index.exists():
        names = json.loads(index.read_text())["subjects"]
    else:
        names = sorted(p.name for p in d.glob("*.csv"))
    if not names:
        raise ManifestError(f"no subject files in {d}")
    subs = [load_dataset(d / n) for n in names]
    ids = [s.subject_id for s in subs]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate subject ids in the corpus")
    return subs


def bundle_dir(m: Manifest, model: str, subject: str | None) -> Path:
    return Path(m.out) / "models" / model / (subject if model in PM_MODELS else GM_DIR)


def _run_cells(m: Manifest, fn, cells: list) -> list:
    if m.jobs <= 1 or len(cells) <= 1:
        return [fn(m.to_dict(), c) for c in cells]
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=m.jobs, mp_context=ctx) as pool:
        return list(pool.map(fn, [m.to_dict()] * len(cells), cells, chunksize=1))


# ------------------------------------------------------------------- gen

def cmd_gen(m: Manifest) -> dict:
    if m.data_path:
        raise ManifestError("the manifest points at external data; there is nothing to generate")
    cfg = m.generator_config()
    corpus = generate_subjects(cfg)
    out = corpus_dir(m)
    if out.exists():
        shutil.rmtree(out)
    save_corpus(corpus, cfg, out)
    return {"subjects": len(corpus), "dir": str(out)}


# ----------------------------------------------------------------- train

def build_agent(m: Manifest, model: str, seed: int):
    if model in ("GM-DDQN", "PM-DDQN"):
        return DDQNAgent(DDQNConfig(seed=seed))
    if model in ("GM-metaRL", "PM-metaRL"):
        return MetaRLAgent(MetaRLConfig(hidden=m.metarl_hidden, seed=seed))
    if model == "PM-pfcRL1":
        return PfcAgent(config=PfcConfig(variant=1))
    if model == "PM-pfcRL2":
        return PfcAgent(config=PfcConfig(variant=2))
    if model == BASELINE:
        return RandomAgent()
    raise ManifestError(f"unknown model {model}")


def _subject_by_id(m: Manifest, sid: str) -> SubjectDataset:
    for ds in load_subjects(m):
        if ds.subject_id == sid:
            return ds
    raise ManifestError(f"subject {sid} not in corpus")


def _bundle_complete(d: Path) -> bool:
    if not (d / "manifest.json").exists():
        return False
    try:
        load_bundle(d)
    except Exception:
        return False
    return True


def pfc_reference(m: Manifest, ds: SubjectDataset) -> float:
    """Mean choice likelihood of the subject's fitted first-variant prefrontal model."""
    d = bundle_dir(m, "PM-pfcRL1", ds.subject_id)
    if _bundle_complete(d):
        model = load_bundle(d)
    else:
        model = _train_one(m, "PM-pfcRL1", ds)
    per, _ = episode_likelihood(model.agent, ds, subject_task(ds).task_graph())
    return float(per.mean())


def _train_one(m: Manifest, model: str, ds: SubjectDataset | None) -> TrainedModel:
    sid = ds.subject_id if ds is not None else GM_DIR
    seed = cell_seed(m, sid, model, "-", "train")
    agent = build_agent(m, model, seed)
    if model in GM_MODELS:
        cfg = TrainingConfig("GM", epochs=m.n_epochs(model), seed=seed)
        return train_gm(agent, original_task(400, cell_seed(m, sid, model, "T10", "gm-task")), cfg)
    cfg = TrainingConfig("PM", epochs=m.n_epochs(model), seed=seed, restarts=m.pfc_restarts)
    if model == "PM-DDQN":
        cfg.early_stop = pfc_reference(m, ds)
    return train_pm(agent, ds, subject_task(ds), cfg)


def _train_cell(manifest: dict, cell) -> dict:
    m = Manifest.from_dict(manifest)
    model, sid, resume = cell
    d = bundle_dir(m, model, sid)
    if resume and _bundle_complete(d):
        return {"model": model, "subject": sid or GM_DIR, "status": "kept"}
    ds = _subject_by_id(m, sid) if sid else None
    trained = _train_one(m, model, ds)
    if d.exists():
        shutil.rmtree(d)
    save_bundle(trained, d)
    return {"model": model, "subject": sid or GM_DIR, "status": "trained", "epochs": len(trained.curve)}


def train_cells(m: Manifest, subjects: list, resume: bool = False) -> list:
    """GM cells once per manifest, PM cells once per subject; PM-DDQN last (it reads the pfc reference)."""
    first, last = [], []
    for model in m.models:
        if model in GM_MODELS:
            first.append((model, None, resume))
        elif model in PM_MODELS:
            for ds in subjects:
                (last if model == "PM-DDQN" else first).append((model, ds.subject_id, resume))
    return [first, last]


def cmd_train(m: Manifest, resume: bool = False) -> list:
    subjects = load_subjects(m)
    out = []
    for wave in train_cells(m, subjects, resume):
        out += _run_cells(m, _train_cell, wave)
    return out


# --------------------------------------------------------------- battery

METRIC_COLUMNS = ("model", "subject", "task", "n_trials", "normalized_reward", "normalized_reward_changed",
                  "choice_optimality", "choice_consistency")
MI_COLUMNS = ("model", "subject", "task", "i_fa", "i_aa", "n_trials")
GLM_COLUMNS = ("source", "model", "subject", "task", *[f"beta_{r}" for r in REGRESSORS], "intercept", "r2", "n",
               "degenerate")
RECOVERY_COLUMNS = ("model", "regressor", "r", "p", "slope", "r2", "n")
EFFICACY_COLUMNS = ("model", "task", "n", "n_excluded", "ratio_mean", "slope", "intercept", "r2", "p")
TTEST_COLUMNS = ("model", "task", "n", "mean_model", "mean_random", "mean_diff", "t", "df", "p", "fail")
NOTE_COLUMNS = ("stage", "model", "subject", "task", "note")


def _glm_row(source, model, subject, task, prof: GlmProfile) -> dict:
    row = {"source": source, "model": model, "subject": subject, "task": task, "intercept": prof.intercept,
           "r2": prof.r2, "n": prof.n, "degenerate": sorted(prof.degenerate)}
    for r in REGRESSORS:
        row[f"beta_{r}"] = prof.beta(r)
    return row


def _load_model(m: Manifest, model: str, sid: str):
    if model == BASELINE:
        return TrainedModel(RandomAgent())
    d = bundle_dir(m, model, sid)
    if not (d / "manifest.json").exists():
        return None
    return load_bundle(d)


def _battery_cell(manifest: dict, cell) -> dict:
    """Frozen evaluation of one (subject, model) on every task, plus its recovery profile."""
    m = Manifest.from_dict(manifest)
    model, sid = cell
    trained = _load_model(m, model, sid)
    res = {"metrics": [], "mi": [], "glm": [], "notes": []}
    if trained is None:
        res["notes"].append({"stage": "battery", "model": model, "subject": sid, "task": "*",
                             "note": "missing bundle; cell skipped"})
        return res
    for task_id in sorted(m.tasks, key=lambda t: int(t[1:])):
        spec = eval_spec(m, task_id)
        rng = np.random.default_rng(cell_seed(m, sid, model, task_id, "eval"))
        ds = freeze_and_evaluate(trained, spec, rng=rng, fast_state=m.fast_state, subject_id=sid)
        dest = Path(m.out) / "battery" / model / sid
        dest.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, dest / f"{task_id}.csv")
        graph = spec.task_graph()
        oracle = build_oracle(ds, graph)
        res["metrics"].append({
            "model": model, "subject": sid, "task": task_id, "n_trials": len(ds),
            "normalized_reward": normalized_reward(ds, oracle.max_value),
            "normalized_reward_changed": normalized_reward(ds, oracle.max_value, action_changed=True),
            "choice_optimality": float(choice_optimality(ds, oracle).mean()),
            "choice_consistency": choice_consistency(ds),
        })
        mi = episode_mi(ds, oracle, graph, model)
        res["mi"].append({"model": model, "subject": sid, "task": task_id, "i_fa": mi.i_fa, "i_aa": mi.i_aa,
                          "n_trials": mi.n_trials})
    if model in PM_MODELS:
        human = _subject_by_id(m, sid)
        res["glm"].append(_glm_row("model", model, sid, "T10", recovery_profile(m, trained, human, model)))
    return res


def recovery_profile(m: Manifest, trained: TrainedModel, human: SubjectDataset, model: str = "") -> GlmProfile:
    """Mean profile of the fitted model replaying the subject's own task ``recovery_sessions`` times."""
    spec = subject_task(human)
    graph = spec.task_graph()
    profiles = []
    for k in range(m.recovery_sessions):
        rng = np.random.default_rng(cell_seed(m, human.subject_id, model, "T10", f"recovery{k}"))
        ds = freeze_and_evaluate(trained, spec, rng=rng, fast_state=m.fast_state, subject_id=human.subject_id)
        profiles.append(glm_profile(ds, build_oracle(ds, graph)))
    return average_profiles(human.subject_id, profiles)


def average_profiles(subject_id: str, profiles: list) -> GlmProfile:
    betas = {}
    for r in REGRESSORS:
        vals = np.array([p.beta(r) for p in profiles], dtype=float)
        vals = vals[np.isfinite(vals)]
        betas[r] = float(vals.mean()) if vals.size else math.nan
    inter = float(np.mean([p.intercept for p in profiles]))
    r2 = np.array([p.r2 for p in profiles], dtype=float)
    r2 = float(r2[np.isfinite(r2)].mean()) if np.isfinite(r2).any() else math.nan
    degenerate = sorted({d for p in profiles for d in p.degenerate if all(d in q.degenerate for q in profiles)})
    return GlmProfile(subject_id, betas, inter, r2, int(sum(p.n for p in profiles)), degenerate)


def _task_key(t):
    return int(str(t)[1:])


def ttest_rows(metrics: list, models: list, tasks: list, column: str = "normalized_reward") -> list:
    """Paired (over subjects) t-test of every model against the random agent, with FAIL labels."""
    table = {(r["model"], r["subject"], r["task"]): r[column] for r in metrics}
    rows = []
    for model in models:
        for task in sorted(tasks, key=_task_key):
            subs = sorted({s for (mo, s, t) in table if mo == model and t == task
                           and (BASELINE, s, t) in table})
            a = np.array([table[(model, s, task)] for s in subs], dtype=float)
            b = np.array([table[(BASELINE, s, task)] for s in subs], dtype=float)
            ok = np.isfinite(a) & np.isfinite(b)
            a, b = a[ok], b[ok]
            row = {"model": model, "task": task, "n": len(a),
                   "mean_model": float(a.mean()) if a.size else math.nan,
                   "mean_random": float(b.mean()) if b.size else math.nan}
            if len(a) >= 2:
                tt = paired_ttest(a, b)
                row.update(mean_diff=tt.mean_diff, t=tt.t, df=tt.df, p=tt.p)
            else:
                row.update(mean_diff=math.nan, t=math.nan, df=max(len(a) - 1, 0), p=math.nan)
            row["fail"] = fail_label(row["p"])
            rows.append(row)
    return rows


def fail_label(p: float) -> bool:
    """FAIL iff p > 0.05; an undefined test (nan) cannot show a difference and is a FAIL too."""
    return not (p <= ALPHA)


def cmd_battery(m: Manifest) -> dict:
    subjects = load_subjects(m)
    ids = [ds.subject_id for ds in subjects]
    # the random agent is the reference of every t-test, so it always runs
    models = [BASELINE] + [x for x in m.models if x != BASELINE]
    cells = [(model, sid) for model in models for sid in ids]
    results = _run_cells(m, _battery_cell, cells)
    metrics = [r for res in results for r in res["metrics"]]
    mi = [r for res in results for r in res["mi"]]
    notes = [r for res in results for r in res["notes"]]
    glm = []
    for ds in subjects:
        glm.append(_glm_row("human", "", ds.subject_id, "T10",
                            glm_profile(ds, build_oracle(ds, subject_task(ds).task_graph()))))
    glm += [r for res in results for r in res["glm"]]
    write_reports(m, metrics, mi, glm, notes)
    n_base = sum(1 for r in metrics if r["model"] == BASELINE)
    return {"cells": len(cells), "datasets": len(metrics) - n_base, "baseline_datasets": n_base,
            "notes": len(notes)}


def _profile_from_row(row) -> GlmProfile:
    betas = {r: float(row[f"beta_{r}"]) for r in REGRESSORS}
    return GlmProfile(row["subject"], betas, float(row["intercept"]), float(row["r2"]), int(row["n"]))


def recovery_rows(glm: list) -> list:
    human = {r["subject"]: r for r in glm if r["source"] == "human"}
    rows = []
    for model in sorted({r["model"] for r in glm if r["source"] == "model"}, key=MODEL_IDS.index):
        mod = {r["subject"]: r for r in glm if r["source"] == "model" and r["model"] == model}
        subs = sorted(set(mod) & set(human))
        hh = [_as_profile(human[s]) for s in subs]
        hm = [_as_profile(mod[s]) for s in subs]
        for rec in recovery_test(hh, hm, regressors=REGRESSORS):
            rows.append({"model": model, "regressor": rec.regressor, "r": rec.r, "p": rec.p, "slope": rec.slope,
                         "r2": rec.r2, "n": rec.n})
    return rows


def _as_profile(row) -> GlmProfile:
    if isinstance(row.get("beta_uncertainty"), str):
        return _profile_from_row(row)
    return GlmProfile(row["subject"], {r: row[f"beta_{r}"] for r in REGRESSORS}, row["intercept"], row["r2"],
                      row["n"])


def efficacy_rows(mi: list) -> list:
    from .analysis import MiReport
    rows = []
    keys = sorted({(r["model"], r["task"]) for r in mi}, key=lambda k: (MODEL_IDS.index(k[0]), _task_key(k[1])))
    for model, task in keys:
        reps = [MiReport(r["subject"], task, model, float(r["i_fa"]), float(r["i_aa"]), int(r["n_trials"]))
                for r in mi if r["model"] == model and r["task"] == task]
        eff = encoding_efficacy(reps)
        rows.append({"model": model, "task": task, "n": eff.n, "n_excluded": eff.n_excluded,
                     "ratio_mean": eff.ratio_mean, "slope": eff.slope, "intercept": eff.intercept, "r2": eff.r2,
                     "p": eff.p})
    return rows


def _order(rows, keys=("model", "subject", "task")):
    def k(r):
        out = []
        for key in keys:
            v = r.get(key, "")
            if key == "model":
                out.append(MODEL_IDS.index(v) if v in MODEL_IDS else -1)
            elif key == "task" and str(v).startswith("T"):
                out.append(_task_key(v))
            else:
                out.append(v)
        return tuple(out)
    return sorted(rows, key=k)


def write_reports(m: Manifest, metrics, mi, glm, notes) -> None:
    rep = Path(m.out) / "reports"
    if rep.exists():
        shutil.rmtree(rep)
    metrics, mi = _order(metrics), _order(mi)
    glm = sorted(glm, key=lambda r: (r["source"] != "human", MODEL_IDS.index(r["model"]) if r["model"] else -1,
                                     r["subject"]))
    write_csv(rep / "behavior_metrics.csv", METRIC_COLUMNS, metrics)
    write_csv(rep / "mi_reports.csv", MI_COLUMNS, mi)
    write_csv(rep / "glm_profiles.csv", GLM_COLUMNS, glm)
    write_csv(rep / "recovery.csv", RECOVERY_COLUMNS, recovery_rows(glm))
    write_csv(rep / "efficacy.csv", EFFICACY_COLUMNS, efficacy_rows(mi))
    models = [BASELINE] + [x for x in m.models if x != BASELINE]
    write_csv(rep / "ttests.csv", TTEST_COLUMNS, ttest_rows(metrics, models, m.tasks))
    write_csv(rep / "ttests_changed.csv", TTEST_COLUMNS,
              ttest_rows(metrics, models, m.tasks, "normalized_reward_changed"))
    write_csv(rep / "notes.csv", NOTE_COLUMNS, _order(notes))


# ---------------------------------------------------------------- report

def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def cmd_report(out_dir) -> dict:
    """Figure-shaped tables built from ``reports/`` and the training curves."""
    out = Path(out_dir)
    rep = out / "reports"
    needed = ["behavior_metrics.csv", "mi_reports.csv", "glm_profiles.csv", "ttests.csv"]
    missing = [n for n in needed if not (rep / n).exists()]
    if missing:
        raise ManifestError(f"{rep}: missing report files {missing}; run 'battery' first")
    metrics = read_csv(rep / "behavior_metrics.csv")
    if not metrics:
        raise ManifestError(f"{rep}: behavior_metrics.csv has no rows")
    fig = out / "figures"
    if fig.exists():
        shutil.rmtree(fig)
    models = [mo for mo in MODEL_IDS if any(r["model"] == mo for r in metrics)]
    tasks = sorted({r["task"] for r in metrics}, key=_task_key)

    # recovery scatter (human beta vs model beta per subject)
    glm = read_csv(rep / "glm_profiles.csv")
    human = {r["subject"]: r for r in glm if r["source"] == "human"}
    scatter = []
    for r in glm:
        if r["source"] != "model" or r["subject"] not in human:
            continue
        for reg in ("uncertainty", "goal"):
            scatter.append({"model": r["model"], "subject": r["subject"], "regressor": reg,
                            "beta_human": _num(human[r["subject"]][f"beta_{reg}"]),
                            "beta_model": _num(r[f"beta_{reg}"])})
    write_csv(fig / "recovery_scatter.csv", ("model", "subject", "regressor", "beta_human", "beta_model"), scatter)

    def grid(name, column, tt_file):
        tt = {(r["model"], r["task"]): r for r in read_csv(rep / tt_file)} if (rep / tt_file).exists() else {}
        rows = []
        for task in tasks:
            row = {"task": task}
            for mo in models:
                vals = [_num(r[column]) for r in metrics if r["model"] == mo and r["task"] == task]
                vals = [v for v in vals if not math.isnan(v)]
                row[mo] = float(np.mean(vals)) if vals else math.nan
                row[f"{mo}_FAIL"] = tt.get((mo, task), {}).get("fail", "")
            rows.append(row)
        cols = ["task"] + [c for mo in models for c in (mo, f"{mo}_FAIL")]
        write_csv(fig / name, cols, rows)

    grid("normalized_reward_grid.csv", "normalized_reward", "ttests.csv")
    grid("changed_reward_grid.csv", "normalized_reward_changed", "ttests_changed.csv")

    cons = []
    for task in tasks:
        row = {"task": task}
        for mo in models:
            vals = [_num(r["choice_consistency"]) for r in metrics if r["model"] == mo and r["task"] == task]
            vals = [v for v in vals if not math.isnan(v)]
            row[mo] = float(np.mean(vals)) if vals else math.nan
        cons.append(row)
    write_csv(fig / "consistency_grid.csv", ["task"] + models, cons)

    mi = read_csv(rep / "mi_reports.csv")
    write_csv(fig / "mi_plane.csv", ("task", "model", "subject", "i_fa", "i_aa"),
              _order([{k: r[k] for k in ("task", "model", "subject", "i_fa", "i_aa")} for r in mi],
                     ("task", "model", "subject")))

    curves = []
    mdir = out / "models"
    if mdir.exists():
        for model_dir in sorted(mdir.iterdir()):
            for who in sorted(model_dir.iterdir()):
                f = who / "curve.csv"
                if f.exists():
                    for r in read_csv(f):
                        curves.append({"model": model_dir.name, "subject": who.name, **r})
    write_csv(fig / "training_curves.csv",
              ("model", "subject", "epoch", "games", "loss", "mean_reward", "mean_likelihood"), curves)
    return {"figures": sorted(p.name for p in fig.iterdir())}


# -------------------------------------------------------------- validate

def cmd_validate(m: Manifest) -> list:
    """Problems with the corpus or external data against the original task; empty when clean."""
    problems = []
    d = corpus_dir(m)
    if not d.exists():
        return problems
    try:
        subjects = load_subjects(m)
    except (ManifestError, DatasetError) as e:
        return [str(e)]
    for ds in subjects:
        for v in validate_against_task(ds, subject_task(ds)):
            problems.append(f"{ds.subject_id} row {v.row}: {v.kind}: {v.message}")
    return problems


def write_manifest_echo(m: Manifest) -> None:
    out = Path(m.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
