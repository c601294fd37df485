"""Behavioral profiling, recovery statistics, behavior metrics and information measures.

Undefined results (zero-variance regressors, empty filters, too few
points) are reported as ``nan`` rather than raised, so a battery can carry
them through to its report tables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import SubjectDataset
from .env import REWARD_SET, TaskGraph, solve_values
from .stats import UNDEFINED, pearson, t_sf_two_sided

REGRESSORS = ("uncertainty", "goal", "prev_action", "prev_state")


class RankDeficientError(ValueError):
    """Design matrix columns are linearly dependent."""


# ------------------------------------------------------------------- oracle

@dataclass
class Oracle:
    """Ideal-agent quantities for every trial of one dataset."""

    a1: np.ndarray          # ideal stage-1 action
    a2: np.ndarray          # ideal stage-2 action at the visited stage-2 state
    tie1: np.ndarray        # stage-1 action values tie
    tie2: np.ndarray
    max_value: np.ndarray   # expected value of the ideal policy from the root


def trial_p(record) -> float:
    if not math.isnan(record.p_common):
        return record.p_common
    return 0.5 if record.uncertainty else 0.9


def build_oracle(ds: SubjectDataset, graph: TaskGraph) -> Oracle:
    succ = graph.successor_array()
    table = graph.reward_table()
    n = len(ds.records)
    a1 = np.zeros(n, dtype=np.int64)
    a2 = np.zeros(n, dtype=np.int64)
    tie1 = np.zeros(n, dtype=bool)
    tie2 = np.zeros(n, dtype=bool)
    vmax = np.zeros(n)
    cache = {}
    for i, r in enumerate(ds.records):
        key = (trial_p(r), r.goal)
        if key not in cache:
            cache[key] = solve_values(succ, graph.stage_of, table[r.goal], key[0])
        q, v = cache[key]
        a1[i] = 0 if q[r.s1, 0] >= q[r.s1, 1] else 1
        a2[i] = 0 if q[r.s2, 0] >= q[r.s2, 1] else 1
        tie1[i] = q[r.s1, 0] == q[r.s1, 1]
        tie2[i] = q[r.s2, 0] == q[r.s2, 1]
        vmax[i] = v[graph.root]
    return Oracle(a1, a2, tie1, tie2, vmax)


# ---------------------------------------------------------------------- OLS

@dataclass
class OlsResult:
    betas: np.ndarray
    intercept: float
    r2: float
    residuals: np.ndarray


def collinear_columns(X: np.ndarray, tol: float = 1e-10) -> list:
    """Indices of columns that are (numerically) combinations of earlier ones, intercept included."""
    Z = np.column_stack([np.ones(len(X)), X])
    bad = []
    keep = [0]
    for j in range(1, Z.shape[1]):
        trial = Z[:, keep + [j]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] <= tol * max(s[0], 1.0):
            bad.append(j - 1)
        else:
            keep.append(j)
    return bad


def ols_fit(X, y) -> OlsResult:
    """Least squares with an intercept, solved by QR; R^2 = 1 - SSR/SST."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} rows for {k} regressors, got {n}")
    bad = collinear_columns(X)
    if bad:
        raise RankDeficientError(f"collinear design columns: {bad}")
    Z = np.column_stack([np.ones(n), X])
    Q, R = np.linalg.qr(Z)
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - Z @ coef
    sst = float(((y - y.mean()) ** 2).sum())
    ssr = float(resid @ resid)
    r2 = 1.0 - ssr / sst if sst > 0 else UNDEFINED
    return OlsResult(coef[1:], float(coef[0]), r2, resid)


# ------------------------------------------------------------------ metrics

def choice_optimality(ds: SubjectDataset, oracle: Oracle, stage: int = 1) -> np.ndarray:
    """1 where the recorded action agrees with the ideal action at that stage."""
    if stage == 1:
        return (ds.column("a1") == oracle.a1).astype(float)
    return (ds.column("a2") == oracle.a2).astype(float)


def choice_consistency(ds: SubjectDataset) -> float:
    """Share of revisits to a task state where the previous action there is repeated."""
    last = {}
    same = total = 0
    for r in ds.records:
        for s, a in ((r.s1, r.a1), (r.s2, r.a2)):
            if s in last:
                total += 1
                same += last[s] == a
            last[s] = a
    return same / total if total else UNDEFINED


def normalized_reward(ds: SubjectDataset, denominators, action_changed: bool = False) -> float:
    """Mean of reward / ideal expected value over trials with a positive denominator.

    ``action_changed`` keeps only trials whose stage-1 action differs from the
    previous trial's.
    """
    r = ds.column("reward").astype(float)
    den = np.asarray(denominators, dtype=float)
    keep = den > 0
    if action_changed:
        a1 = ds.column("a1")
        changed = np.zeros(len(a1), dtype=bool)
        changed[1:] = a1[1:] != a1[:-1]
        keep &= changed
    if not keep.any():
        return UNDEFINED
    return float(np.mean(r[keep] / den[keep]))


# ---------------------------------------------------------------- profiling

@dataclass
class GlmProfile:
    subject_id: str
    betas: dict
    intercept: float
    r2: float
    n: int
    degenerate: list = field(default_factory=list)

    def beta(self, name: str) -> float:
        return self.betas.get(name, UNDEFINED)


def glm_design(ds: SubjectDataset, oracle: Oracle):
    """(X, y, names) for the choice-optimality regression; the first trial is dropped."""
    if len(ds) < 2:
        raise ValueError("profiling needs at least two trials")
    y = choice_optimality(ds, oracle)[1:]
    unc = ds.column("uncertainty")[1:].astype(float)
    goal = (ds.column("goal")[1:] != 0).astype(float)
    prev_a = ds.column("a1")[:-1].astype(float)
    prev_s = ds.column("s2")[:-1].astype(float)
    sd = prev_s.std()
    prev_s = (prev_s - prev_s.mean()) / sd if sd > 0 else prev_s * 0.0
    X = np.column_stack([unc, goal, prev_a, prev_s])
    return X, y, list(REGRESSORS)


def glm_profile(ds: SubjectDataset, oracle: Oracle) -> GlmProfile:
    X, y, names = glm_design(ds, oracle)
    betas = {name: UNDEFINED for name in names}
    degenerate = [names[j] for j in range(X.shape[1]) if X[:, j].std() == 0]
    if y.std() == 0:
        degenerate.append("y")
        return GlmProfile(ds.subject_id, betas, float(y.mean()), UNDEFINED, len(y), degenerate)
    cols = [j for j in range(X.shape[1]) if names[j] not in degenerate]
    Xs = X[:, cols]
    dropped = collinear_columns(Xs)
    if dropped:
        degenerate += [names[cols[j]] for j in dropped]
        cols = [c for i, c in enumerate(cols) if i not in dropped]
    fit = ols_fit(X[:, cols], y)
    for j, c in enumerate(cols):
        betas[names[c]] = float(fit.betas[j])
    return GlmProfile(ds.subject_id, betas, fit.intercept, fit.r2, len(y), degenerate)


@dataclass
class RecoveryRow:
    regressor: str
    r: float
    p: float
    slope: float
    r2: float
    n: int


def recovery_test(h_human: list, h_model: list, regressors=("uncertainty", "goal")) -> list:
    """Across-subject agreement between human and model profile coefficients."""
    if len(h_human) != len(h_model):
        raise ValueError(f"profile lists differ in length: {len(h_human)} vs {len(h_model)}")
    rows = []
    for name in regressors:
        x = np.array([h.beta(name) for h in h_human])
        y = np.array([h.beta(name) for h in h_model])
        ok = np.isfinite(x) & np.isfinite(y)
        x, y = x[ok], y[ok]
        r, p = pearson(x, y)
        if x.size >= 2 and x.var() > 0:
            slope = float(np.cov(x, y, bias=True)[0, 1] / x.var())
        else:
            slope = UNDEFINED
        rows.append(RecoveryRow(name, r, p, slope, r * r if not math.isnan(r) else UNDEFINED, int(x.size)))
    return rows


# ------------------------------------------------------------- information

def _codes(seq) -> np.ndarray:
    arr = np.asarray(seq)
    if arr.ndim > 1:
        _, inv = np.unique(arr.reshape(len(arr), -1), axis=0, return_inverse=True)
    else:
        _, inv = np.unique(arr, return_inverse=True)
    return inv.ravel()


def entropy_bits(xs) -> float:
    c = np.bincount(_codes(xs)).astype(float)
    p = c[c > 0] / c.sum()
    return float(-(p * np.log2(p)).sum())


def plugin_mi(xs, ys, miller_madow: bool = False) -> float:
    """Plug-in mutual information in bits from paired discrete samples."""
    if len(xs) != len(ys):
        raise ValueError("sequences differ in length")
    n = len(xs)
    if n < 1:
        raise ValueError("need at least one sample")
    cx, cy = _codes(xs), _codes(ys)
    kx, ky = cx.max() + 1, cy.max() + 1
    joint = np.bincount(cx * ky + cy, minlength=kx * ky).reshape(kx, ky).astype(float)
    px = joint.sum(1)
    py = joint.sum(0)
    nz = joint > 0
    pj = joint[nz] / n
    outer = np.outer(px, py)[nz] / (n * n)
    mi = float((pj * np.log2(pj / outer)).sum())
    if miller_madow:
        # bias of H(X) + H(Y) - H(X,Y), each (m - 1) / (2 n ln 2)
        mi -= ((nz.sum() - 1) - (np.count_nonzero(px) - 1) - (np.count_nonzero(py) - 1)) / (2.0 * n * math.log(2))
    return max(mi, 0.0)


@dataclass
class MiReport:
    subject_id: str
    task_id: str
    model: str
    i_fa: float
    i_aa: float
    n_trials: int


def episode_codes(ds: SubjectDataset, oracle: Oracle, graph: TaskGraph) -> np.ndarray:
    """Integer code of the episode tuple (a2, terminal, ideal a2, reward) of every trial."""
    term = {s: i for i, s in enumerate(graph.terminals)}
    n_term = len(term)
    codes = np.empty(len(ds.records), dtype=np.int64)
    for i, r in enumerate(ds.records):
        codes[i] = ((r.a2 * n_term + term[r.s3]) * 2 + oracle.a2[i]) * len(REWARD_SET) + REWARD_SET.index(int(r.reward))
    return codes


def episode_mi(ds: SubjectDataset, oracle: Oracle, graph: TaskGraph, model: str = "",
               miller_madow: bool = False) -> MiReport:
    if len(ds) < 2:
        raise ValueError("episode MI needs at least two trials")
    f_prev = episode_codes(ds, oracle, graph)[:-1]
    a = ds.column("a1")[1:]
    a_star = oracle.a1[1:]
    return MiReport(ds.subject_id, ds.task_id, model, plugin_mi(f_prev, a, miller_madow),
                    plugin_mi(a, a_star, miller_madow), len(a))


@dataclass
class EfficacyResult:
    ratios: np.ndarray
    n_excluded: int
    ratio_mean: float
    slope: float
    intercept: float
    r2: float
    p: float
    n: int


def encoding_efficacy(reports: list) -> EfficacyResult:
    """Per-subject i_fa / i_aa ratios and the across-subject regression of i_aa on i_fa."""
    i_fa = np.array([r.i_fa for r in reports], dtype=float)
    i_aa = np.array([r.i_aa for r in reports], dtype=float)
    valid = i_aa > 0
    ratios = i_fa[valid] / i_aa[valid]
    ratio_mean = float(ratios.mean()) if ratios.size else UNDEFINED
    n = len(reports)
    und = EfficacyResult(ratios, int((~valid).sum()), ratio_mean, UNDEFINED, UNDEFINED, UNDEFINED, UNDEFINED, n)
    if n < 3 or i_fa.std() == 0:
        return und
    fit = ols_fit(i_fa[:, None], i_aa)
    slope = float(fit.betas[0])
    if n > 2:
        sxx = float(((i_fa - i_fa.mean()) ** 2).sum())
        s2 = float(fit.residuals @ fit.residuals) / (n - 2)
        if s2 == 0:
            p = 0.0
        else:
            p = t_sf_two_sided(slope / math.sqrt(s2 / sxx), n - 2)
    r2 = fit.r2 if not math.isnan(fit.r2) else UNDEFINED
    return EfficacyResult(ratios, und.n_excluded, ratio_mean, slope, fit.intercept, r2, p, n)
