"""Reliability-based arbitration between model-based and model-free control.

Two prefrontal agents are built here. Both learn a transition model from
state prediction errors (SPE) and a goal-indexed SARSA table from reward
prediction errors (RPE), turn each error stream into a reliability, and let
the reliabilities drive a two-state rate process for the model-based weight
``w``. They differ only in how a reliability is read off the error stream:

* ``pfc1`` counts errors into {negative, zero, positive} bins with
  exponential forgetting and takes the Dirichlet posterior mean of "zero";
* ``pfc2`` fits a sliding-window Dirichlet-process Gaussian mixture to the
  errors and takes the predictive probability that the next error is near
  zero.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, fields

import numpy as np

from .env import REWARD_SET, TaskGraph
from .rl import (Agent, Observation, Transition, decode_array, encode_array, forward_update,
                 n_observations, obs_index, sarsa_update, softmax_policy)

NEG, ZERO, POS = 0, 1, 2
MAX_TOKEN = max(REWARD_SET)


def categorize_pe(pe: float, threshold: float) -> int:
    """Zero iff ``|pe| <= threshold`` (closed band), else the sign category."""
    if abs(pe) <= threshold:
        return ZERO
    return POS if pe > 0 else NEG


class ThresholdReliability:
    """Forgetful category counts under a symmetric Dirichlet prior."""

    def __init__(self, threshold: float, forget: float = 0.9, prior: float = 1.0):
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        self.threshold = threshold
        self.forget = forget
        self.prior = prior
        self.counts = np.zeros(3)

    @property
    def reliability(self) -> float:
        c = self.counts
        return float((c[ZERO] + self.prior) / (c[0] + c[1] + c[2] + 3.0 * self.prior))

    def posterior_mean(self) -> np.ndarray:
        return (self.counts + self.prior) / (self.counts.sum() + 3.0 * self.prior)

    def update(self, pe: float) -> float:
        self.counts *= self.forget
        self.counts[categorize_pe(pe, self.threshold)] += 1.0
        return self.reliability

    def state(self) -> dict:
        return {"counts": self.counts.copy()}

    def load(self, st: dict) -> None:
        self.counts = np.array(st["counts"], dtype=float)


def reliability_threshold(est: ThresholdReliability, new_pe: float):
    chi = est.update(new_pe)
    return est, chi


def _normal_band(mu: float, var: float, half_width: float) -> float:
    """P(|x| <= half_width) for x ~ N(mu, var)."""
    sd = math.sqrt(var)
    k = sd * math.sqrt(2.0)
    return 0.5 * (math.erf((half_width - mu) / k) - math.erf((-half_width - mu) / k))


KAPPA0 = 0.01       # weak pull of cluster means toward zero
RESP_FLOOR = 1e-3   # responsibilities below this are dropped


class MixtureReliability:
    """Sliding-window Dirichlet-process Gaussian mixture over prediction errors.

    Each new error is assigned soft responsibilities over the active clusters
    plus one fresh cluster (Chinese-restaurant weights times Student-t
    posterior predictives under a normal-inverse-gamma base), and its
    sufficient statistics are added in place; the oldest error in the window
    is removed the same way. At most ``max_clusters`` are active.

    The reliability is the mixture's predictive mass inside the zero band
    ``[-threshold, threshold]``; the unseen-cluster share contributes 1/3, so
    an empty window reads 1/3 like the count-based estimator.
    """

    def __init__(self, threshold: float, max_clusters: int = 10, concentration: float = 1.0,
                 window: int = 50, prior_scale: float | None = None, kappa0: float = KAPPA0,
                 shape0: float = 1.0):
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        self.threshold = threshold
        self.max_clusters = max_clusters
        self.concentration = concentration
        self.window = window
        self.prior_scale = 0.5 * threshold * threshold if prior_scale is None else prior_scale
        self.kappa0 = kappa0
        self.shape0 = shape0
        self.n = np.zeros(max_clusters)
        self.s1 = np.zeros(max_clusters)
        self.s2 = np.zeros(max_clusters)
        self.active = np.zeros(max_clusters, dtype=bool)
        self.points: deque = deque()

    def _posterior(self, k: int):
        n, s1, s2 = self.n[k], self.s1[k], self.s2[k]
        kn = self.kappa0 + n
        mu = s1 / kn
        an = self.shape0 + 0.5 * n
        mean = s1 / n if n > 0 else 0.0
        scatter = max(s2 - n * mean * mean, 0.0)
        bn = self.prior_scale + 0.5 * scatter + self.kappa0 * n * mean * mean / (2.0 * kn)
        return mu, kn, an, bn

    def _log_predictive(self, x: float, mu: float, kn: float, an: float, bn: float) -> float:
        nu = 2.0 * an
        scale2 = bn * (kn + 1.0) / (an * kn)
        z = (x - mu) ** 2 / (nu * scale2)
        return (math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
                - 0.5 * math.log(nu * math.pi * scale2) - 0.5 * (nu + 1.0) * math.log1p(z))

    def cluster_summary(self) -> list:
        """(weight, mean, variance) for every active cluster."""
        total = self.n.sum() + self.concentration
        out = []
        for k in np.flatnonzero(self.active):
            mu, kn, an, bn = self._posterior(k)
            var = bn / (an - 1.0) if an > 1.0 else bn / an
            out.append((self.n[k] / total, mu, max(var, 1e-6)))
        return out

    @property
    def reliability(self) -> float:
        total_n = self.n.sum()
        if not self.points or total_n <= 0:
            return 1.0 / 3.0
        chi = (self.concentration / (total_n + self.concentration)) / 3.0
        for weight, mu, var in self.cluster_summary():
            chi += weight * _normal_band(mu, var, self.threshold)
        return float(min(max(chi, 0.0), 1.0))

    def update(self, pe: float) -> float:
        x = float(pe)
        idx = list(np.flatnonzero(self.active))
        logw = []
        for k in idx:
            logw.append(math.log(self.n[k]) + self._log_predictive(x, *self._posterior(k)))
        free = [k for k in range(self.max_clusters) if not self.active[k]]
        if free:
            prior = (0.0, self.kappa0, self.shape0, self.prior_scale)
            logw.append(math.log(self.concentration) + self._log_predictive(x, *prior))
            idx.append(free[0])
        m = max(logw)
        w = [math.exp(v - m) for v in logw]
        tot = sum(w)
        # drop negligible shares so a stray sliver never opens a cluster
        w = [wk if wk / tot >= RESP_FLOOR else 0.0 for wk in w]
        tot = sum(w)
        resp = np.zeros(self.max_clusters)
        for k, wk in zip(idx, w):
            resp[k] = wk / tot
        self.active |= resp > 0.0
        self.n += resp
        self.s1 += resp * x
        self.s2 += resp * x * x
        self.points.append((x, resp))
        if len(self.points) > self.window:
            ox, oresp = self.points.popleft()
            self.n -= oresp
            self.s1 -= oresp * ox
            self.s2 -= oresp * ox * ox
            np.maximum(self.n, 0.0, out=self.n)
            dead = self.active & (self.n < 1e-9)
            if dead.any():
                self.active[dead] = False
                self.n[dead] = self.s1[dead] = self.s2[dead] = 0.0
                for _, r in self.points:
                    r[dead] = 0.0
        return self.reliability

    def state(self) -> dict:
        return {
            "n": self.n.copy(), "s1": self.s1.copy(), "s2": self.s2.copy(),
            "active": self.active.astype(float),
            "window_x": np.array([p[0] for p in self.points]),
            "window_resp": np.array([p[1] for p in self.points]).reshape(len(self.points), self.max_clusters),
        }

    def load(self, st: dict) -> None:
        self.n = np.array(st["n"], dtype=float)
        self.s1 = np.array(st["s1"], dtype=float)
        self.s2 = np.array(st["s2"], dtype=float)
        self.active = np.asarray(st["active"]) > 0.5
        xs = np.asarray(st["window_x"], dtype=float).ravel()
        rs = np.asarray(st["window_resp"], dtype=float).reshape(len(xs), self.max_clusters)
        self.points = deque((float(x), r.copy()) for x, r in zip(xs, rs))


def reliability_mixture(est: MixtureReliability, new_pe: float):
    chi = est.update(new_pe)
    return est, chi


@dataclass
class ArbitrationState:
    rel_mb: float = 1.0 / 3.0
    rel_mf: float = 1.0 / 3.0
    p_mb: float = 0.5
    a_alpha: float = 1.0
    b_alpha: float = 10.0
    a_beta: float = 1.0
    b_beta: float = 10.0


def transition_rates(chi_mb: float, chi_mf: float, a_alpha: float, b_alpha: float,
                     a_beta: float, b_beta: float):
    """(MF->MB rate, MB->MF rate) for the current reliabilities."""
    alpha = a_alpha / (1.0 + math.exp(b_alpha * chi_mf))
    beta = a_beta / (1.0 + math.exp(b_beta * chi_mb))
    return alpha, beta


def arbitration_step(st: ArbitrationState, chi_mb: float, chi_mf: float) -> ArbitrationState:
    alpha, beta = transition_rates(chi_mb, chi_mf, st.a_alpha, st.b_alpha, st.a_beta, st.b_beta)
    w = st.p_mb + alpha * (1.0 - st.p_mb) - beta * st.p_mb
    st.p_mb = min(max(w, 0.0), 1.0)
    st.rel_mb, st.rel_mf = chi_mb, chi_mf
    return st


def combine_q(w: float, q_mb, q_mf) -> np.ndarray:
    return w * np.asarray(q_mb, dtype=float) + (1.0 - w) * np.asarray(q_mf, dtype=float)


@dataclass
class PfcParams:
    """Free parameters of a prefrontal agent (the ones policy matching fits)."""

    alpha: float = 0.1      # SARSA learning rate
    eta: float = 0.2        # transition-model learning rate
    inv_temp: float = 0.2
    a_alpha: float = 1.0
    a_beta: float = 1.0
    b_alpha: float = 10.0
    b_beta: float = 10.0

    @classmethod
    def names(cls) -> list:
        return [f.name for f in fields(cls)]

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names()], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PfcParams":
        return cls(*[float(v) for v in a])


# parameter box used by fitting and by the synthetic-subject priors
PFC_BOUNDS = {
    "alpha": (0.01, 0.6),
    "eta": (0.01, 0.6),
    "inv_temp": (0.01, 1.0),
    "a_alpha": (0.01, 1.0),
    "a_beta": (0.01, 1.0),
    "b_alpha": (0.0, 20.0),
    "b_beta": (0.0, 20.0),
}


@dataclass
class PfcConfig:
    """Fixed (not fitted) settings of a prefrontal agent."""

    variant: int = 1
    spe_threshold: float = 0.1
    rpe_threshold: float = 0.1 * MAX_TOKEN
    forget: float = 0.9
    prior: float = 1.0
    max_clusters: int = 10
    concentration: float = 1.0
    window: int = 50
    w0: float = 0.5
    gamma: float = 1.0


class PfcAgent(Agent):
    """Prefrontal arbitration agent (``variant`` 1: threshold, 2: mixture)."""

    def __init__(self, params: PfcParams | None = None, config: PfcConfig | None = None, n_states: int = 9):
        self.params = params or PfcParams()
        self.config = config or PfcConfig()
        if self.config.variant not in (1, 2):
            raise ValueError("variant must be 1 or 2")
        self.n_states = n_states
        self._param_vec = self.params.to_array()
        self.graph = None
        self.trace: list = []
        self._reset_fast_state()

    @property
    def kind(self) -> str:
        return f"pfc{self.config.variant}"

    def _make_estimator(self, threshold: float):
        c = self.config
        if c.variant == 1:
            return ThresholdReliability(threshold, c.forget, c.prior)
        return MixtureReliability(threshold, c.max_clusters, c.concentration, c.window)

    def _reset_fast_state(self) -> None:
        n = self.n_states
        self.q_mf = np.zeros((n_observations(n), 2))
        self.t_hat = np.zeros((n, 2, n))
        if self.graph is not None:
            for (s, a), (s0, s1) in self.graph.successors.items():
                self.t_hat[s, a, s0] += 0.5
                self.t_hat[s, a, s1] += 0.5
        self.rel_mb = self._make_estimator(self.config.spe_threshold)
        self.rel_mf = self._make_estimator(self.config.rpe_threshold)
        p = self.params
        self.arb = ArbitrationState(self.rel_mb.reliability, self.rel_mf.reliability, self.config.w0,
                                    p.a_alpha, p.b_alpha, p.a_beta, p.b_beta)
        self._pending = None
        self._last_rpe = 0.0
        self._last_spe = 0.0
        self.trace = []

    def start_task(self, graph: TaskGraph, env=None) -> None:
        self.graph = graph
        self._stage_of = graph.stage_of
        self._payoff = graph.reward_table()
        self._reset_fast_state()

    def set_params(self, params: PfcParams) -> None:
        self._check_mutable()
        self.params = params
        self._param_vec = params.to_array()
        self.arb.a_alpha, self.arb.b_alpha = params.a_alpha, params.b_alpha
        self.arb.a_beta, self.arb.b_beta = params.a_beta, params.b_beta

    @property
    def w(self) -> float:
        return self.arb.p_mb

    def q_values(self, obs: Observation):
        """(combined, model-based, model-free) action values at ``obs``."""
        s = obs.state
        payoff = self._payoff[obs.goal]
        t = self.t_hat
        if self._stage_of[s] == 2:
            q_mb = t[s] @ payoff
        else:
            v2 = np.zeros(self.n_states)
            for s2 in range(self.n_states):
                if self._stage_of[s2] == 2:
                    v2[s2] = max(t[s2, 0] @ payoff, t[s2, 1] @ payoff)
            q_mb = t[s] @ v2
        q_mf = self.q_mf[obs_index(s, obs.goal)]
        return combine_q(self.arb.p_mb, q_mb, q_mf), q_mb, q_mf.copy()

    def act(self, obs: Observation) -> np.ndarray:
        q, _, _ = self.q_values(obs)
        return softmax_policy(q, self.params.inv_temp)

    def _arbitrate(self) -> None:
        arbitration_step(self.arb, self.rel_mb.reliability, self.rel_mf.reliability)

    def observe(self, tr: Transition) -> None:
        # parameters are the learnable state; tables below are fast state and
        # keep adapting in a frozen agent
        s, a = tr.obs.state, tr.action
        spe = forward_update(self.t_hat, s, a, tr.next_state, self.params.eta)
        self.rel_mb.update(spe)
        self._last_spe = spe
        o = obs_index(s, tr.obs.goal)
        alpha, gamma = self.params.alpha, self.config.gamma
        if self._pending is not None:
            po, pa, pr = self._pending
            rpe = sarsa_update(self.q_mf, po, pa, pr, o, a, alpha, gamma)
            self.rel_mf.update(rpe)
            self._last_rpe = rpe
            self._pending = None
        if tr.done:
            rpe = sarsa_update(self.q_mf, o, a, tr.reward, None, None, alpha, gamma)
            self.rel_mf.update(rpe)
            self._last_rpe = rpe
        else:
            self._pending = (o, a, tr.reward)
        self._arbitrate()
        if tr.done:
            self.trace.append({
                "trial": len(self.trace), "chi_mb": self.rel_mb.reliability,
                "chi_mf": self.rel_mf.reliability, "w": self.arb.p_mb,
                "rpe": self._last_rpe, "spe": self._last_spe,
            })

    def learnable_state(self) -> dict:
        return {"params": self._param_vec}

    def checkpoint(self) -> dict:
        d = super().checkpoint()
        d["kind"] = self.kind
        d["params"] = {"pfc": asdict(self.params), "config": asdict(self.config), "n_states": self.n_states,
                       "graph": None if self.graph is None else self.graph.to_dict()}
        arrays = {"q_mf": self.q_mf, "t_hat": self.t_hat,
                  "arbitration": np.array([self.arb.rel_mb, self.arb.rel_mf, self.arb.p_mb])}
        for prefix, est in (("rel_mb", self.rel_mb), ("rel_mf", self.rel_mf)):
            for key, val in est.state().items():
                arrays[f"{prefix}.{key}"] = val
        d["arrays"] = {k: encode_array(v) for k, v in arrays.items()}
        d["pending"] = None if self._pending is None else list(self._pending)
        return d

    @classmethod
    def from_checkpoint(cls, d: dict) -> "PfcAgent":
        p = d["params"]
        agent = cls(PfcParams(**p["pfc"]), PfcConfig(**p["config"]), p["n_states"])
        if p.get("graph"):
            agent.start_task(TaskGraph.from_dict(p["graph"]))
        arrays = {k: decode_array(v) for k, v in d["arrays"].items()}
        agent.q_mf = arrays["q_mf"]
        agent.t_hat = arrays["t_hat"]
        agent.arb.rel_mb, agent.arb.rel_mf, agent.arb.p_mb = (float(x) for x in arrays["arbitration"])
        for prefix, est in (("rel_mb", agent.rel_mb), ("rel_mf", agent.rel_mf)):
            est.load({k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + ".")})
        pend = d.get("pending")
        agent._pending = None if pend is None else (int(pend[0]), int(pend[1]), float(pend[2]))
        return agent


def pfc_agent_step(agent: PfcAgent, obs: Observation, feedback: Transition | None = None) -> np.ndarray:
    """Feed back the previous step (if any), then return the choice distribution at ``obs``."""
    if feedback is not None:
        agent.observe(feedback)
    return agent.act(obs)


TRACE_COLUMNS = ("trial", "chi_mb", "chi_mf", "w", "rpe", "spe")


def write_trace_csv(trace: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row["trial"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])
