"""Deep agents: double DQN over a dense net and an LSTM advantage actor-critic.

Both read the same one-hot input built by :func:`encode_obs` (observation,
previous action, previous reward). Weights are learnable state and freeze;
the previous action/reward and the LSTM hidden state are fast state and
keep evolving in a frozen agent.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import REWARD_SET
from .nn import (Adam, DenseNet, LstmPolicyNet, ReplayBuffer, clip_by_global_norm, dense_backward,
                 dense_forward, lstm_backward, lstm_step, soft_update)
from .rl import Agent, Observation, Transition, decode_array, encode_array, n_observations, obs_index

N_OBS = n_observations(9)
_REWARD_INDEX = {float(r): i for i, r in enumerate(REWARD_SET)}


def input_dim(n_obs: int = N_OBS) -> int:
    return n_obs + 2 + len(REWARD_SET)


def encode_obs(state: int, prev_action: int, prev_reward: float, n_obs: int = N_OBS) -> np.ndarray:
    """One-hot observation index, previous action and previous reward, concatenated."""
    if not 0 <= state < n_obs:
        raise ValueError(f"observation index {state} outside [0, {n_obs})")
    if prev_action not in (0, 1):
        raise ValueError(f"previous action must be 0 or 1, got {prev_action!r}")
    try:
        ri = _REWARD_INDEX[float(prev_reward)]
    except KeyError:
        raise ValueError(f"reward {prev_reward!r} is not one of {REWARD_SET}") from None
    x = np.zeros(input_dim(n_obs))
    x[state] = 1.0
    x[n_obs + prev_action] = 1.0
    x[n_obs + 2 + ri] = 1.0
    return x


def decode_obs(x, n_obs: int = N_OBS):
    x = np.asarray(x)
    return (int(np.argmax(x[:n_obs])), int(np.argmax(x[n_obs:n_obs + 2])),
            REWARD_SET[int(np.argmax(x[n_obs + 2:]))])


def softmax(z):
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _PrevMixin:
    """Previous action/reward bookkeeping shared by both deep agents."""

    def _reset_prev(self):
        self.prev_action = 0
        self.prev_reward = 0.0

    def _input(self, obs: Observation) -> np.ndarray:
        return encode_obs(obs_index(obs.state, obs.goal), self.prev_action, self.prev_reward, self.n_obs)

    def _advance_prev(self, tr: Transition):
        self.prev_action = int(tr.action)
        self.prev_reward = float(tr.reward)


# ------------------------------------------------------------------- DDQN

def ddqn_target(r, done, gamma: float, q_online_next, q_target_next):
    """r if done, else r + gamma * q_target[argmax q_online]; works row-wise on batches."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    qo = np.asarray(q_online_next, dtype=float)
    qt = np.asarray(q_target_next, dtype=float)
    if qo.ndim == 1:
        if done:
            return float(r)
        return float(r + gamma * qt[int(np.argmax(qo))])
    a_star = np.argmax(qo, axis=1)
    boot = qt[np.arange(len(qt)), a_star]
    return np.asarray(r, dtype=float) + gamma * boot * (1.0 - np.asarray(done, dtype=float))


@dataclass
class DDQNConfig:
    gamma: float = 0.99
    lr: float = 0.001
    tau: float = 0.001
    batch_size: int = 32
    capacity: int = 10_000
    hidden: tuple = (64, 64)
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_fraction: float = 0.2
    inv_temp: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


def epsilon_at(cfg: DDQNConfig, progress: float) -> float:
    """Linear anneal from eps_start to eps_end over the first eps_fraction of training."""
    if cfg.eps_fraction <= 0:
        return cfg.eps_end
    frac = min(max(progress / cfg.eps_fraction, 0.0), 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def ddqn_loss_and_grads(online: DenseNet, target: DenseNet, batch, gamma: float):
    """Mean squared TD error against the double-DQN target and its weight gradients."""
    obs, action, reward, next_obs, done = batch
    q_next_online, _ = dense_forward(online, next_obs)
    q_next_target, _ = dense_forward(target, next_obs)
    y = ddqn_target(reward, done, gamma, q_next_online, q_next_target)
    q, cache = dense_forward(online, obs)
    idx = np.arange(len(action))
    err = q[idx, action] - y
    loss = float(np.mean(err * err))
    dq = np.zeros_like(q)
    dq[idx, action] = 2.0 * err / len(action)
    grads, _ = dense_backward(online, cache, dq)
    return loss, grads


class DDQNAgent(_PrevMixin, Agent):
    kind = "ddqn"

    def __init__(self, config: DDQNConfig | None = None, n_obs: int = N_OBS):
        self.config = config or DDQNConfig()
        self.n_obs = n_obs
        cfg = self.config
        self.rng = np.random.default_rng(cfg.seed)
        self.online = DenseNet([input_dim(n_obs), *cfg.hidden, 2], self.rng)
        self.target = self.online.copy()
        self.opt = Adam(self.online.params, lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.capacity, input_dim(n_obs))
        self.inv_temp = cfg.inv_temp
        self._reset_prev()

    def start_task(self, graph, env=None):
        self._reset_prev()

    def q(self, obs: Observation) -> np.ndarray:
        return dense_forward(self.online, self._input(obs))[0]

    def act(self, obs):
        return softmax(self.inv_temp * self.q(obs))

    def explore(self, obs: Observation, eps: float, rng: np.random.Generator) -> int:
        if rng.random() < eps:
            return int(rng.integers(2))
        q = self.q(obs)
        return int(q[1] > q[0])

    def observe(self, tr):
        self._advance_prev(tr)

    def learnable_state(self):
        out = {f"online.{k}": v for k, v in self.online.params.items()}
        out.update({f"target.{k}": v for k, v in self.target.params.items()})
        out["inv_temp"] = np.array([self.inv_temp])
        return out

    def checkpoint(self):
        d = super().checkpoint()
        cfg = asdict(self.config)
        cfg["hidden"] = list(self.config.hidden)
        d["params"] = {"config": cfg, "n_obs": self.n_obs, "inv_temp": self.inv_temp,
                       "prev": [self.prev_action, self.prev_reward]}
        arrays = dict(self.learnable_state())
        arrays.pop("inv_temp")
        arrays.update({f"adam.{k}": v for k, v in self.opt.state().items()})
        d["arrays"] = {k: encode_array(v) for k, v in arrays.items()}
        return d

    @classmethod
    def from_checkpoint(cls, d):
        p = d["params"]
        agent = cls(DDQNConfig(**p["config"]), p["n_obs"])
        agent.inv_temp = float(p["inv_temp"])
        if "prev" in p:
            agent.prev_action, agent.prev_reward = int(p["prev"][0]), float(p["prev"][1])
        arrays = {k: decode_array(v) for k, v in d["arrays"].items()}
        for k in agent.online.params:
            agent.online.params[k] = arrays[f"online.{k}"]
            agent.target.params[k] = arrays[f"target.{k}"]
        agent.opt = Adam(agent.online.params, lr=agent.config.lr)
        agent.opt.load({k[5:]: v for k, v in arrays.items() if k.startswith("adam.")})
        return agent


def ddqn_train_step(agent: DDQNAgent, buffer: ReplayBuffer | None = None, rng: np.random.Generator | None = None):
    """One minibatch Adam step plus soft target update; ``None`` when the buffer is underfilled."""
    agent._check_mutable()
    cfg = agent.config
    buffer = buffer or agent.buffer
    batch = buffer.sample(cfg.batch_size, rng or agent.rng)
    if batch is None:
        return None
    loss, grads = ddqn_loss_and_grads(agent.online, agent.target, batch, cfg.gamma)
    agent.opt.step(agent.online.params, grads)
    soft_update(agent.target.params, agent.online.params, cfg.tau)
    return loss


def fit_inv_temp(q_values, actions, bounds=(1e-3, 20.0)) -> float:
    """Maximum-likelihood softmax inverse temperature for fixed Q rows and observed actions."""
    from scipy.optimize import minimize_scalar

    q = np.asarray(q_values, dtype=float)
    a = np.asarray(actions, dtype=int)
    if len(a) == 0:
        return 1.0
    diff = q[np.arange(len(a)), a] - q[np.arange(len(a)), 1 - a]

    def nll(logb):
        return float(np.logaddexp(0.0, -math.exp(logb) * diff).sum())

    res = minimize_scalar(nll, bounds=(math.log(bounds[0]), math.log(bounds[1])), method="bounded",
                          options={"xatol": 1e-6})
    return float(math.exp(res.x))


# ---------------------------------------------------------------- meta-RL

@dataclass
class MetaRLConfig:
    hidden: int = 256
    lr: float = 0.001
    gamma: float = 0.9
    entropy_coef: float = 0.05
    value_coef: float = 0.5
    clip_norm: float = 40.0
    seed: int = 0


@dataclass
class Rollout:
    """One episode of recorded steps: lstm caches, chosen actions and rewards."""
    caches: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    values: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in reversed(range(len(rewards))):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def a2c_loss_and_grads(net: LstmPolicyNet, rollout: Rollout, gamma: float, value_coef: float,
                       entropy_coef: float, advantages=None):
    """Actor-critic loss terms and BPTT gradients for one rollout.

    loss = mean_t[-log pi(a_t) A_t + value_coef (G_t - V_t)^2 - entropy_coef H_t].
    The advantage is treated as a constant; pass ``advantages`` to fix it
    explicitly (finite-difference checks do this).
    """
    T = len(rollout)
    if T == 0:
        return {"loss": 0.0, "policy": 0.0, "value": 0.0, "entropy": 0.0}, None
    logits = np.array(rollout.logits)
    values = np.array(rollout.values)
    actions = np.array(rollout.actions, dtype=int)
    returns = discounted_returns(rollout.rewards, gamma)
    adv = returns - values if advantages is None else np.asarray(advantages, dtype=float)
    pi = softmax(logits)
    logpi = np.log(np.maximum(pi, 1e-300))
    idx = np.arange(T)
    ent = -(pi * logpi).sum(axis=1)
    pol = -(logpi[idx, actions] * adv)
    val = (returns - values) ** 2
    terms = {"policy": float(pol.mean()), "value": float(val.mean()), "entropy": float(ent.mean())}
    terms["loss"] = terms["policy"] + value_coef * terms["value"] - entropy_coef * terms["entropy"]
    onehot = np.zeros_like(pi)
    onehot[idx, actions] = 1.0
    dlog = -(onehot - pi) * adv[:, None]
    # dH/dz_j = -pi_j (log pi_j + H)
    dent = -pi * (logpi + ent[:, None])
    dlog -= entropy_coef * dent
    dlog /= T
    dval = value_coef * (-2.0 * (returns - values)) / T
    grads, _, _ = lstm_backward(net, rollout.caches, dlog, dval)
    return terms, grads


def a2c_update(agent: "MetaRLAgent", rollout: Rollout, advantages=None) -> dict:
    """Loss terms after one clipped Adam step; an empty rollout is a no-op."""
    agent._check_mutable()
    cfg = agent.config
    terms, grads = a2c_loss_and_grads(agent.net, rollout, cfg.gamma, cfg.value_coef, cfg.entropy_coef,
                                      advantages)
    if grads is None:
        return terms
    terms["grad_norm"] = clip_by_global_norm(grads, cfg.clip_norm)
    agent.opt.step(agent.net.params, grads)
    return terms


class MetaRLAgent(_PrevMixin, Agent):
    """LSTM actor-critic whose hidden state carries task knowledge across trials."""

    kind = "metarl"

    def __init__(self, config: MetaRLConfig | None = None, n_obs: int = N_OBS):
        self.config = config or MetaRLConfig()
        self.n_obs = n_obs
        self.rng = np.random.default_rng(self.config.seed)
        self.net = LstmPolicyNet(input_dim(n_obs), self.config.hidden, 2, self.rng)
        self.opt = Adam(self.net.params, lr=self.config.lr)
        self.recording: Rollout | None = None
        self.reset_fast_state()

    def reset_fast_state(self):
        self.h, self.c = self.net.initial_state()
        self._pending = None
        self._reset_prev()

    def start_task(self, graph, env=None):
        self.reset_fast_state()

    def act(self, obs):
        x = self._input(obs)
        h2, c2, logits, value, cache = lstm_step(self.net, x, self.h, self.c)
        self._pending = (h2, c2, logits, value, cache)
        return softmax(logits)

    def observe(self, tr, learn_action: int | None = None, learn_reward: float | None = None):
        """Advance the hidden state with ``tr`` as the next input.

        While recording, the rollout stores ``learn_action``/``learn_reward``
        when given (policy matching learns from the agent's own choice and the
        matching reward while its inputs follow the subject's trajectory).
        """
        if self._pending is None:
            self.act(tr.obs)
        h2, c2, logits, value, cache = self._pending
        if self.recording is not None:
            rec = self.recording
            rec.caches.append(cache)
            rec.logits.append(logits)
            rec.values.append(value)
            rec.actions.append(int(tr.action if learn_action is None else learn_action))
            rec.rewards.append(float(tr.reward if learn_reward is None else learn_reward))
        self.h, self.c = h2, c2
        self._pending = None
        self._advance_prev(tr)

    def learnable_state(self):
        return {f"net.{k}": v for k, v in self.net.params.items()}

    def checkpoint(self):
        d = super().checkpoint()
        d["params"] = {"config": asdict(self.config), "n_obs": self.n_obs,
                       "prev": [self.prev_action, self.prev_reward]}
        arrays = dict(self.learnable_state())
        arrays["fast.h"], arrays["fast.c"] = self.h, self.c
        arrays.update({f"adam.{k}": v for k, v in self.opt.state().items()})
        d["arrays"] = {k: encode_array(v) for k, v in arrays.items()}
        return d

    @classmethod
    def from_checkpoint(cls, d):
        p = d["params"]
        agent = cls(MetaRLConfig(**p["config"]), p["n_obs"])
        arrays = {k: decode_array(v) for k, v in d["arrays"].items()}
        for k in agent.net.params:
            agent.net.params[k] = arrays[f"net.{k}"]
        agent.opt = Adam(agent.net.params, lr=agent.config.lr)
        agent.opt.load({k[5:]: v for k, v in arrays.items() if k.startswith("adam.")})
        if "fast.h" in arrays:
            agent.h, agent.c = arrays["fast.h"], arrays["fast.c"]
        if "prev" in p:
            agent.prev_action, agent.prev_reward = int(p["prev"][0]), float(p["prev"][1])
        return agent
