"""Pure-Python reference for the compiled kernels in ``_kernels.pyx``.

Both implementations take the same flat arguments and must agree to
floating-point round-off; :mod:`mdtlab.kernels` picks one at import.
``pfc_choice_probs`` replays a recorded session through a prefrontal
agent and returns the probability it assigned to each recorded choice; it
is the inner loop of likelihood fitting and mirrors ``PfcAgent`` step for
step.
"""
import math

# order of the ``cfg`` vector
CFG_FIELDS = ("spe_threshold", "rpe_threshold", "forget", "prior", "max_clusters",
              "concentration", "window", "w0", "gamma")
KAPPA0 = 0.01
RESP_FLOOR = 1e-3


class _Counts:
    __slots__ = ("thr", "forget", "prior", "c")

    def __init__(self, thr, forget, prior):
        self.thr = thr
        self.forget = forget
        self.prior = prior
        self.c = [0.0, 0.0, 0.0]

    def update(self, pe):
        c = self.c
        f = self.forget
        c[0] *= f
        c[1] *= f
        c[2] *= f
        if abs(pe) <= self.thr:
            c[1] += 1.0
        elif pe > 0:
            c[2] += 1.0
        else:
            c[0] += 1.0

    def reliability(self):
        c = self.c
        return (c[1] + self.prior) / (c[0] + c[1] + c[2] + 3.0 * self.prior)


class _Mixture:
    __slots__ = ("thr", "K", "conc", "window", "b0", "n", "s1", "s2", "active", "xs", "rs")

    def __init__(self, thr, K, conc, window):
        self.thr = thr
        self.K = K
        self.conc = conc
        self.window = window
        self.b0 = 0.5 * thr * thr
        self.n = [0.0] * K
        self.s1 = [0.0] * K
        self.s2 = [0.0] * K
        self.active = [False] * K
        self.xs = []
        self.rs = []

    def _post(self, k):
        n = self.n[k]
        s1 = self.s1[k]
        kn = KAPPA0 + n
        mu = s1 / kn
        an = 1.0 + 0.5 * n
        mean = s1 / n if n > 0 else 0.0
        scatter = self.s2[k] - n * mean * mean
        if scatter < 0.0:
            scatter = 0.0
        bn = self.b0 + 0.5 * scatter + KAPPA0 * n * mean * mean / (2.0 * kn)
        return mu, kn, an, bn

    @staticmethod
    def _logpred(x, mu, kn, an, bn):
        nu = 2.0 * an
        scale2 = bn * (kn + 1.0) / (an * kn)
        z = (x - mu) * (x - mu) / (nu * scale2)
        return (math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
                - 0.5 * math.log(nu * math.pi * scale2) - 0.5 * (nu + 1.0) * math.log1p(z))

    def update(self, x):
        K = self.K
        idx = []
        logw = []
        for k in range(K):
            if self.active[k]:
                idx.append(k)
                logw.append(math.log(self.n[k]) + self._logpred(x, *self._post(k)))
        for k in range(K):
            if not self.active[k]:
                idx.append(k)
                logw.append(math.log(self.conc) + self._logpred(x, 0.0, KAPPA0, 1.0, self.b0))
                break
        m = max(logw)
        w = [math.exp(v - m) for v in logw]
        tot = sum(w)
        w = [wk if wk / tot >= RESP_FLOOR else 0.0 for wk in w]
        tot = sum(w)
        resp = [0.0] * K
        for k, wk in zip(idx, w):
            resp[k] = wk / tot
            if resp[k] > 0.0:
                self.active[k] = True
        for k in range(K):
            r = resp[k]
            self.n[k] += r
            self.s1[k] += r * x
            self.s2[k] += r * x * x
        self.xs.append(x)
        self.rs.append(resp)
        if len(self.xs) > self.window:
            ox = self.xs.pop(0)
            orr = self.rs.pop(0)
            dead = []
            for k in range(K):
                r = orr[k]
                self.n[k] -= r
                self.s1[k] -= r * ox
                self.s2[k] -= r * ox * ox
                if self.n[k] < 0.0:
                    self.n[k] = 0.0
                if self.active[k] and self.n[k] < 1e-9:
                    dead.append(k)
            for k in dead:
                self.active[k] = False
                self.n[k] = self.s1[k] = self.s2[k] = 0.0
                for r in self.rs:
                    r[k] = 0.0

    def reliability(self):
        total = sum(self.n)
        if not self.xs or total <= 0:
            return 1.0 / 3.0
        denom = total + self.conc
        chi = (self.conc / denom) / 3.0
        thr = self.thr
        for k in range(self.K):
            if not self.active[k]:
                continue
            mu, kn, an, bn = self._post(k)
            var = bn / (an - 1.0) if an > 1.0 else bn / an
            if var < 1e-6:
                var = 1e-6
            sk = math.sqrt(var) * math.sqrt(2.0)
            band = 0.5 * (math.erf((thr - mu) / sk) - math.erf((-thr - mu) / sk))
            chi += (self.n[k] / denom) * band
        return min(max(chi, 0.0), 1.0)


def pfc_choice_probs(params, variant, cfg, succ, stage, payoff, goal, s1, a1, s2, a2, s3, reward, out):
    """Fill ``out[i, 0]``/``out[i, 1]`` with the probability of the recorded stage-1/2 choice."""
    alpha, eta, inv_temp, a_alpha, a_beta, b_alpha, b_beta = (float(v) for v in params)
    spe_thr, rpe_thr, forget, prior = float(cfg[0]), float(cfg[1]), float(cfg[2]), float(cfg[3])
    K, conc, window, w0, gamma = int(cfg[4]), float(cfg[5]), int(cfg[6]), float(cfg[7]), float(cfg[8])
    n_states = len(stage)
    stage = [int(x) for x in stage]
    n_goals = len(payoff)
    pay = [[float(payoff[g][s]) for s in range(n_states)] for g in range(n_goals)]
    t = [[[0.0] * n_states for _ in range(2)] for _ in range(n_states)]
    for s in range(n_states):
        if stage[s] < 3:
            for a in range(2):
                t[s][a][int(succ[s][a][0])] += 0.5
                t[s][a][int(succ[s][a][1])] += 0.5
    q = [[0.0, 0.0] for _ in range(n_states * n_goals)]
    if variant == 1:
        rel_mb = _Counts(spe_thr, forget, prior)
        rel_mf = _Counts(rpe_thr, forget, prior)
    else:
        rel_mb = _Mixture(spe_thr, K, conc, window)
        rel_mf = _Mixture(rpe_thr, K, conc, window)
    w = w0
    stage2 = [s for s in range(n_states) if stage[s] == 2]

    def arbitrate(w):
        chi_mb = rel_mb.reliability()
        chi_mf = rel_mf.reliability()
        ra = a_alpha / (1.0 + math.exp(b_alpha * chi_mf))
        rb = a_beta / (1.0 + math.exp(b_beta * chi_mb))
        w = w + ra * (1.0 - w) - rb * w
        return 0.0 if w < 0.0 else (1.0 if w > 1.0 else w)

    def dot(row, vec):
        acc = 0.0
        for j in range(n_states):
            acc += row[j] * vec[j]
        return acc

    def choice_prob(qa, qb, chosen):
        za = inv_temp * qa
        zb = inv_temp * qb
        m = za if za > zb else zb
        ea = math.exp(za - m)
        eb = math.exp(zb - m)
        return (ea if chosen == 0 else eb) / (ea + eb)

    def forward(s, a, nxt):
        row = t[s][a]
        spe = 1.0 - row[nxt]
        k = 1.0 - eta
        for j in range(n_states):
            row[j] *= k
        row[nxt] += eta
        return spe

    for i in range(len(goal)):
        g = int(goal[i])
        pg = pay[g]
        r1, c1, r2, c2, r3 = int(s1[i]), int(a1[i]), int(s2[i]), int(a2[i]), int(s3[i])
        # stage 1
        v2 = [0.0] * n_states
        for x in stage2:
            va = dot(t[x][0], pg)
            vb = dot(t[x][1], pg)
            v2[x] = va if va > vb else vb
        mb0 = dot(t[r1][0], v2)
        mb1 = dot(t[r1][1], v2)
        o1 = r1 * n_goals + g
        qa = w * mb0 + (1.0 - w) * q[o1][0]
        qb = w * mb1 + (1.0 - w) * q[o1][1]
        out[i][0] = choice_prob(qa, qb, c1)
        spe = forward(r1, c1, r2)
        rel_mb.update(spe)
        w = arbitrate(w)
        # stage 2
        mb0 = dot(t[r2][0], pg)
        mb1 = dot(t[r2][1], pg)
        o2 = r2 * n_goals + g
        qa = w * mb0 + (1.0 - w) * q[o2][0]
        qb = w * mb1 + (1.0 - w) * q[o2][1]
        out[i][1] = choice_prob(qa, qb, c2)
        spe = forward(r2, c2, r3)
        rel_mb.update(spe)
        rpe = 0.0 + gamma * q[o2][c2] - q[o1][c1]
        q[o1][c1] += alpha * rpe
        rel_mf.update(rpe)
        rpe = float(reward[i]) - q[o2][c2]
        q[o2][c2] += alpha * rpe
        rel_mf.update(rpe)
        w = arbitrate(w)
    return out
