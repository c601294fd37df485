# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled replay likelihood for the prefrontal arbitration agents.

Same arguments and results as ``_kernels_py.pfc_choice_probs``; the
mixture estimator keeps its window in a ring buffer.
"""
from libc.math cimport exp, log, log1p, lgamma, sqrt, erf, fabs, M_PI
from libc.stdlib cimport malloc, calloc, free

DEF MAXS = 64
DEF KAPPA0 = 0.01
DEF RESP_FLOOR = 1e-3


cdef struct Counts:
    double thr, forget, prior
    double c[3]


cdef inline void counts_update(Counts* e, double pe) noexcept nogil:
    e.c[0] *= e.forget
    e.c[1] *= e.forget
    e.c[2] *= e.forget
    if fabs(pe) <= e.thr:
        e.c[1] += 1.0
    elif pe > 0:
        e.c[2] += 1.0
    else:
        e.c[0] += 1.0


cdef inline double counts_rel(Counts* e) noexcept nogil:
    return (e.c[1] + e.prior) / (e.c[0] + e.c[1] + e.c[2] + 3.0 * e.prior)


cdef struct Mixture:
    double thr, conc, b0
    int K, window, head, size
    double* n
    double* s1
    double* s2
    int* active
    double* xs      # ring of window + 1 points
    double* rs      # (window + 1) x K responsibilities


cdef int mix_init(Mixture* m, double thr, int K, double conc, int window):
    m.thr = thr
    m.K = K
    m.conc = conc
    m.window = window
    m.b0 = 0.5 * thr * thr
    m.head = 0
    m.size = 0
    m.n = <double*>calloc(K, sizeof(double))
    m.s1 = <double*>calloc(K, sizeof(double))
    m.s2 = <double*>calloc(K, sizeof(double))
    m.active = <int*>calloc(K, sizeof(int))
    m.xs = <double*>calloc(window + 1, sizeof(double))
    m.rs = <double*>calloc((window + 1) * K, sizeof(double))
    if not (m.n and m.s1 and m.s2 and m.active and m.xs and m.rs):
        return -1
    return 0


cdef void mix_free(Mixture* m):
    free(m.n)
    free(m.s1)
    free(m.s2)
    free(m.active)
    free(m.xs)
    free(m.rs)


cdef inline void mix_post(Mixture* m, int k, double* mu, double* kn, double* an, double* bn) noexcept nogil:
    cdef double n = m.n[k]
    cdef double s1 = m.s1[k]
    cdef double mean = s1 / n if n > 0 else 0.0
    cdef double scatter = m.s2[k] - n * mean * mean
    if scatter < 0.0:
        scatter = 0.0
    kn[0] = KAPPA0 + n
    mu[0] = s1 / kn[0]
    an[0] = 1.0 + 0.5 * n
    bn[0] = m.b0 + 0.5 * scatter + KAPPA0 * n * mean * mean / (2.0 * kn[0])


cdef inline double logpred(double x, double mu, double kn, double an, double bn) noexcept nogil:
    cdef double nu = 2.0 * an
    cdef double scale2 = bn * (kn + 1.0) / (an * kn)
    cdef double z = (x - mu) * (x - mu) / (nu * scale2)
    return (lgamma(0.5 * (nu + 1.0)) - lgamma(0.5 * nu)
            - 0.5 * log(nu * M_PI * scale2) - 0.5 * (nu + 1.0) * log1p(z))


cdef void mix_update(Mixture* m, double x) noexcept nogil:
    cdef int K = m.K
    cdef int k, j, slot, cnt = 0
    cdef int idx[MAXS]
    cdef double lw[MAXS]
    cdef double mu, kn, an, bn, mx, tot, r, ox
    cdef double* resp
    for k in range(K):
        if m.active[k]:
            mix_post(m, k, &mu, &kn, &an, &bn)
            idx[cnt] = k
            lw[cnt] = log(m.n[k]) + logpred(x, mu, kn, an, bn)
            cnt += 1
    for k in range(K):
        if not m.active[k]:
            idx[cnt] = k
            lw[cnt] = log(m.conc) + logpred(x, 0.0, KAPPA0, 1.0, m.b0)
            cnt += 1
            break
    mx = lw[0]
    for j in range(1, cnt):
        if lw[j] > mx:
            mx = lw[j]
    tot = 0.0
    for j in range(cnt):
        lw[j] = exp(lw[j] - mx)
        tot += lw[j]
    r = tot
    tot = 0.0
    for j in range(cnt):
        if lw[j] / r < RESP_FLOOR:
            lw[j] = 0.0
        tot += lw[j]
    slot = (m.head + m.size) % (m.window + 1)
    resp = m.rs + slot * K
    for k in range(K):
        resp[k] = 0.0
    for j in range(cnt):
        k = idx[j]
        resp[k] = lw[j] / tot
        if resp[k] > 0.0:
            m.active[k] = 1
    for k in range(K):
        r = resp[k]
        m.n[k] += r
        m.s1[k] += r * x
        m.s2[k] += r * x * x
    m.xs[slot] = x
    m.size += 1
    if m.size > m.window:
        ox = m.xs[m.head]
        resp = m.rs + m.head * K
        m.head = (m.head + 1) % (m.window + 1)
        m.size -= 1
        for k in range(K):
            r = resp[k]
            m.n[k] -= r
            m.s1[k] -= r * ox
            m.s2[k] -= r * ox * ox
            if m.n[k] < 0.0:
                m.n[k] = 0.0
        for k in range(K):
            if m.active[k] and m.n[k] < 1e-9:
                m.active[k] = 0
                m.n[k] = 0.0
                m.s1[k] = 0.0
                m.s2[k] = 0.0
                for j in range(m.size):
                    m.rs[((m.head + j) % (m.window + 1)) * K + k] = 0.0


cdef double mix_rel(Mixture* m) noexcept nogil:
    cdef double total = 0.0, denom, chi, mu, kn, an, bn, var, sk
    cdef int k
    for k in range(m.K):
        total += m.n[k]
    if m.size == 0 or total <= 0:
        return 1.0 / 3.0
    denom = total + m.conc
    chi = (m.conc / denom) / 3.0
    for k in range(m.K):
        if not m.active[k]:
            continue
        mix_post(m, k, &mu, &kn, &an, &bn)
        var = bn / (an - 1.0) if an > 1.0 else bn / an
        if var < 1e-6:
            var = 1e-6
        sk = sqrt(var) * sqrt(2.0)
        chi += (m.n[k] / denom) * (0.5 * (erf((m.thr - mu) / sk) - erf((-m.thr - mu) / sk)))
    if chi < 0.0:
        return 0.0
    if chi > 1.0:
        return 1.0
    return chi


cdef struct Rel:
    int variant
    Counts cmb, cmf
    Mixture mmb, mmf


cdef inline double rel_get(Rel* r, int mb) noexcept nogil:
    if r.variant == 1:
        return counts_rel(&r.cmb) if mb else counts_rel(&r.cmf)
    return mix_rel(&r.mmb) if mb else mix_rel(&r.mmf)


cdef inline void rel_update(Rel* r, int mb, double pe) noexcept nogil:
    if r.variant == 1:
        if mb:
            counts_update(&r.cmb, pe)
        else:
            counts_update(&r.cmf, pe)
    elif mb:
        mix_update(&r.mmb, pe)
    else:
        mix_update(&r.mmf, pe)


cdef inline double softmax_pick(double qa, double qb, double beta, int chosen) noexcept nogil:
    cdef double za = beta * qa, zb = beta * qb
    cdef double m = za if za > zb else zb
    cdef double ea = exp(za - m), eb = exp(zb - m)
    return (ea if chosen == 0 else eb) / (ea + eb)


def pfc_choice_probs(double[::1] params, int variant, double[::1] cfg, long[:, :, ::1] succ,
                     long[::1] stage, double[:, ::1] payoff, long[::1] goal, long[::1] s1, long[::1] a1,
                     long[::1] s2, long[::1] a2, long[::1] s3, double[::1] reward, double[:, ::1] out):
    """Fill ``out`` with the probability of each recorded stage-1/2 choice."""
    cdef double alpha = params[0], eta = params[1], beta = params[2]
    cdef double a_alpha = params[3], a_beta = params[4], b_alpha = params[5], b_beta = params[6]
    cdef double gamma = cfg[8], w = cfg[7]
    cdef int K = <int>cfg[4], window = <int>cfg[6]
    cdef int ns = stage.shape[0], ng = payoff.shape[0], n = goal.shape[0]
    cdef int i, j, x, g, r1, c1, r2, c2, r3, o1, o2
    cdef double va, vb, mb0, mb1, qa, qb, spe, rpe, ra, rb, kk, chi_mb, chi_mf
    cdef double t[MAXS][2][MAXS]
    cdef double v2[MAXS]
    cdef double* q
    cdef Rel rel
    if ns > MAXS or K > MAXS:
        raise ValueError("kernel supports at most %d states and clusters" % MAXS)
    if variant not in (1, 2):
        raise ValueError("variant must be 1 or 2")
    q = <double*>calloc(ns * ng * 2, sizeof(double))
    if not q:
        raise MemoryError()
    rel.variant = variant
    rel.cmb.thr = cfg[0]
    rel.cmf.thr = cfg[1]
    rel.cmb.forget = rel.cmf.forget = cfg[2]
    rel.cmb.prior = rel.cmf.prior = cfg[3]
    for j in range(3):
        rel.cmb.c[j] = 0.0
        rel.cmf.c[j] = 0.0
    if variant == 2:
        if mix_init(&rel.mmb, cfg[0], K, cfg[5], window) or mix_init(&rel.mmf, cfg[1], K, cfg[5], window):
            free(q)
            raise MemoryError()
    for x in range(ns):
        for j in range(ns):
            t[x][0][j] = 0.0
            t[x][1][j] = 0.0
        if stage[x] < 3:
            for j in range(2):
                t[x][j][succ[x, j, 0]] += 0.5
                t[x][j][succ[x, j, 1]] += 0.5
    try:
        with nogil:
            for i in range(n):
                g = goal[i]
                r1 = s1[i]
                c1 = a1[i]
                r2 = s2[i]
                c2 = a2[i]
                r3 = s3[i]
                for x in range(ns):
                    v2[x] = 0.0
                    if stage[x] == 2:
                        va = 0.0
                        vb = 0.0
                        for j in range(ns):
                            va += t[x][0][j] * payoff[g, j]
                        for j in range(ns):
                            vb += t[x][1][j] * payoff[g, j]
                        v2[x] = va if va > vb else vb
                mb0 = 0.0
                mb1 = 0.0
                for j in range(ns):
                    mb0 += t[r1][0][j] * v2[j]
                for j in range(ns):
                    mb1 += t[r1][1][j] * v2[j]
                o1 = (r1 * ng + g) * 2
                qa = w * mb0 + (1.0 - w) * q[o1]
                qb = w * mb1 + (1.0 - w) * q[o1 + 1]
                out[i, 0] = softmax_pick(qa, qb, beta, c1)
                spe = 1.0 - t[r1][c1][r2]
                kk = 1.0 - eta
                for j in range(ns):
                    t[r1][c1][j] *= kk
                t[r1][c1][r2] += eta
                rel_update(&rel, 1, spe)
                chi_mb = rel_get(&rel, 1)
                chi_mf = rel_get(&rel, 0)
                ra = a_alpha / (1.0 + exp(b_alpha * chi_mf))
                rb = a_beta / (1.0 + exp(b_beta * chi_mb))
                w = w + ra * (1.0 - w) - rb * w
                w = 0.0 if w < 0.0 else (1.0 if w > 1.0 else w)

                mb0 = 0.0
                mb1 = 0.0
                for j in range(ns):
                    mb0 += t[r2][0][j] * payoff[g, j]
                for j in range(ns):
                    mb1 += t[r2][1][j] * payoff[g, j]
                o2 = (r2 * ng + g) * 2
                qa = w * mb0 + (1.0 - w) * q[o2]
                qb = w * mb1 + (1.0 - w) * q[o2 + 1]
                out[i, 1] = softmax_pick(qa, qb, beta, c2)
                spe = 1.0 - t[r2][c2][r3]
                for j in range(ns):
                    t[r2][c2][j] *= kk
                t[r2][c2][r3] += eta
                rel_update(&rel, 1, spe)
                rpe = 0.0 + gamma * q[o2 + c2] - q[o1 + c1]
                q[o1 + c1] += alpha * rpe
                rel_update(&rel, 0, rpe)
                rpe = reward[i] - q[o2 + c2]
                q[o2 + c2] += alpha * rpe
                rel_update(&rel, 0, rpe)
                chi_mb = rel_get(&rel, 1)
                chi_mf = rel_get(&rel, 0)
                ra = a_alpha / (1.0 + exp(b_alpha * chi_mf))
                rb = a_beta / (1.0 + exp(b_beta * chi_mb))
                w = w + ra * (1.0 - w) - rb * w
                w = 0.0 if w < 0.0 else (1.0 if w > 1.0 else w)
    finally:
        free(q)
        if variant == 2:
            mix_free(&rel.mmb)
            mix_free(&rel.mmf)
    return out
