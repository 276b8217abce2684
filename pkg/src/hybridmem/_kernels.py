"""Compiled inner loops shared by the flow, jump, limit and Langevin steppers.

Everything here operates on plain arrays packed by the python-level
wrappers.  The Crank-Nicolson step lives in exactly one place
(`cn_apply`), so the hybrid flow, the deterministic-limit solver and the
Langevin drift advance the membrane with bit-identical arithmetic.

Status codes returned by `advance_segment`:
  0  reached the time limit
  1  integrated hazard crossed the exponential clock (jump)
  2  pointwise bound (or finiteness) violated on an accepted step
"""

import math

import numpy as np
from numba import njit

STATUS_LIMIT = 0
STATUS_JUMP = 1
STATUS_BOUND = 2


@njit(cache=True)
def eval_rate(code, p0, p1, p2, p3, v):
    if code == 0:      # constant
        return p0
    if code == 1:      # affine
        return p0 + p1 * v
    if code == 2:      # tanh
        return p0 + p1 * math.tanh(p2 * (v - p3))
    if code == 3:      # exp
        return p0 * math.exp((v - p2) / p1)
    # linexp: a*k * x/(1-exp(-x)), x = (v - v0)/k
    x = (v - p2) / p1
    if abs(x) < 1e-5:
        return p0 * p1 * (1.0 + x / 2.0 + x * x / 12.0)
    return p0 * p1 * x / (1.0 - math.exp(-x))


@njit(cache=True)
def comp_averages(u, comp_offs, out):
    """Anchored mean of u over each compartment (constants reproduced exactly)."""
    K = comp_offs.shape[0] - 1
    for k in range(K):
        s = comp_offs[k]
        e = comp_offs[k + 1]
        anchor = u[s]
        acc = 0.0
        for i in range(s + 1, e):
            acc += u[i] - anchor
        out[k] = anchor + acc / (e - s)


@njit(cache=True)
def rate_table(avgs, counts, pis, pjs, codes, params, out):
    """Fill out[p, k] = counts[i_p, k] * q_p(avg_k); returns the total rate."""
    P = pis.shape[0]
    K = avgs.shape[0]
    lam = 0.0
    for p in range(P):
        i = pis[p]
        c0 = params[p, 0]; c1 = params[p, 1]; c2 = params[p, 2]; c3 = params[p, 3]
        code = codes[p]
        for k in range(K):
            r = counts[i, k] * eval_rate(code, c0, c1, c2, c3, avgs[k])
            out[p, k] = r
            lam += r
    return lam


@njit(cache=True)
def reaction_zcomp(u, z, node_comp, g, E, out):
    """Nodewise reaction sum_i g_i z_i (E_i - u) with compartment-valued z."""
    N = u.shape[0]
    m = z.shape[0]
    for x in range(N):
        k = node_comp[x]
        acc = 0.0
        for i in range(m):
            acc += g[i, x] * z[i, k] * (E[i] - u[x])
        out[x] = acc


@njit(cache=True)
def reaction_pnodes(u, p, g, E, out):
    """Nodewise reaction sum_i g_i p_i (E_i - u) with nodewise p."""
    N = u.shape[0]
    m = p.shape[0]
    for x in range(N):
        acc = 0.0
        for i in range(m):
            acc += g[i, x] * p[i, x] * (E[i] - u[x])
        out[x] = acc


@njit(cache=True)
def cn_apply(u, react, a, h, dt, out):
    """One Crank-Nicolson diffusion step with explicit reaction.

    Solves (I - dt/2 A) out = (I + dt/2 A) u + dt*react where
    (A v)_x = a(x) (v_{x-1} - 2 v_x + v_{x+1})/h^2 with Dirichlet ghost
    values v = -v_edge outside the domain.
    """
    N = u.shape[0]
    lo = np.empty(N)
    di = np.empty(N)
    up = np.empty(N)
    rhs = np.empty(N)
    ih2 = 1.0 / (h * h)
    for x in range(N):
        c = 0.5 * dt * a[x] * ih2
        left = u[x - 1] if x > 0 else -u[0]
        right = u[x + 1] if x < N - 1 else -u[N - 1]
        # ghost values fold into the diagonal on the implicit side
        diag_w = 3.0 if (x == 0 or x == N - 1) else 2.0
        rhs[x] = u[x] + c * (left - 2.0 * u[x] + right) + dt * react[x]
        lo[x] = -c
        up[x] = -c
        di[x] = 1.0 + diag_w * c
    for x in range(1, N):
        w = lo[x] / di[x - 1]
        di[x] -= w * up[x - 1]
        rhs[x] -= w * rhs[x - 1]
    out[N - 1] = rhs[N - 1] / di[N - 1]
    for x in range(N - 2, -1, -1):
        out[x] = (rhs[x] - up[x] * out[x + 1]) / di[x]


@njit(cache=True)
def h1_l2_sq(u, h):
    """(squared L2 norm, squared H1 seminorm) with Dirichlet boundary strips."""
    N = u.shape[0]
    l2 = 0.0
    for x in range(N):
        l2 += u[x] * u[x]
    l2 *= h
    semi = (2.0 / h) * (u[0] * u[0] + u[N - 1] * u[N - 1])
    for x in range(N - 1):
        d = u[x + 1] - u[x]
        semi += d * d / h
    return l2, semi


@njit(cache=True)
def kinetics_field_nodes(p, u, pis, pjs, codes, params, out):
    """F_j(p, u) nodewise: inflow minus outflow over declared transitions.

    Each directed flux q_ij(u) p_i enters F_j with + and F_i with -, so
    total mass production cancels pairwise.
    """
    m = p.shape[0]
    N = p.shape[1]
    P = pis.shape[0]
    for i in range(m):
        for x in range(N):
            out[i, x] = 0.0
    for pr in range(P):
        i = pis[pr]
        j = pjs[pr]
        c0 = params[pr, 0]; c1 = params[pr, 1]; c2 = params[pr, 2]; c3 = params[pr, 3]
        code = codes[pr]
        for x in range(N):
            flux = eval_rate(code, c0, c1, c2, c3, u[x]) * p[i, x]
            out[j, x] += flux
            out[i, x] -= flux
    return out


@njit(cache=True)
def _segment_instant(u, z, counts, channels_f, comp_offs, comp_w, node_comp, h,
                     g, E, pis, pjs, codes, params,
                     dP, dP2l2, dPl, want_c2,
                     avgs, r, gn, cp):
    """Instantaneous integrands at the current state.

    Fills the rate work table r (P, K) plus per-test-function quadratic-form
    values gn and compensator pairings cp; returns
    (lam, trace, h1_total_sq, c2_residual).
    """
    K = comp_offs.shape[0] - 1
    P = pis.shape[0]
    nphi = dP.shape[0]
    comp_averages(u, comp_offs, avgs)
    lam = rate_table(avgs, counts, pis, pjs, codes, params, r)

    trace = 0.0
    for p in range(P):
        for k in range(K):
            if channels_f[k] > 0.0:
                lk = channels_f[k]
                trace += r[p, k] * 2.0 * comp_w[k] / (lk * lk)

    for q in range(nphi):
        acc_g = 0.0
        acc_c = 0.0
        for p in range(P):
            for k in range(K):
                acc_g += r[p, k] * dP2l2[q, p, k]
                acc_c += r[p, k] * dPl[q, p, k]
        gn[q] = acc_g
        cp[q] = acc_c

    l2, semi = h1_l2_sq(u, h)

    c2 = 0.0
    if want_c2 == 1:
        m = counts.shape[0]
        N = u.shape[0]
        drift = np.zeros((m, K))
        for p in range(P):
            i = pis[p]
            j = pjs[p]
            for k in range(K):
                if channels_f[k] > 0.0:
                    flux = r[p, k] / channels_f[k]
                    drift[j, k] += flux
                    drift[i, k] -= flux
        Fx = np.zeros(m)
        acc = 0.0
        for x in range(N):
            for i in range(m):
                Fx[i] = 0.0
            v = u[x]
            for p in range(P):
                i = pis[p]
                j = pjs[p]
                flux = eval_rate(codes[p], params[p, 0], params[p, 1],
                                 params[p, 2], params[p, 3], v) * z[i, node_comp[x]]
                Fx[j] += flux
                Fx[i] -= flux
            for i in range(m):
                d = drift[i, node_comp[x]] - Fx[i]
                acc += d * d
        c2 = math.sqrt(acc * h)

    return lam, trace, l2 + semi, c2


@njit(cache=True)
def advance_segment(u, t, t_limit, e_target, H0,
                    counts, z, channels_f,
                    comp_offs, node_comp, comp_w,
                    a, h, dt_max, safety, n_haz,
                    u_lo, u_hi, bound_tol,
                    g, E,
                    pis, pjs, codes, params,
                    dP, dP2l2, dPl,
                    want_c2,
                    acc, cp_int, gn_int,
                    rates_out,
                    haz_t, haz_lam, record_haz):
    """Flow the membrane from t with frozen channel state until either the
    integrated hazard crosses e_target or t_limit is reached.

    Trapezoid-accumulates, jump-aligned: the hazard, the trace of the jump
    quadratic variation, the H1 budget, compensator pairings and diagonal
    quadratic-form values for every tracked test function.  On exit
    rates_out holds the event work table (P, K) at the stop state.

    Returns (status, t, H, lam_at_stop, bound_violation, n_hazard_samples).
    """
    N = u.shape[0]
    nphi = dP.shape[0]
    K = comp_offs.shape[0] - 1

    avgs = np.empty(K)
    gn_a = np.empty(nphi)
    cp_a = np.empty(nphi)
    gn_b = np.empty(nphi)
    cp_b = np.empty(nphi)
    ua = np.empty(N)
    ub = np.empty(N)
    react = np.empty(N)

    lam_a, tr_a, h1_a, c2_a = _segment_instant(
        u, z, counts, channels_f, comp_offs, comp_w, node_comp, h, g, E,
        pis, pjs, codes, params, dP, dP2l2, dPl, want_c2, avgs, rates_out, gn_a, cp_a)

    H = H0
    nhz = 0
    if record_haz == 1 and nhz < haz_t.shape[0]:
        haz_t[nhz] = t
        haz_lam[nhz] = lam_a
        nhz += 1

    while True:
        remaining = t_limit - t
        if remaining <= 0.0:
            return STATUS_LIMIT, t, H, lam_a, 0.0, nhz

        if lam_a > 0.0:
            dt = min(dt_max, safety / (n_haz * lam_a))
        else:
            dt = dt_max
        if dt > remaining:
            dt = remaining

        for x in range(N):
            ua[x] = u[x]
        reaction_zcomp(ua, z, node_comp, g, E, react)
        cn_apply(ua, react, a, h, dt, ub)

        lam_b, tr_b, h1_b, c2_b = _segment_instant(
            ub, z, counts, channels_f, comp_offs, comp_w, node_comp, h, g, E,
            pis, pjs, codes, params, dP, dP2l2, dPl, want_c2,
            avgs, rates_out, gn_b, cp_b)

        jumped = False
        H_b = H + 0.5 * dt * (lam_a + lam_b)
        if math.isfinite(e_target) and H_b >= e_target and H_b > H:
            # jump time by linear interpolation of the integrated hazard
            frac = (e_target - H) / (H_b - H)
            dt = dt * frac
            cn_apply(ua, react, a, h, dt, ub)
            lam_b, tr_b, h1_b, c2_b = _segment_instant(
                ub, z, counts, channels_f, comp_offs, comp_w, node_comp, h, g, E,
                pis, pjs, codes, params, dP, dP2l2, dPl, want_c2,
                avgs, rates_out, gn_b, cp_b)
            jumped = True

        H = H + 0.5 * dt * (lam_a + lam_b)
        acc[0] += 0.5 * dt * (tr_a + tr_b)
        acc[1] += 0.5 * dt * (h1_a + h1_b)
        acc[2] += 0.5 * dt * (c2_a + c2_b)
        for q in range(nphi):
            cp_int[q] += 0.5 * dt * (cp_a[q] + cp_b[q])
            gn_int[q] += 0.5 * dt * (gn_a[q] + gn_b[q])

        viol = 0.0
        for x in range(N):
            v = ub[x]
            if not (u_lo - bound_tol <= v <= u_hi + bound_tol):
                d1 = u_lo - v
                d2 = v - u_hi
                d = d1 if d1 > d2 else d2
                if not math.isfinite(v):
                    d = math.inf
                if d > viol:
                    viol = d

        for x in range(N):
            u[x] = ub[x]
        t = t + dt
        lam_a = lam_b
        tr_a = tr_b
        h1_a = h1_b
        c2_a = c2_b
        for q in range(nphi):
            gn_a[q] = gn_b[q]
            cp_a[q] = cp_b[q]

        if record_haz == 1 and nhz < haz_t.shape[0]:
            haz_t[nhz] = t
            haz_lam[nhz] = lam_a
            nhz += 1

        if viol > 0.0:
            return STATUS_BOUND, t, H, lam_a, viol, nhz
        if jumped:
            return STATUS_JUMP, t, H, lam_a, 0.0, nhz
        if t >= t_limit:
            return STATUS_LIMIT, t, H, lam_a, 0.0, nhz
