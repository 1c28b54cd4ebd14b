"""Compiled inner loops: Thomas solves and chunked time stepping.

Every step solves (I - dt*A_alpha) x = rhs with A_alpha = diag(base + alpha) + off.
Status codes returned by the chunk kernels:
    -1          completed
    >= 0        global step index at which the state blew up
    -2 - i      singular pivot at row i
"""

import math

import numpy as np
from numba import njit

BLOWUP_LIMIT = 1e6
PIVOT_FLOOR = 1e-300


@njit(cache=True)
def thomas_factor(diag, off, inv_den, cprime):
    """Forward-elimination coefficients for a symmetric tridiagonal matrix.

    Returns -1 on success, else the index of the vanishing pivot.
    """
    n = diag.size
    den = diag[0]
    if not (abs(den) > PIVOT_FLOOR) or not math.isfinite(den):
        return 0
    inv_den[0] = 1.0 / den
    for i in range(1, n):
        cprime[i - 1] = off[i - 1] * inv_den[i - 1]
        den = diag[i] - off[i - 1] * cprime[i - 1]
        if not (abs(den) > PIVOT_FLOOR) or not math.isfinite(den):
            return i
        inv_den[i] = 1.0 / den
    return -1


@njit(cache=True)
def thomas_solve(off, inv_den, cprime, rhs, out):
    n = rhs.size
    out[0] = rhs[0] * inv_den[0]
    for i in range(1, n):
        out[i] = (rhs[i] - off[i - 1] * out[i - 1]) * inv_den[i]
    for i in range(n - 2, -1, -1):
        out[i] -= cprime[i] * out[i + 1]


@njit(cache=True)
def implicit_factor(base_diag, off, alpha, dt, inv_den, cprime, mdiag, moff):
    """Factor I - dt*(diag(base_diag + alpha) + off)."""
    n = base_diag.size
    for i in range(n):
        mdiag[i] = 1.0 - dt * (base_diag[i] + alpha)
    for i in range(n - 1):
        moff[i] = -dt * off[i]
    return thomas_factor(mdiag, moff, inv_den, cprime)


@njit(cache=True)
def noise_increment(w, amp_fields, sqdt, out):
    """out = sqdt * sum_j w[j] * amp_fields[j, :], summed in fixed j order."""
    n = out.size
    for i in range(n):
        out[i] = 0.0
    for j in range(w.size):
        c = sqdt * w[j]
        for i in range(n):
            out[i] += c * amp_fields[j, i]


@njit(cache=True)
def sde_chunk(
    u,
    base_diag,
    off,
    alphas,
    state_alpha,
    inv_den,
    cprime,
    mdiag,
    moff,
    dt,
    sigma,
    normals,
    amp_fields,
    cubic,
    stride,
    step0,
    snaps,
):
    """Advance ``u`` in place by ``alphas.size`` semi-implicit steps.

    ``state_alpha[0]`` holds the alpha of the current factorization (NaN forces
    a refactor). Snapshot row s is written after global step s*stride.
    """
    n = u.size
    rhs = np.empty(n)
    inc = np.empty(n)
    sqdt = math.sqrt(dt)
    has_noise = sigma != 0.0 and normals.shape[1] > 0
    for s in range(alphas.size):
        a = alphas[s]
        if not (a == state_alpha[0]):
            code = implicit_factor(base_diag, off, a, dt, inv_den, cprime, mdiag, moff)
            if code >= 0:
                return -2 - code
            state_alpha[0] = a
        if has_noise:
            noise_increment(normals[s], amp_fields, sqdt, inc)
        for i in range(n):
            r = u[i]
            if cubic:
                r -= u[i] * u[i] * u[i] * dt
            if has_noise:
                r += sigma * inc[i]
            rhs[i] = r
        thomas_solve(moff, inv_den, cprime, rhs, u)
        gstep = step0 + s + 1
        for i in range(n):
            if not (abs(u[i]) <= BLOWUP_LIMIT):
                return gstep
        if gstep % stride == 0:
            row = gstep // stride
            for i in range(n):
                snaps[row, i] = u[i]
    return -1


@njit(cache=True)
def reorthonormalize(V, dx, logs):
    """Modified Gram-Schmidt in the dx product; adds log scale factors to ``logs``.

    Returns -1 on success or the index of a collapsed vector.
    """
    k, n = V.shape
    for j in range(k):
        for i in range(j):
            r = 0.0
            for p in range(n):
                r += V[j, p] * V[i, p]
            r *= dx
            for p in range(n):
                V[j, p] -= r * V[i, p]
        nrm = 0.0
        for p in range(n):
            nrm += V[j, p] * V[j, p]
        nrm = math.sqrt(dx * nrm)
        if not (nrm > PIVOT_FLOOR) or not math.isfinite(nrm):
            return j
        for p in range(n):
            V[j, p] /= nrm
        logs[j] += math.log(nrm)
    return -1


@njit(cache=True)
def tangent_chunk(
    u,
    V,
    base_diag,
    off,
    alphas,
    state_alpha,
    inv_den,
    cprime,
    mdiag,
    moff,
    dt,
    sigma,
    normals,
    amp_fields,
    evolve_base,
    renorm_every,
    step0,
    dx,
    logs,
    rec_t,
    rec_logvol,
    rec_count,
):
    """Advance base state ``u`` and tangent rows ``V`` together.

    Tangents use the first variation at the pre-step base state. Every
    ``renorm_every`` global steps the bundle is re-orthonormalized and the
    accumulated log-volume recorded. Return codes as in ``sde_chunk``;
    -1000 - j flags a collapsed tangent j.
    """
    n = u.size
    k = V.shape[0]
    rhs = np.empty(n)
    inc = np.empty(n)
    tmp = np.empty(n)
    sqdt = math.sqrt(dt)
    has_noise = evolve_base and sigma != 0.0 and normals.shape[1] > 0
    for s in range(alphas.size):
        a = alphas[s]
        if not (a == state_alpha[0]):
            code = implicit_factor(base_diag, off, a, dt, inv_den, cprime, mdiag, moff)
            if code >= 0:
                return -2 - code
            state_alpha[0] = a
        for j in range(k):
            for i in range(n):
                tmp[i] = V[j, i] - 3.0 * u[i] * u[i] * V[j, i] * dt
            thomas_solve(moff, inv_den, cprime, tmp, rhs)
            for i in range(n):
                V[j, i] = rhs[i]
        if evolve_base:
            if has_noise:
                noise_increment(normals[s], amp_fields, sqdt, inc)
            for i in range(n):
                r = u[i] - u[i] * u[i] * u[i] * dt
                if has_noise:
                    r += sigma * inc[i]
                rhs[i] = r
            thomas_solve(moff, inv_den, cprime, rhs, u)
            for i in range(n):
                if not (abs(u[i]) <= BLOWUP_LIMIT):
                    return step0 + s + 1
        gstep = step0 + s + 1
        if gstep % renorm_every == 0:
            code = reorthonormalize(V, dx, logs)
            if code >= 0:
                return -1000 - code
            c = rec_count[0]
            rec_t[c] = gstep * dt
            tot = 0.0
            for j in range(k):
                tot += logs[j]
            rec_logvol[c] = tot
            rec_count[0] = c + 1
    return -1
