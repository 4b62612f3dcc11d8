"""Fused numba loops for the per-step filter and action scores.

The episode engine keeps its belief in the agent frame, ``B[u, d]`` with
``d = agent - x`` taken mod ``L``.  In that frame the capture zone and the
likelihood are fixed tables, the target move is a shift by ``-u`` and the
agent move a shift by ``+a``.  The test-suite checks these loops against
the lattice-frame numpy functions in ``belief`` and ``policy``.
"""

import numba as nb
import numpy as np

INV_LN2 = 1.0 / np.log(2.0)


@nb.njit(cache=True)
def shift_by_velocity(B, alphabet, out):
    """``out[u, d] = B[u, d + u]``: each velocity slice moved by its own velocity."""
    K, L = B.shape[0], B.shape[1]
    for u in range(K):
        du = alphabet[u, 0] % L
        dv = alphabet[u, 1] % L
        split = L - dv
        for i in range(L):
            si = (i + du) % L
            for j in range(split):
                out[u, i, j] = B[u, si, j + dv]
            for j in range(split, L):
                out[u, i, j] = B[u, si, j + dv - L]


def predict_relative(B, P, alphabet, out, work=None):
    """``out[v, d] = sum_u P[v, u] B[u, d + u]``."""
    if work is None:
        work = np.empty_like(B)
    shift_by_velocity(B, alphabet, work)
    K = B.shape[0]
    np.matmul(P, work.reshape(K, -1), out=out.reshape(K, -1))


@nb.njit(cache=True)
def expected_entropies(B, logB, kyes, kno, lyes, lno):
    """Expected posterior entropy (bits) of the four moves.

    ``B`` is an agent-frame predicted belief and ``logB`` its natural log
    (any finite value where ``B == 0``); kernels are ``(4, L, L)`` likelihood
    tables already shifted by each action and zeroed on its capture zone.
    """
    K, L = B.shape[0], B.shape[1]
    a_yes = np.zeros(4)
    a_no = np.zeros(4)
    s_yes = np.zeros(4)
    s_no = np.zeros(4)
    total = 0.0
    for i in range(L):
        for j in range(L):
            mm = 0.0
            ss = 0.0
            for u in range(K):
                b = B[u, i, j]
                if b > 0.0:
                    mm += b
                    ss += b * logB[u, i, j]
            if mm == 0.0:
                continue
            total += mm
            ss *= INV_LN2
            for a in range(4):
                ky = kyes[a, i, j]
                kn = kno[a, i, j]
                a_yes[a] += ky * mm
                a_no[a] += kn * mm
                s_yes[a] += lyes[a, i, j] * mm + ky * ss
                s_no[a] += lno[a, i, j] * mm + kn * ss
    out = np.zeros(4)
    for a in range(4):
        h = -s_yes[a] - s_no[a]
        if a_yes[a] > 0.0:
            h += a_yes[a] * np.log(a_yes[a]) * INV_LN2
        if a_no[a] > 0.0:
            h += a_no[a] * np.log(a_no[a]) * INV_LN2
        out[a] = h / total
    return out


@nb.njit(cache=True)
def move_and_observe(B, a0, a1, table, detected, collapse_tol, out):
    """Shift ``B`` by the agent move, clear the capture zone, apply the likelihood, normalize.

    Returns ``(p_found, p_obs)``.  ``p_found < 0`` flags a collapse (capture
    zone held all the mass) and ``p_obs == 0`` an impossible observation;
    ``out`` is unusable in both cases.
    """
    K, L = B.shape[0], B.shape[1]
    total = 0.0
    cap = 0.0
    post = 0.0
    for i in range(L):
        si = (i - a0) % L
        ci = i == 0 or i == 1 or i == L - 1
        for j in range(L):
            sj = (j - a1) % L
            incap = ci and (j == 0 or j == 1 or j == L - 1)
            lik = table[i, j]
            if not detected:
                lik = 1.0 - lik
            for u in range(K):
                val = B[u, si, sj]
                total += val
                if incap:
                    cap += val
                    out[u, i, j] = 0.0
                else:
                    val *= lik
                    out[u, i, j] = val
                    post += val
    if cap >= total * (1.0 - collapse_tol):
        return -1.0, 0.0
    rest = total - cap
    if post <= 0.0:
        return cap / total, 0.0
    inv = 1.0 / post
    for u in range(K):
        for i in range(L):
            for j in range(L):
                out[u, i, j] *= inv
    return cap / total, post / rest
