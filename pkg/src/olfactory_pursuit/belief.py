"""Bayesian filter over target position and velocity.

A belief is a dense array ``b[u, i, j]`` of shape ``(K, L, L)``: the
probability that the target sits on lattice site ``(i, j)`` and will next
move with velocity ``alphabet[u]``.  Likelihood tables are indexed by the
displacement ``agent - x`` taken mod ``L`` (see ``odor.likelihood_table``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .grid import ACTIONS, GridSpec
from .odor import Observation
from .target import TransitionMatrix

LN2 = math.log(2.0)
COLLAPSE_TOL = 1e-12
CONTRADICTION_TOL = 1e-300


class BeliefCollapse(RuntimeError):
    """The capture zone held (numerically) all of the belief mass."""


class ModelContradiction(RuntimeError):
    """An observation had (numerically) zero probability under the belief."""


@dataclass
class BeliefUpdateTrace:
    pre_entropy: float
    post_entropy: float
    observation: Observation
    p_found: float
    p_observation: float


def _relative_index(agent, L: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(L)
    return ((agent[0] - k) % L)[:, None], ((agent[1] - k) % L)[None, :]


def likelihood_at(table: np.ndarray, agent, L: int) -> np.ndarray:
    """``L_yes(agent - x)`` as a field over target positions ``x``."""
    i, j = _relative_index(agent, L)
    return table[i, j]


def to_agent_frame(b: np.ndarray, agent) -> np.ndarray:
    """Re-index ``b`` by displacement ``d = agent - x`` (mod L)."""
    L = b.shape[-1]
    i, j = _relative_index(agent, L)
    return b[..., i, j]


def capture_cells(agent, g: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    off = g.capture_offsets
    return (agent[0] + off[:, 0]) % g.L, (agent[1] + off[:, 1]) % g.L


def uniform_belief(agent, q: np.ndarray, g: GridSpec) -> np.ndarray:
    """Uniform over positions outside the capture zone, times ``q``."""
    pos = np.ones((g.L, g.L))
    pos[capture_cells(agent, g)] = 0.0
    b = q[:, None, None] * pos[None]
    return b / b.sum()


def initial_belief(agent, table: np.ndarray, q: np.ndarray, g: GridSpec) -> np.ndarray:
    """Posterior after a first detection: ``L_yes(agent - x) q(u)``, capture zone excluded."""
    q = np.asarray(q, dtype=np.float64)
    if abs(q.sum() - 1.0) > 1e-12:
        raise ValueError("velocity distribution must be normalized")
    lik = likelihood_at(table, agent, g.L).copy()
    lik[capture_cells(agent, g)] = 0.0
    total = lik.sum()
    if not total > 0:
        raise ValueError("detection likelihood vanishes everywhere outside the capture zone")
    return q[:, None, None] * (lik / total)[None]


def predict(b: np.ndarray, P: TransitionMatrix) -> np.ndarray:
    """``b'(x', u') = sum_u P(u'|u) b(x' - u, u)``: move with the old velocity, then resample."""
    if b.shape[0] != P.size:
        raise ValueError(f"belief has {b.shape[0]} velocity states, P has {P.size}")
    moved = np.empty_like(b)
    for k, (di, dj) in enumerate(P.alphabet):
        if di == 0 and dj == 0:
            moved[k] = b[k]
        else:
            moved[k] = np.roll(b[k], (int(di), int(dj)), axis=(0, 1))
    return np.tensordot(P.matrix, moved, axes=1)


def zero_capture_and_renormalize(b: np.ndarray, agent, g: GridSpec) -> tuple[np.ndarray, float]:
    """Remove the mass the agent would have seen, renormalize.  Returns ``(b, p_found)``."""
    out = b.copy()
    ci, cj = capture_cells(agent, g)
    p_f = float(out[:, ci, cj].sum())
    total = float(b.sum())
    if p_f >= total * (1.0 - COLLAPSE_TOL):
        raise BeliefCollapse(f"capture zone holds {p_f:.17g} of {total:.17g}")
    out[:, ci, cj] = 0.0
    out /= out.sum()
    return out, p_f / total


def bayes_update(b: np.ndarray, obs: Observation, agent, table: np.ndarray,
                 g: GridSpec) -> tuple[np.ndarray, float]:
    """Condition on a detection outcome at ``agent``.  Returns ``(posterior, p(obs))``."""
    if obs == Observation.FOUND:
        raise ValueError("bayes_update handles detection / no-detection only")
    lik = likelihood_at(table, agent, g.L)
    if obs == Observation.NO_DETECTION:
        lik = 1.0 - lik
    post = b * lik[None]
    p_obs = float(post.sum())
    if p_obs < CONTRADICTION_TOL:
        raise ModelContradiction(f"p({obs.name}) = {p_obs:g}")
    return post / p_obs, p_obs


def entropy(b: np.ndarray) -> float:
    """Shannon entropy in bits (0 log 0 = 0)."""
    return float(entr(b).sum() / LN2)


def expected_entropy_after(b_pred: np.ndarray, action, agent, table: np.ndarray,
                           g: GridSpec) -> float:
    """Expected posterior entropy after stepping to ``agent + action``.

    ``b_pred`` is the belief already propagated by the motion model.  The
    three outcomes are enumerated explicitly: found (entropy 0), detection
    and no detection, each weighted by its predictive probability.
    """
    y = ((agent[0] + int(action[0])) % g.L, (agent[1] + int(action[1])) % g.L)
    total = float(b_pred.sum())
    ci, cj = capture_cells(y, g)
    p_found = float(b_pred[:, ci, cj].sum()) / total
    if p_found >= 1.0 - COLLAPSE_TOL:
        return 0.0
    rest = b_pred.copy()
    rest[:, ci, cj] = 0.0
    rest /= rest.sum()
    lik = likelihood_at(table, y, g.L)
    h = 0.0
    for factor in (lik, 1.0 - lik):
        post = rest * factor[None]
        p = float(post.sum())
        if p > 0:
            h += (1.0 - p_found) * p * entropy(post / p)
    return h


def expected_entropies(b_pred: np.ndarray, agent, table: np.ndarray, g: GridSpec) -> np.ndarray:
    return np.array([expected_entropy_after(b_pred, a, agent, table, g) for a in ACTIONS])


def dump_belief_csv(b: np.ndarray, path, alphabet: np.ndarray | None = None) -> None:
    """Write one ``L x L`` block per velocity state, for rendering belief snapshots."""
    with open(path, "w") as fh:
        for k in range(b.shape[0]):
            label = f"{alphabet[k][0]},{alphabet[k][1]}" if alphabet is not None else str(k)
            fh.write(f"# velocity {label}\n")
            np.savetxt(fh, b[k], fmt="%.10e", delimiter=",")
