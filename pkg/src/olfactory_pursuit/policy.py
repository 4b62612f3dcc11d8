"""Action selection: Infotaxis, greedy MDP values, the hybrid blend, random search."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import entr

from . import _kernels
from .belief import LN2, expected_entropies, to_agent_frame
from .grid import ACTIONS, D4, GridSpec, d4_permutation, transform_field
from .target import TransitionMatrix

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.95
DEFAULT_TOL = 1e-9
TIE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class QTable:
    """Fully observable pursuit values indexed by ``[a, u, d mod L]`` with ``d = agent - target``.

    ``q`` assumes the target still has to make its move with velocity ``u``
    (simultaneous agent and target moves).  ``q_after`` is the same value
    for a target that has already moved and will next move with ``u``; it
    is what a motion-propagated belief should be averaged against.
    """

    q: np.ndarray
    v: np.ndarray
    gamma: float
    p_digest: str
    residual: float
    iterations: int

    @property
    def L(self) -> int:
        return self.q.shape[-1]

    @property
    def n_states(self) -> int:
        return self.q.shape[1]

    @property
    def q_after(self) -> np.ndarray:
        cached = self.__dict__.get("_q_after")
        if cached is None:
            cap = _capture_mask(self.L)
            cached = np.empty_like(self.q)
            for k, (ai, aj) in enumerate(ACTIONS):
                shift = (-int(ai), -int(aj))
                hit = np.roll(cap, shift, axis=(0, 1))
                cached[k] = np.where(hit[None], 1.0, self.gamma * np.roll(self.v, shift, axis=(1, 2)))
            object.__setattr__(self, "_q_after", cached)
        return cached


def _capture_mask(L: int) -> np.ndarray:
    return GridSpec(L).capture_mask


def value_iteration(P: TransitionMatrix, g: GridSpec, gamma: float = DEFAULT_GAMMA,
                    tol: float = DEFAULT_TOL, max_iter: int = 100_000,
                    residuals: list | None = None) -> QTable:
    """Solve the pursuit MDP in relative coordinates.

    From state ``(d, u)`` action ``a`` leads to ``d' = d + a - u`` and a new
    velocity ``u' ~ P(.|u)``.  Reaching ``|d'| <= sqrt(2)`` pays 1 and ends
    the episode.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if not tol > 0:
        raise ValueError("tol must be positive")
    L, K = g.L, P.size
    cap = g.capture_mask
    shifts = [[(-(int(a[0]) - int(u[0])), -(int(a[1]) - int(u[1]))) for u in P.alphabet]
              for a in ACTIONS]
    hits = np.array([[np.roll(cap, s, axis=(0, 1)) for s in row] for row in shifts])

    def backup(V):
        W = np.tensordot(P.matrix.T, V, axes=1)  # W[u] = sum_u' P(u'|u) V[u']
        Q = np.empty((4, K, L, L))
        for a in range(4):
            for u in range(K):
                Q[a, u] = np.where(hits[a, u], 1.0, gamma * np.roll(W[u], shifts[a][u], axis=(0, 1)))
        return Q

    V = np.zeros((K, L, L))
    for it in range(1, max_iter + 1):
        Vn = backup(V).max(axis=0)
        res = float(np.max(np.abs(Vn - V)))
        if residuals is not None:
            residuals.append(res)
        V = Vn
        if res <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")
    Q = backup(V)
    return QTable(Q, V, gamma, P.digest, res, it)


def is_d4_equivariant(Q: QTable, alphabet: np.ndarray, atol: float = 1e-12) -> bool:
    """Check ``Q(g d, g u, g a) == Q(d, u, a)`` for every ``g`` in D4."""
    for g in D4:
        pu = d4_permutation(alphabet, g)
        pa = d4_permutation(ACTIONS, g)
        moved = transform_field(Q.q, g)
        if np.max(np.abs(moved - Q.q[np.ix_(pa, pu)])) > atol:
            return False
    return True


def q_greedy(b: np.ndarray, agent, Q: QTable, predicted: bool = False) -> np.ndarray:
    """Belief average of the MDP action values.

    With ``predicted=False`` this is ``sum_{x,u} b(x,u) Q(agent - x, u; a)``
    for a belief that has not yet been moved by the target dynamics.  With
    ``predicted=True`` the belief is assumed already propagated and the
    post-move values are used; both give the same number for ``b`` and its
    prediction.
    """
    if b.shape[0] != Q.n_states:
        raise ValueError("belief and Q-table velocity alphabets differ")
    table = Q.q_after if predicted else Q.q
    B = to_agent_frame(b, agent)
    return table.reshape(4, -1) @ B.ravel()


def _xlog2(x: np.ndarray) -> np.ndarray:
    return -entr(x) / LN2


class ActionScorer:
    """Expected entropies and greedy values of the four moves.

    In the agent's frame the capture zones and likelihoods of all four
    candidate positions are fixed kernels, so scoring a belief costs one
    pass over the lattice plus a matrix-vector product for the greedy term.
    """

    def __init__(self, g: GridSpec, table: np.ndarray, Q: QTable | None = None):
        self.g = g
        cap = g.capture_mask
        kyes, kno = [], []
        for ai, aj in ACTIONS:
            shift = (-int(ai), -int(aj))  # kernel[d] = f(d + a)
            keep = ~np.roll(cap, shift, axis=(0, 1))
            moved = np.roll(table, shift, axis=(0, 1))
            kyes.append(moved * keep)
            kno.append((1.0 - moved) * keep)
        self.kyes = np.ascontiguousarray(kyes)
        self.kno = np.ascontiguousarray(kno)
        self.lyes = _xlog2(self.kyes)
        self.lno = _xlog2(self.kno)
        self.Q = Q
        self._buf = None
        self._greedy = None if Q is None else np.ascontiguousarray(Q.q_after.reshape(4, -1))

    def entropies(self, B: np.ndarray) -> np.ndarray:
        """Expected posterior entropy per move for an agent-frame predicted belief ``B``."""
        buf = self._log_buffer(B)
        with np.errstate(divide="ignore"):
            np.log(B, out=buf)
        return _kernels.expected_entropies(B, buf, self.kyes, self.kno, self.lyes, self.lno)

    def _log_buffer(self, B: np.ndarray) -> np.ndarray:
        buf = self._buf
        if buf is None or buf.shape != B.shape:
            buf = self._buf = np.empty_like(B)
        return buf

    def greedy(self, B: np.ndarray) -> np.ndarray:
        if self._greedy is None:
            raise ValueError("scorer was built without a Q-table")
        return self._greedy @ B.ravel() / B.sum()

    def relative_scores(self, B: np.ndarray, w: float) -> np.ndarray:
        """``w * Q_greedy(a) - (1 - w) * H[b|a]`` for an agent-frame predicted belief."""
        out = np.zeros(4)
        if w > 0:
            out += w * self.greedy(B)
        if w < 1:
            out -= (1.0 - w) * self.entropies(B)
        return out

    def scores(self, b_pred: np.ndarray, agent, w: float) -> np.ndarray:
        """As ``relative_scores`` for a predicted belief in the lattice frame."""
        return self.relative_scores(to_agent_frame(b_pred, agent), w)


def argmax_tiebreak(scores: np.ndarray, rng: np.random.Generator, tol: float = TIE_TOL) -> int:
    """Uniform choice among near-maximal entries; always draws once from ``rng``."""
    best = float(np.max(scores))
    cand = np.flatnonzero(scores >= best - tol * max(1.0, abs(best)))
    return int(cand[rng.integers(len(cand))])


def select_action_hybrid(b_pred: np.ndarray, agent, w: float, scorer: ActionScorer,
                         rng: np.random.Generator) -> int:
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    return argmax_tiebreak(scorer.scores(b_pred, agent, w), rng)


def select_action_infotaxis(b_pred: np.ndarray, agent, table: np.ndarray, g: GridSpec,
                            rng: np.random.Generator) -> int:
    """Reference Infotaxis: explicit outcome enumeration, minimum expected entropy."""
    return argmax_tiebreak(-expected_entropies(b_pred, agent, table, g), rng)


def select_action_random(prev: int | None, alpha: float, rng: np.random.Generator) -> int:
    """Persistent random walk: keep ``prev`` w.p. ``1 - alpha``, else redraw among all four.

    The redraw may return ``prev``, so the mean run length is ``4 / (3 alpha)``.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if prev is None or rng.random() < alpha:
        return int(rng.integers(4))
    return prev


# -- Q-table cache -----------------------------------------------------------

MAGIC = "OPQTABLE1"


class CorruptCache(ValueError):
    pass


def qtable_filename(g: GridSpec, P: TransitionMatrix, gamma: float) -> str:
    return f"qtable_L{g.L}_K{P.size}_{P.digest}_g{gamma!r}.bin"


def save_qtable(path, Q: QTable) -> None:
    data = np.ascontiguousarray(np.concatenate([Q.q.ravel(), Q.v.ravel()]), dtype="<f8").tobytes()
    header = (
        f"{MAGIC} L={Q.L} K={Q.n_states} gamma={Q.gamma!r} phash={Q.p_digest} "
        f"residual={Q.residual!r} iterations={Q.iterations} "
        f"sha256={hashlib.sha256(data).hexdigest()}\n"
    )
    Path(path).write_bytes(header.encode() + data)


def load_qtable(path) -> QTable:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CorruptCache(f"{path}: no header")
    try:
        tokens = raw[:nl].decode().split()
        if tokens[0] != MAGIC:
            raise CorruptCache(f"{path}: bad magic")
        meta = dict(t.split("=", 1) for t in tokens[1:])
        L, K = int(meta["L"]), int(meta["K"])
    except (UnicodeDecodeError, ValueError, KeyError, IndexError) as exc:
        raise CorruptCache(f"{path}: unreadable header") from exc
    data = raw[nl + 1:]
    if hashlib.sha256(data).hexdigest() != meta.get("sha256"):
        raise CorruptCache(f"{path}: checksum mismatch")
    arr = np.frombuffer(data, dtype="<f8")
    nq = 4 * K * L * L
    if arr.size != nq + K * L * L:
        raise CorruptCache(f"{path}: wrong payload size")
    return QTable(arr[:nq].reshape(4, K, L, L).copy(), arr[nq:].reshape(K, L, L).copy(),
                  float(meta["gamma"]), meta["phash"], float(meta["residual"]),
                  int(meta["iterations"]))


def cached_value_iteration(P: TransitionMatrix, g: GridSpec, gamma: float = DEFAULT_GAMMA,
                           cache_dir=None, tol: float = DEFAULT_TOL) -> tuple[QTable, bool]:
    """Value iteration with an on-disk cache.  Returns ``(Q, cache_hit)``."""
    if cache_dir is None:
        return value_iteration(P, g, gamma, tol), False
    path = Path(cache_dir) / qtable_filename(g, P, gamma)
    if path.exists():
        try:
            Q = load_qtable(path)
            if Q.p_digest == P.digest and Q.L == g.L and Q.gamma == gamma:
                return Q, True
            log.warning("%s does not match the requested model; recomputing", path)
        except CorruptCache as exc:
            log.warning("%s; recomputing", exc)
    Q = value_iteration(P, g, gamma, tol)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_qtable(path, Q)
    return Q, False


def export_qtable_csv(path, Q: QTable, alphabet: np.ndarray) -> None:
    L = Q.L
    o = GridSpec(L).offsets
    with open(path, "w") as fh:
        fh.write("d1,d2,u1,u2,action,q\n")
        for a in range(4):
            for u in range(Q.n_states):
                for i in range(L):
                    for j in range(L):
                        fh.write(f"{o[i]},{o[j]},{alphabet[u][0]},{alphabet[u][1]},"
                                 f"{a},{float(Q.q[a, u, i, j])!r}\n")
