"""Target motion models.

Two velocity alphabets are used.  The discrete run-and-tumble target moves
along the four lattice axes or rests (5 states).  The lattice image of the
continuous run-and-tumble target can also step diagonally (9 states).  The
rest state is always last.

Transition matrices follow the conditioning convention ``P[new, old]``
(= P(u'|u)), so each column sums to one and the stationary vector ``q``
satisfies ``P @ q = q``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .grid import D4, GridSpec, d4_permutation

FIVE_STATE = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [0, 0]], dtype=np.int64)
NINE_STATE = np.array(
    [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1], [0, 0]],
    dtype=np.int64,
)


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    matrix: np.ndarray  # P[new, old]
    alphabet: np.ndarray  # (K, 2) integer velocities

    def __post_init__(self):
        P = np.array(self.matrix, dtype=np.float64)
        A = np.array(self.alphabet, dtype=np.int64)
        K = len(A)
        if P.shape != (K, K):
            raise ValueError(f"matrix shape {P.shape} does not match alphabet size {K}")
        if np.any(P < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if np.max(np.abs(P.sum(axis=0) - 1.0)) > 1e-12:
            raise ValueError("columns of P must sum to 1")
        P.flags.writeable = False
        A.flags.writeable = False
        object.__setattr__(self, "matrix", P)
        object.__setattr__(self, "alphabet", A)

    @property
    def size(self) -> int:
        return len(self.alphabet)

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Column-wise CDF used to sample ``u' | u``."""
        return np.cumsum(self.matrix, axis=0)

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.alphabet.tobytes())
        h.update(self.matrix.tobytes())
        return h.hexdigest()[:16]

    def sample(self, old: int, rng: np.random.Generator) -> int:
        k = int(np.searchsorted(self.cumulative[:, old], rng.random(), side="right"))
        return min(k, self.size - 1)


@dataclass(frozen=True)
class DiscreteRTParams:
    eps: float

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")

    @classmethod
    def from_persistence(cls, tau_p: float) -> "DiscreteRTParams":
        if not tau_p > 1.0:
            raise ValueError(f"tau_p = 1/(1-eps) must exceed 1, got {tau_p}")
        return cls(1.0 - 1.0 / tau_p)

    @property
    def tau_p(self) -> float:
        return 1.0 / (1.0 - self.eps)

    @property
    def tau_0(self) -> float:
        return 1.0 / self.eps


@dataclass(frozen=True)
class ContinuousRTParams:
    speed: float = 1.0
    run_time: float = 1.0  # mean duration between tumbles; math.inf for ballistic
    dt: float = 0.1  # odor emission sub-step

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if not self.run_time > 0:
            raise ValueError("run_time must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class DiscreteTarget:
    position: tuple[int, int]
    velocity: int


@dataclass
class ContinuousTarget:
    position: np.ndarray  # float (2,), wrapped into [0, L)
    heading: float
    next_tumble: float  # absolute time of the next tumble
    time: float = 0.0


def discrete_transition_matrix(params: DiscreteRTParams) -> TransitionMatrix:
    eps = params.eps
    P = np.zeros((5, 5))
    for u in range(4):
        P[u, u] = eps
        P[4, u] = 1.0 - eps
    P[:4, 4] = eps / 4.0
    P[4, 4] = 1.0 - eps
    return TransitionMatrix(P, FIVE_STATE)


def stationary_target_matrix(alphabet: np.ndarray = FIVE_STATE) -> TransitionMatrix:
    """Every velocity jumps to rest: the target stops after at most one move."""
    K = len(alphabet)
    P = np.zeros((K, K))
    P[K - 1, :] = 1.0
    return TransitionMatrix(P, alphabet)


def _is_irreducible(P: np.ndarray) -> bool:
    K = len(P)
    reach = (P > 0) | np.eye(K, dtype=bool)
    for _ in range(int(np.ceil(np.log2(K))) + 1):
        reach = (reach.astype(np.int64) @ reach.astype(np.int64)) > 0
    return bool(reach.all())


def invariant_distribution(
    P: TransitionMatrix, tol: float = 1e-13, max_iter: int = 10**6
) -> np.ndarray:
    """Stationary distribution of ``P`` by power iteration."""
    M = P.matrix
    if not _is_irreducible(M):
        raise ValueError("transition matrix is reducible; invariant distribution not unique")
    q = np.full(P.size, 1.0 / P.size)
    for _ in range(max_iter):
        nq = M @ q
        nq /= nq.sum()
        if np.max(np.abs(nq - q)) <= tol and np.max(np.abs(M @ nq - nq)) <= tol:
            return nq
        q = nq
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")


def step_discrete(
    s: DiscreteTarget, P: TransitionMatrix, L: int, rng: np.random.Generator
) -> DiscreteTarget:
    """Move by the current velocity, then resample the velocity."""
    u = P.alphabet[s.velocity]
    pos = ((s.position[0] + int(u[0])) % L, (s.position[1] + int(u[1])) % L)
    return DiscreteTarget(pos, P.sample(s.velocity, rng))


def new_continuous_target(
    position, p: ContinuousRTParams, rng: np.random.Generator, time: float = 0.0
) -> ContinuousTarget:
    return ContinuousTarget(
        position=np.asarray(position, dtype=np.float64).copy(),
        heading=float(rng.uniform(0.0, 2.0 * math.pi)),
        next_tumble=time + _exp_interval(p.run_time, rng),
        time=time,
    )


def _exp_interval(mean: float, rng: np.random.Generator) -> float:
    if math.isinf(mean):
        return math.inf
    return float(rng.exponential(mean))


def run_segments(
    s: ContinuousTarget, p: ContinuousRTParams, horizon: float, L: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, ContinuousTarget]:
    """Advance event by event over ``[t, t + horizon)``.

    Returns the segment start times, start positions (unwrapped relative to
    ``s.position``), headings, and the final state.  Between tumbles the
    motion is a straight line at constant speed, so this is exact.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    t_end = s.time + horizon
    times = [s.time]
    pos = [s.position.copy()]
    heads = [s.heading]
    t, x, phi, nxt = s.time, s.position.copy(), s.heading, s.next_tumble
    while nxt < t_end:
        x = x + p.speed * (nxt - t) * np.array([math.cos(phi), math.sin(phi)])
        t = nxt
        phi = float(rng.uniform(0.0, 2.0 * math.pi))
        nxt = t + _exp_interval(p.run_time, rng)
        times.append(t)
        pos.append(x)
        heads.append(phi)
    x = x + p.speed * (t_end - t) * np.array([math.cos(phi), math.sin(phi)])
    final = ContinuousTarget(np.mod(x, L), phi, nxt, t_end)
    return np.array(times), np.array(pos), np.array(heads), final


def positions_on_path(
    seg_times: np.ndarray, seg_pos: np.ndarray, seg_heads: np.ndarray, speed: float, at: np.ndarray
) -> np.ndarray:
    """Source positions (unwrapped) at times ``at`` inside the segments."""
    k = np.searchsorted(seg_times, at, side="right") - 1
    k = np.clip(k, 0, len(seg_times) - 1)
    dt = at - seg_times[k]
    step = speed * dt
    return seg_pos[k] + np.stack([step * np.cos(seg_heads[k]), step * np.sin(seg_heads[k])], axis=-1)


def step_continuous(
    s: ContinuousTarget, p: ContinuousRTParams, horizon: float, L: float, rng: np.random.Generator
) -> ContinuousTarget:
    return run_segments(s, p, horizon, L, rng)[3]


def _sample_integer_time_path(p: ContinuousRTParams, n: int, rng: np.random.Generator, state):
    """Unwrapped positions at times 1..n following ``state = (x, heading, time-to-tumble)``."""
    x0, phi, ttt = state
    if math.isinf(p.run_time):
        t = np.arange(1, n + 1, dtype=np.float64)
        d = np.array([math.cos(phi), math.sin(phi)])
        return x0 + p.speed * t[:, None] * d[None, :], (x0 + p.speed * n * d, phi, math.inf)
    # Tumble times inside (0, n]; oversample and extend if needed.
    m = int(n / p.run_time + 10 * math.sqrt(n / p.run_time + 1) + 10)
    gaps = rng.exponential(p.run_time, size=m)
    tt = ttt + np.concatenate(([0.0], np.cumsum(gaps)))
    while tt[-1] <= n:
        more = rng.exponential(p.run_time, size=m)
        tt = np.concatenate((tt, tt[-1] + np.cumsum(more)))
    keep = int(np.searchsorted(tt, n, side="right"))
    tumbles = tt[:keep]  # tumbles with time <= n
    heads = np.concatenate(([phi], rng.uniform(0.0, 2.0 * math.pi, size=len(tumbles))))
    starts = np.concatenate(([0.0], tumbles))
    dirs = np.stack([np.cos(heads), np.sin(heads)], axis=-1)
    lengths = p.speed * np.diff(starts)
    vert = np.vstack([x0, x0 + np.cumsum(lengths[:, None] * dirs[:-1], axis=0)])
    t = np.arange(1, n + 1, dtype=np.float64)
    k = np.searchsorted(starts, t, side="right") - 1
    pos = vert[k] + p.speed * (t - starts[k])[:, None] * dirs[k]
    nxt = tt[keep] - n
    return pos, (pos[-1], float(heads[-1]), float(nxt))


def count_discretized_transitions(
    p: ContinuousRTParams,
    g: GridSpec,
    steps: int,
    rng: np.random.Generator,
    chunk: int = 1_000_000,
    heading: float | None = None,
) -> np.ndarray:
    """Raw transition counts ``C[new, old]`` of the lattice image of the continuous walk.

    The walk is sampled at integer multiples of the agent time step; the
    lattice cell is ``floor(x / dx)`` and the discrete velocity is the cell
    difference between consecutive samples, expressed in ``NINE_STATE``.
    """
    lut = -np.ones(9, dtype=np.int64)
    for k, (a, b) in enumerate(NINE_STATE):
        lut[(a + 1) * 3 + (b + 1)] = k
    phi = float(rng.uniform(0, 2 * math.pi)) if heading is None else heading
    x = rng.uniform(0, g.L * g.dx, size=2)
    state = (x, phi, _exp_interval(p.run_time, rng))
    cells_prev = np.floor(x / g.dx).astype(np.int64)
    prev_v = None
    counts = np.zeros((9, 9), dtype=np.int64)
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        pos, state = _sample_integer_time_path(p, n, rng, state)
        cells = np.floor(pos / g.dx).astype(np.int64)
        allc = np.vstack([cells_prev[None, :], cells])
        dv = np.diff(allc, axis=0)
        if np.any(np.abs(dv) > 1):
            raise ValueError("lattice displacement exceeds one cell per step; speed * dt > dx")
        v = lut[(dv[:, 0] + 1) * 3 + (dv[:, 1] + 1)]
        if prev_v is not None:
            v = np.concatenate(([prev_v], v))
        old, new = v[:-1], v[1:]
        counts += np.bincount(new * 9 + old, minlength=81).reshape(9, 9)
        prev_v = int(v[-1])
        cells_prev = cells[-1]
        done += n
    return counts


def symmetrize_counts(counts: np.ndarray, alphabet: np.ndarray = NINE_STATE) -> np.ndarray:
    """Average ``C[new, old]`` over simultaneous D4 action on both indices."""
    out = np.zeros(counts.shape, dtype=np.float64)
    for g in D4:
        perm = d4_permutation(alphabet, g)
        out += counts[np.ix_(perm, perm)]
    return out / len(D4)


def estimate_discretized_transition(
    p: ContinuousRTParams, g: GridSpec, steps: int, rng: np.random.Generator,
    heading: float | None = None,
) -> TransitionMatrix:
    """Empirical 9-state matrix for the lattice image of the continuous walk."""
    if steps < 10**6:
        raise ValueError("at least 10^6 trajectory steps are required")
    sym = symmetrize_counts(count_discretized_transitions(p, g, steps, rng, heading=heading))
    col = sym.sum(axis=0)
    if np.any(col == 0):
        missing = [tuple(NINE_STATE[k]) for k in np.flatnonzero(col == 0)]
        raise ValueError(f"velocity states never visited: {missing}; trajectory too short?")
    return TransitionMatrix(sym / col[None, :], NINE_STATE)


def is_d4_invariant(P: TransitionMatrix, atol: float = 0.0) -> bool:
    for g in D4:
        perm = d4_permutation(P.alphabet, g)
        if np.max(np.abs(P.matrix[np.ix_(perm, perm)] - P.matrix)) > atol:
            return False
    return True


def save_transition_matrix(path, P: TransitionMatrix, meta: dict | None = None) -> None:
    lines = ["# transition matrix P[new, old]; columns sum to 1"]
    for k, v in (meta or {}).items():
        lines.append(f"# {k}={v}")
    lines.append("alphabet: " + " ".join(f"{a},{b}" for a, b in P.alphabet))
    for row in P.matrix:
        lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_transition_matrix(path) -> tuple[TransitionMatrix, dict]:
    meta, rows, alphabet = {}, [], None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
        elif line.startswith("alphabet:"):
            alphabet = [tuple(int(c) for c in tok.split(",")) for tok in line.split()[1:]]
        else:
            rows.append([float(x) for x in line.split()])
    if alphabet is None:
        raise ValueError(f"{path}: missing alphabet header")
    return TransitionMatrix(np.array(rows), np.array(alphabet)), meta


def calibrated_transition(p: ContinuousRTParams, g: GridSpec, steps: int = 10**7,
                          seed: int = 0, cache_dir=None) -> TransitionMatrix:
    """``estimate_discretized_transition`` with an optional text-file cache."""
    path = None
    if cache_dir is not None:
        name = f"transition_Tp{p.run_time!r}_U{p.speed!r}_L{g.L}_dx{g.dx!r}_n{steps}_s{seed}.txt"
        path = Path(cache_dir) / name
        if path.exists():
            try:
                return load_transition_matrix(path)[0]
            except ValueError:
                pass
    P = estimate_discretized_transition(p, g, steps, np.random.default_rng(seed))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_transition_matrix(path, P, {"run_time": p.run_time, "speed": p.speed,
                                         "steps": steps, "seed": seed, "L": g.L, "dx": g.dx})
    return P
