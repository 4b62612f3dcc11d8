"""Single pursuit episodes and batch statistics.

One step of an episode: propagate the belief with the target model, pick
an action, move the agent, move the target (and advance the odor cloud),
check capture on true positions, then zero the capture zone and condition
on the observation at the new agent position.

The fast engine stores the belief in the agent frame (see ``_kernels``).
``reference=True`` runs the same loop through the lattice-frame functions
of ``belief`` and ``policy`` instead; the tests use it as an oracle.
"""

from __future__ import annotations

import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .belief import (
    COLLAPSE_TOL,
    BeliefCollapse,
    ModelContradiction,
    bayes_update,
    initial_belief,
    predict,
    to_agent_frame,
    uniform_belief,
    zero_capture_and_renormalize,
)
from .grid import ACTIONS, GridSpec, min_image
from .odor import (
    DetectionModel,
    Observation,
    ParticleCloud,
    SourcePath,
    cell_center,
    evolve_cloud,
    likelihood_table,
    periodic_distance,
    sample_observation_continuous,
)
from .policy import (
    DEFAULT_GAMMA,
    ActionScorer,
    QTable,
    argmax_tiebreak,
    cached_value_iteration,
    select_action_infotaxis,
    select_action_random,
)
from .target import (
    ContinuousRTParams,
    ContinuousTarget,
    DiscreteRTParams,
    DiscreteTarget,
    TransitionMatrix,
    calibrated_transition,
    discrete_transition_matrix,
    invariant_distribution,
    new_continuous_target,
    run_segments,
)

ENVIRONMENTS = ("discrete", "continuous")
POLICIES = ("infotaxis", "greedy", "hybrid", "random")
OUTCOMES = ("captured", "truncated")


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "hybrid"
    w: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown policy {self.kind!r}; expected one of {POLICIES}")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def weight(self) -> float:
        """Effective blend weight (greedy term) of an olfactory policy."""
        return {"infotaxis": 0.0, "greedy": 1.0}.get(self.kind, self.w)

    @property
    def uses_odor(self) -> bool:
        return self.kind != "random"

    @property
    def needs_q(self) -> bool:
        return self.uses_odor and self.weight > 0.0


@dataclass(frozen=True)
class EpisodeConfig:
    environment: str = "discrete"
    grid: GridSpec = field(default_factory=GridSpec)
    detection: DetectionModel = field(default_factory=DetectionModel)
    target: DiscreteRTParams | ContinuousRTParams = field(
        default_factory=lambda: DiscreteRTParams.from_persistence(25.0))
    policy: PolicySpec = field(default_factory=PolicySpec)
    max_steps: int | None = None  # None -> 20 L^2
    seed: int = 0
    gamma: float = DEFAULT_GAMMA
    detection_radius: float | None = None  # continuous only; None -> dx
    prewarm: float = 5.0  # cloud warm-up, in units of tau_d
    calibration_steps: int = 10**7
    calibration_seed: int = 0
    cache_dir: str | None = None

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise ValueError(f"environment must be one of {ENVIRONMENTS}")
        want = DiscreteRTParams if self.environment == "discrete" else ContinuousRTParams
        if not isinstance(self.target, want):
            raise ValueError(f"{self.environment} environment needs {want.__name__}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.prewarm < 0:
            raise ValueError("prewarm must be nonnegative")
        if self.detection_radius is not None and not self.detection_radius > 0:
            raise ValueError("detection_radius must be positive")

    @property
    def step_limit(self) -> int:
        return self.max_steps if self.max_steps is not None else 20 * self.grid.L**2

    @property
    def radius(self) -> float:
        return self.grid.dx if self.detection_radius is None else self.detection_radius

    def quasi_static_ratio(self) -> float | None:
        if self.environment != "continuous":
            return None
        return self.detection.quasi_static_ratio(self.target.speed)


@dataclass(frozen=True, eq=False)
class EpisodeContext:
    """Everything an episode needs that does not depend on the policy weight or seed."""

    P: TransitionMatrix
    q: np.ndarray
    model_table: np.ndarray  # agent-side L_yes
    true_table: np.ndarray | None  # generative L_yes (discrete environment)
    Q: QTable | None
    scorer: ActionScorer | None


def build_context(cfg: EpisodeConfig, with_q: bool | None = None) -> EpisodeContext:
    """Transition model, likelihood tables, and (if needed) the MDP values."""
    g = cfg.grid
    if cfg.environment == "discrete":
        P = discrete_transition_matrix(cfg.target)
        table = likelihood_table(cfg.detection, g, "smoluchowski")
        true_table = table
    else:
        P = calibrated_transition(cfg.target, g, cfg.calibration_steps, cfg.calibration_seed,
                                  cfg.cache_dir)
        table = likelihood_table(cfg.detection, g, "cell")
        true_table = None
    q = invariant_distribution(P)
    if with_q is None:
        with_q = cfg.policy.needs_q
    Q = cached_value_iteration(P, g, cfg.gamma, cfg.cache_dir)[0] if with_q else None
    scorer = ActionScorer(g, table, Q) if cfg.policy.uses_odor else None
    return EpisodeContext(P, q, table, true_table, Q, scorer)


@dataclass(frozen=True)
class EpisodeRecord:
    episode_id: int
    seed: int
    outcome: str
    T: int
    n_detections: int
    final_distance: float
    n_collapses: int = 0


def _streams(seed: int) -> list[np.random.Generator]:
    # environment (init, target, cloud) / observations / policy tie-breaks
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(3)]


def episode_seed(master_seed: int, index: int) -> int:
    """64-bit seed of episode ``index``; a pure function of ``(master_seed, index)``."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


def _sample_cell(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p.ravel())
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), p.size - 1)


class Episode:
    """A pursuit in progress.  ``step()`` advances one decision; ``run()`` finishes it."""

    def __init__(self, cfg: EpisodeConfig, ctx: EpisodeContext | None = None,
                 reference: bool = False, episode_id: int = 0):
        if ctx is None:
            ctx = build_context(cfg)
        if cfg.policy.needs_q and ctx.Q is None:
            raise ValueError("policy needs MDP values but the context has none")
        self.cfg, self.ctx, self.reference = cfg, ctx, reference
        self.episode_id = episode_id
        self.rng_env, self.rng_obs, self.rng_pol = _streams(cfg.seed)
        g = cfg.grid
        self.L = g.L
        self.t = 0
        self.n_detections = 0
        self.n_collapses = 0
        self.outcome: str | None = None
        self.prev_action: int | None = None
        self.actions: list[int] = []
        self.agent = g.center
        self.cloud: ParticleCloud | None = None

        b0 = initial_belief(self.agent, ctx.model_table, ctx.q, g)
        k = _sample_cell(b0.sum(axis=0), self.rng_env)
        cell = divmod(k, g.L)
        u0 = _sample_cell(ctx.q, self.rng_env)
        if cfg.environment == "discrete":
            self.target = DiscreteTarget(cell, u0)
        else:
            x0 = (np.array(cell, dtype=np.float64) + self.rng_env.random(2)) * g.dx
            self._init_continuous(x0)
        if reference:
            self.b = b0
        else:
            self.B = np.ascontiguousarray(to_agent_frame(b0, self.agent))
            self.Bpred = np.empty_like(self.B)
            self._work = np.empty_like(self.B)

    def _init_continuous(self, x0: np.ndarray) -> None:
        cfg, rng = self.cfg, self.rng_env
        domain = self.L * cfg.grid.dx
        s = new_continuous_target(np.zeros(2), cfg.target, rng)
        warm = cfg.prewarm * cfg.detection.tau_d
        cloud = ParticleCloud()
        if warm > 0:
            times, pos, heads, s = run_segments(s, cfg.target, warm, domain, rng)
            path = SourcePath(times, pos, heads, cfg.target.speed)
            cloud = evolve_cloud(cloud, path, cfg.detection, warm, min(cfg.target.dt, warm),
                                 domain, rng)
        shift = x0 - s.position
        self.target = ContinuousTarget(x0.copy(), s.heading, s.next_tumble - s.time, 0.0)
        self.cloud = ParticleCloud(np.mod(cloud.positions + shift, domain),
                                   cloud.death - s.time, 0.0)

    # -- state inspection --------------------------------------------------

    @property
    def belief(self) -> np.ndarray:
        """Current belief in the lattice frame, ``(K, L, L)``."""
        if self.reference:
            return self.b.copy()
        return to_agent_frame(self.B, self.agent)  # the re-indexing is an involution

    def target_distance(self) -> float:
        g = self.cfg.grid
        if self.cfg.environment == "discrete":
            d = min_image(self.agent, self.target.position, g)
            return math.hypot(d[0], d[1]) * g.dx
        return float(periodic_distance(self.target.position, cell_center(self.agent, g.dx),
                                       self.L * g.dx))

    def captured(self) -> bool:
        g = self.cfg.grid
        if self.cfg.environment == "discrete":
            d = min_image(self.agent, self.target.position, g)
            return d[0] * d[0] + d[1] * d[1] <= 2
        return self.target_distance() <= math.sqrt(2.0) * g.dx

    # -- one decision ------------------------------------------------------

    def _select(self) -> int:
        pol = self.cfg.policy
        if not pol.uses_odor:
            return select_action_random(self.prev_action, pol.alpha, self.rng_pol)
        if self.reference:
            self.b = predict(self.b, self.ctx.P)
            if pol.weight == 0.0:
                return select_action_infotaxis(self.b, self.agent, self.ctx.model_table,
                                               self.cfg.grid, self.rng_pol)
            scores = self.ctx.scorer.scores(self.b, self.agent, pol.weight)
            return argmax_tiebreak(scores, self.rng_pol)
        _kernels.predict_relative(self.B, self.ctx.P.matrix, self.ctx.P.alphabet, self.Bpred,
                                 self._work)
        return argmax_tiebreak(self.ctx.scorer.relative_scores(self.Bpred, pol.weight), self.rng_pol)

    def _move_target(self) -> None:
        cfg = self.cfg
        if cfg.environment == "discrete":
            s, P = self.target, self.ctx.P
            u = P.alphabet[s.velocity]
            pos = ((s.position[0] + int(u[0])) % self.L, (s.position[1] + int(u[1])) % self.L)
            self.target = DiscreteTarget(pos, P.sample(s.velocity, self.rng_env))
            return
        domain = self.L * cfg.grid.dx
        times, pos, heads, s = run_segments(self.target, cfg.target, 1.0, domain, self.rng_env)
        path = SourcePath(times, pos, heads, cfg.target.speed)
        self.cloud = evolve_cloud(self.cloud, path, cfg.detection, 1.0, cfg.target.dt, domain,
                                  self.rng_env)
        self.target = s

    def _observe(self) -> bool:
        cfg = self.cfg
        if cfg.environment == "discrete":
            d = min_image(self.agent, self.target.position, cfg.grid)
            # one draw per step keeps the observation stream aligned across policies
            return bool(self.rng_obs.random() < self.ctx.true_table[d[0] % self.L, d[1] % self.L])
        obs = sample_observation_continuous(self.agent, self.cloud, cfg.radius, cfg.grid)
        return obs == Observation.DETECTION

    def _update(self, a: int, detected: bool) -> None:
        ctx, g = self.ctx, self.cfg.grid
        obs = Observation.DETECTION if detected else Observation.NO_DETECTION
        if self.cfg.policy.uses_odor is False:
            return
        if self.reference:
            try:
                b, _ = zero_capture_and_renormalize(self.b, self.agent, g)
                self.b, _ = bayes_update(b, obs, self.agent, ctx.model_table, g)
            except (BeliefCollapse, ModelContradiction):
                self.n_collapses += 1
                b = uniform_belief(self.agent, ctx.q, g)
                self.b, _ = bayes_update(b, obs, self.agent, ctx.model_table, g)
            return
        ai, aj = int(ACTIONS[a][0]), int(ACTIONS[a][1])
        p_found, p_obs = _kernels.move_and_observe(self.Bpred, ai, aj, ctx.model_table, detected,
                                                   COLLAPSE_TOL, self.B)
        if p_found < 0 or p_obs == 0.0:
            self.n_collapses += 1
            fresh = np.ascontiguousarray(to_agent_frame(uniform_belief(self.agent, ctx.q, g),
                                                        self.agent))
            _kernels.move_and_observe(fresh, 0, 0, ctx.model_table, detected, COLLAPSE_TOL, self.B)

    def step(self) -> Observation:
        """One decision.  Returns the observation (``FOUND`` on capture)."""
        if self.outcome is not None:
            raise RuntimeError("episode already finished")
        a = self._select()
        self.prev_action = a
        self.actions.append(a)
        self.agent = ((self.agent[0] + int(ACTIONS[a][0])) % self.L,
                      (self.agent[1] + int(ACTIONS[a][1])) % self.L)
        self._move_target()
        self.t += 1
        if self.captured():
            self.outcome = "captured"
            if not self.reference and self.cfg.policy.uses_odor:
                # final belief = prediction, re-indexed to the new agent position
                self.B = np.roll(self.Bpred, (int(ACTIONS[a][0]), int(ACTIONS[a][1])), axis=(1, 2))
            return Observation.FOUND
        detected = self._observe()
        self.n_detections += detected
        self._update(a, detected)
        if self.t >= self.cfg.step_limit:
            self.outcome = "truncated"
        return Observation.DETECTION if detected else Observation.NO_DETECTION

    def run(self) -> EpisodeRecord:
        while self.outcome is None:
            self.step()
        return self.record()

    def record(self) -> EpisodeRecord:
        if self.outcome is None:
            raise RuntimeError("episode still running")
        return EpisodeRecord(self.episode_id, self.cfg.seed, self.outcome, self.t,
                             self.n_detections, self.target_distance(), self.n_collapses)


def run_episode(cfg: EpisodeConfig, ctx: EpisodeContext | None = None,
                episode_id: int = 0) -> EpisodeRecord:
    return Episode(cfg, ctx, episode_id=episode_id).run()


# -- batches ---------------------------------------------------------------


@dataclass(frozen=True)
class BatchStats:
    n: int
    mean_T: float
    stderr: float
    capture_fraction: float
    n_truncated: int
    n_collapses: int
    max_steps: int
    ccdf_T: np.ndarray = field(repr=False)
    ccdf_p: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {"n": self.n, "mean_T": self.mean_T, "stderr": self.stderr,
                "capture_fraction": self.capture_fraction, "n_truncated": self.n_truncated,
                "n_collapses": self.n_collapses, "max_steps": self.max_steps}


def search_times(records) -> np.ndarray:
    """Search times with truncated episodes counted at the step limit (their recorded T)."""
    return np.array([r.T for r in records], dtype=np.float64)


def ccdf(records, max_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """``P(T > t)`` at ``t = 0``, every observed capture time, and ``max_steps``.

    Truncated episodes never count as found, so the value at ``max_steps``
    is the truncation fraction.
    """
    n = len(records)
    caught = np.sort([r.T for r in records if r.outcome == "captured"])
    ts = np.unique(np.concatenate(([0], caught, [max_steps]))).astype(np.int64)
    p = 1.0 - np.searchsorted(caught, ts, side="right") / n
    return ts, p


def batch_stats(records, max_steps: int) -> BatchStats:
    if not records:
        raise ValueError("no records")
    T = search_times(records)
    n = len(T)
    se = float(T.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    n_trunc = sum(r.outcome == "truncated" for r in records)
    ts, p = ccdf(records, max_steps)
    return BatchStats(n, float(T.mean()), se, 1.0 - n_trunc / n, n_trunc,
                      sum(r.n_collapses for r in records), max_steps, ts, p)


_WORKER: dict = {}


def _worker_init(cfg: EpisodeConfig, ctx: EpisodeContext, master_seed: int) -> None:
    _WORKER.update(cfg=cfg, ctx=ctx, master=master_seed)


def _worker_run(i: int) -> EpisodeRecord:
    cfg = replace(_WORKER["cfg"], seed=episode_seed(_WORKER["master"], i))
    return run_episode(cfg, _WORKER["ctx"], episode_id=i)


def run_batch(cfg: EpisodeConfig, n_episodes: int, master_seed: int, jobs: int = 1,
              ctx: EpisodeContext | None = None) -> tuple[BatchStats, list[EpisodeRecord]]:
    """Run episodes ``0..n-1`` with seeds ``episode_seed(master_seed, i)``.

    Every episode owns its seed, so the records do not depend on ``jobs``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if ctx is None:
        ctx = build_context(cfg)
    if jobs <= 1:
        _worker_init(cfg, ctx, master_seed)
        records = [_worker_run(i) for i in range(n_episodes)]
    else:
        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("fork"),
                                 initializer=_worker_init,
                                 initargs=(cfg, ctx, master_seed)) as ex:
            chunk = max(1, n_episodes // (4 * jobs))
            records = list(ex.map(_worker_run, range(n_episodes), chunksize=chunk))
    records.sort(key=lambda r: r.episode_id)
    return batch_stats(records, cfg.step_limit), records
