"""Odor environment: mean concentration, hit rates, detection likelihoods, particle cloud."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .bessel import k0
from .grid import GridSpec, within_capture, min_image


class Observation(enum.IntEnum):
    NO_DETECTION = 0
    DETECTION = 1
    FOUND = 2


@dataclass(frozen=True)
class DetectionModel:
    """Physical parameters of the odor source and the sensor.

    ``kappa`` defaults to ``lam**2 / tau_d``; if given it must agree.
    """

    lam: float = 3.0
    rate: float = 1.0
    tau_d: float = 9.0
    dx: float = 1.0
    dt: float = 1.0
    kappa: float | None = field(default=None)

    def __post_init__(self):
        for name in ("lam", "rate", "tau_d", "dx", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        implied = self.lam**2 / self.tau_d
        if self.kappa is None:
            object.__setattr__(self, "kappa", implied)
        elif abs(self.kappa - implied) > 1e-12 * implied:
            raise ValueError(f"kappa={self.kappa} inconsistent with lam^2/tau_d={implied}")
        if not 2 * self.lam > self.dx:
            raise ValueError("lam must exceed dx/2 for the Smoluchowski prefactor")

    @classmethod
    def from_speed_ratio(cls, ratio: float, particles: float = 36.0, lam: float = 3.0,
                         speed: float = 1.0, **kw) -> "DetectionModel":
        """Model with ``speed * tau_d / lam == ratio`` and ``rate * tau_d == particles``."""
        tau_d = ratio * lam / speed
        return cls(lam=lam, rate=particles / tau_d, tau_d=tau_d, **kw)

    def quasi_static_ratio(self, speed: float) -> float:
        """``U tau_d / lam``; the steady-plume approximation needs this << 1."""
        return speed * self.tau_d / self.lam

    @property
    def smoluchowski_factor(self) -> float:
        return 2 * math.pi * self.kappa * self.dt / math.log(2 * self.lam / self.dx)


def _norm(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    r = np.hypot(d[..., 0], d[..., 1])
    if np.any(r == 0):
        raise ValueError("likelihoods are undefined at zero displacement")
    return r


def mean_concentration(d, m: DetectionModel):
    """Steady mean concentration around a fixed source at displacement ``d`` (lattice units)."""
    r = _norm(d) * m.dx
    return m.rate * m.tau_d / (2 * math.pi * m.lam**2) * k0(r / m.lam)


def hit_rate(d, m: DetectionModel):
    """Expected number of detected particles per sensing interval."""
    return m.smoluchowski_factor * mean_concentration(d, m)


def likelihood_from_exponent(mu):
    """``(L_no, L_yes) = (exp(-mu), 1 - exp(-mu))``."""
    l_no = np.exp(-np.asarray(mu, dtype=np.float64))
    l_yes = 1.0 - l_no
    if l_no.ndim == 0:
        return float(l_no), float(l_yes)
    return l_no, l_yes


def detection_likelihood(d, m: DetectionModel):
    return likelihood_from_exponent(hit_rate(d, m))


def approx_likelihood_continuous(d, m: DetectionModel):
    """Agent-side likelihood for the particle environment: exponent ``dx^2 <theta>``."""
    return likelihood_from_exponent(m.dx**2 * mean_concentration(d, m))


LIKELIHOOD_KINDS = ("smoluchowski", "cell")


@lru_cache(maxsize=32)
def likelihood_table(m: DetectionModel, g: GridSpec, kind: str = "smoluchowski") -> np.ndarray:
    """``L_yes`` for every displacement, indexed by ``d mod L``.

    Distances use the minimum image.  The ``d = 0`` entry is set to zero; it is
    inside the capture zone and never enters a belief update.
    """
    if kind not in LIKELIHOOD_KINDS:
        raise ValueError(f"unknown likelihood kind {kind!r}")
    o = g.offsets
    d = np.stack(np.meshgrid(o, o, indexing="ij"), axis=-1).reshape(-1, 2)
    out = np.zeros(len(d))
    nz = np.any(d != 0, axis=1)
    fn = detection_likelihood if kind == "smoluchowski" else approx_likelihood_continuous
    out[nz] = fn(d[nz], m)[1]
    out = out.reshape(g.L, g.L)
    out.flags.writeable = False
    return out


def sample_observation_discrete(agent, target, table: np.ndarray, g: GridSpec,
                                rng: np.random.Generator) -> Observation:
    d = min_image(agent, target, g)
    if within_capture(d):
        return Observation.FOUND
    p = table[d[0] % g.L, d[1] % g.L]
    return Observation.DETECTION if rng.random() < p else Observation.NO_DETECTION


@dataclass
class ParticleCloud:
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    death: np.ndarray = field(default_factory=lambda: np.zeros(0))
    time: float = 0.0

    def __len__(self):
        return len(self.death)


@dataclass(frozen=True)
class SourcePath:
    """Piecewise-linear source trajectory over one interval (see ``target.run_segments``)."""

    times: np.ndarray
    positions: np.ndarray
    headings: np.ndarray
    speed: float

    def at(self, t: np.ndarray) -> np.ndarray:
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        step = self.speed * (t - self.times[k])
        return self.positions[k] + np.stack(
            [step * np.cos(self.headings[k]), step * np.sin(self.headings[k])], axis=-1
        )

    @classmethod
    def fixed(cls, position, t0: float = 0.0) -> "SourcePath":
        return cls(np.array([t0]), np.asarray(position, float)[None, :], np.zeros(1), 0.0)


def evolve_cloud(c: ParticleCloud, path: SourcePath, m: DetectionModel, horizon: float,
                 dt: float, domain: float, rng: np.random.Generator) -> ParticleCloud:
    """Advance the tracer cloud by ``horizon``.

    Each sub-step of length ``dt`` emits Poisson(rate * dt) tracers at uniform
    times inside the sub-step, at the source position at that time, with
    exponential lifetimes of mean ``tau_d``.  Tracers diffuse with variance
    ``2 kappa`` per unit time per axis.  Positions are sampled exactly at the
    end of the interval, which is the only time they are observed.
    """
    if dt > horizon + 1e-12:
        raise ValueError("sub-step dt must not exceed the horizon")
    t0, t1 = c.time, c.time + horizon
    alive = c.death > t1
    old_pos = c.positions[alive]
    old_death = c.death[alive]
    if m.kappa > 0 and len(old_pos):
        old_pos = old_pos + rng.normal(0.0, math.sqrt(2 * m.kappa * horizon), size=old_pos.shape)

    n_sub = max(1, int(round(horizon / dt)))
    sub = horizon / n_sub
    counts = rng.poisson(m.rate * sub, size=n_sub)
    n_new = int(counts.sum())
    if n_new:
        starts = t0 + sub * np.repeat(np.arange(n_sub), counts)
        born = starts + rng.uniform(0.0, sub, size=n_new)
        death = born + rng.exponential(m.tau_d, size=n_new)
        keep = death > t1
        born, death = born[keep], death[keep]
        pos = path.at(born)
        if m.kappa > 0 and len(born):
            sd = np.sqrt(2 * m.kappa * (t1 - born))[:, None]
            pos = pos + sd * rng.normal(size=pos.shape)
        old_pos = np.vstack([old_pos, pos])
        old_death = np.concatenate([old_death, death])
    return ParticleCloud(np.mod(old_pos, domain), old_death, t1)


def periodic_distance(a: np.ndarray, b: np.ndarray, domain: float) -> np.ndarray:
    d = np.abs(np.asarray(a, float) - np.asarray(b, float))
    d = np.minimum(d, domain - d)
    return np.hypot(d[..., 0], d[..., 1])


def cell_center(point, dx: float = 1.0) -> np.ndarray:
    return (np.asarray(point, dtype=np.float64) + 0.5) * dx


def sample_observation_continuous(agent, c: ParticleCloud, radius: float, g: GridSpec) -> Observation:
    """Detection iff a live tracer lies within ``radius`` (closed ball) of the agent's cell centre."""
    if len(c) == 0:
        return Observation.NO_DETECTION
    r = periodic_distance(c.positions, cell_center(agent, g.dx), g.L * g.dx)
    return Observation.DETECTION if np.any(r <= radius) else Observation.NO_DETECTION
