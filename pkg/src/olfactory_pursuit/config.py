"""Experiment configuration: INI files with one section per concern.

Example::

    [experiment]
    environment = discrete
    n_episodes = 2000
    seed = 1

    [sweep]
    tau_p = 2, 25
    w = 0, 0.5, 0.9

Every key has a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path

from .episode import ENVIRONMENTS, EpisodeConfig, PolicySpec
from .grid import GridSpec
from .odor import DetectionModel
from .target import ContinuousRTParams, DiscreteRTParams

__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


# key -> section; order of sections is the order of the serialized file
_SECTIONS = {
    "experiment": ("environment", "n_episodes", "seed", "jobs", "out", "cache_dir"),
    "grid": ("L", "dx"),
    "odor": ("lam", "rate", "tau_d", "particles", "emission_dt", "detection_radius", "prewarm"),
    "target": ("speed", "calibration_steps", "calibration_seed"),
    "policy": ("gamma", "max_steps"),
    "sweep": ("tau_p", "w", "alpha", "speed_ratio"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    environment: str = "discrete"
    n_episodes: int = 10_000
    seed: int = 0
    jobs: int = 1
    out: str = "results"
    cache_dir: str = "cache"
    L: int = 51
    dx: float = 1.0
    lam: float = 3.0
    rate: float = 1.0  # emission rate of the discrete model
    tau_d: float = 9.0  # discrete model only; the hit rate does not depend on it
    particles: float = 36.0  # R tau_d, continuous model
    emission_dt: float = 0.1
    detection_radius: float | None = None
    prewarm: float = 5.0
    speed: float = 1.0
    calibration_steps: int = 10**7
    calibration_seed: int = 0
    gamma: float = 0.95
    max_steps: int | None = None
    tau_p: tuple = (2.0, 5.0, 10.0, 25.0)
    w: tuple = tuple(round(0.1 * k, 1) for k in range(11))
    alpha: tuple = (0.01, 0.03, 0.1, 0.3, 1.0)
    speed_ratio: tuple = (0.1,)

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"environment must be one of {ENVIRONMENTS}")
        for name in ("tau_p", "w", "alpha", "speed_ratio"):
            vals = getattr(self, name)
            if len(vals) == 0:
                raise ConfigError(f"sweep list {name!r} is empty")
            object.__setattr__(self, name, tuple(float(v) for v in vals))
        if self.n_episodes < 1:
            raise ConfigError("n_episodes must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if any(not 0 <= v <= 1 for v in self.w):
            raise ConfigError("w values must lie in [0, 1]")
        if any(not 0 < v <= 1 for v in self.alpha):
            raise ConfigError("alpha values must lie in (0, 1]")
        if any(v <= 0 for v in self.speed_ratio):
            raise ConfigError("speed_ratio values must be positive")
        lo = 1.0 if self.environment == "discrete" else 0.0
        if any(not v > lo for v in self.tau_p):
            raise ConfigError(f"tau_p values must exceed {lo:g}")
        # Build one point per sweep value to surface range errors early.
        try:
            for tp in self.tau_p:
                for r in self.speed_ratio:
                    self.episode_config(tp, PolicySpec("random"), speed_ratio=r)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.L, self.dx)

    def detection(self, speed_ratio: float | None = None) -> DetectionModel:
        if self.environment == "discrete":
            return DetectionModel(lam=self.lam, rate=self.rate, tau_d=self.tau_d, dx=self.dx)
        r = self.speed_ratio[0] if speed_ratio is None else speed_ratio
        return DetectionModel.from_speed_ratio(r, self.particles, self.lam, self.speed, dx=self.dx)

    def episode_config(self, tau_p: float, policy: PolicySpec, seed: int = 0,
                       speed_ratio: float | None = None) -> EpisodeConfig:
        if self.environment == "discrete":
            target = DiscreteRTParams.from_persistence(tau_p)
        else:
            target = ContinuousRTParams(self.speed, tau_p, self.emission_dt)
        return EpisodeConfig(
            environment=self.environment, grid=self.grid, detection=self.detection(speed_ratio),
            target=target, policy=policy, max_steps=self.max_steps, seed=seed, gamma=self.gamma,
            detection_radius=self.detection_radius, prewarm=self.prewarm,
            calibration_steps=self.calibration_steps, calibration_seed=self.calibration_seed,
            cache_dir=self.cache_dir,
        )


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, text: str, kind):
    text = text.strip()
    try:
        if kind == "tuple":
            return tuple(float(x) for x in text.split(",") if x.strip())
        if text.lower() == "none":
            if kind in ("float|None", "int|None"):
                return None
            raise ValueError("none is not allowed here")
        if kind.startswith("int"):
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind.startswith("float"):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} ({exc})") from exc


def _kinds() -> dict:
    out = {}
    for f in fields(ExperimentConfig):
        t = str(f.type).replace(" ", "")
        out[f.name] = "tuple" if t == "tuple" else t
    return out


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for section, keys in _SECTIONS.items():
        cp[section] = {k: _format(getattr(cfg, k)) for k in keys}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str, **overrides) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    kinds = _kinds()
    values = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse(key, raw, kinds[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, **overrides) -> ExperimentConfig:
    text = "" if path is None else Path(path).read_text()
    return from_ini(text, **overrides)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_ini(cfg).encode()).hexdigest()[:16]


def artifact_version() -> str:
    """Package version plus the short commit hash when run from a git checkout."""
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def replace_config(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
