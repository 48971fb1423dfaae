"""Per-frame noise timesteps for windowed generation and training.

A window of T frames carries a staircase of noise levels: frame 0 is the
cleanest and each later frame is noisier by 1/T.  The roll schedule slides
that staircase as ``phase`` advances from 0 to 1; the preroll schedule
ramps a fresh window up from all-noise, clamping at the floor.  Training
mixes the two so the network sees both regimes.
"""
from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np


class PhaseKind(enum.Enum):
    PREROLL = "preroll"
    ROLL = "roll"


@dataclasses.dataclass(frozen=True)
class TimestepVector:
    """Noise level per window slot; slot 0 is the next frame to finish.

    ``t[k] = 1`` means clean, ``0`` means pure noise.  Entries never
    increase with k, and under the roll schedule consecutive entries differ
    by exactly 1/T.
    """

    t: np.ndarray
    phase_kind: PhaseKind
    phase: float

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class ScheduleConfig:
    window: int = 10
    preroll_probability: float = 0.2

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be a positive integer")
        if not 0.0 <= self.preroll_probability <= 1.0:
            raise ValueError("preroll_probability must lie in [0, 1]")


def _check_args(window: int, phase: float) -> None:
    if window < 1:
        raise ValueError("window must be a positive integer")
    if not 0.0 <= phase <= 1.0:
        raise ValueError(f"phase must lie in [0, 1], got {phase}")


def rolling_timesteps(window: int, phase: float) -> TimestepVector:
    """Staircase t_k = 1 - (k + phase)/T for slots k = 0..T-1."""
    _check_args(window, phase)
    k = np.arange(window, dtype=np.float64)
    return TimestepVector(1.0 - (k + phase) / window, PhaseKind.ROLL, phase)


def preroll_timesteps(window: int, phase: float) -> TimestepVector:
    """Ramp-up t_k = clamp(1 - (k/T + phase), 0, 1); late slots sit at 0."""
    _check_args(window, phase)
    k = np.arange(window, dtype=np.float64)
    t = np.clip(1.0 - (k / window + phase), 0.0, 1.0)
    return TimestepVector(t, PhaseKind.PREROLL, phase)


def sample_training_schedule(cfg: ScheduleConfig,
                             rng: np.random.Generator) -> TimestepVector:
    """Draw phase ~ U(0,1), then preroll with the configured probability."""
    phase = float(rng.uniform(0.0, 1.0))
    if float(rng.uniform(0.0, 1.0)) < cfg.preroll_probability:
        return preroll_timesteps(cfg.window, phase)
    return rolling_timesteps(cfg.window, phase)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def loss_weight(t):
    """Logit-normal density at t, extended continuously to 0 at t in {0,1}.

    Accepts a scalar or array; values outside [0,1] are a caller bug.
    """
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("loss_weight defined on [0, 1] only")
    interior = (arr > 0.0) & (arr < 1.0)
    safe = np.where(interior, arr, 0.5)
    logit = np.log(safe) - np.log1p(-safe)
    dens = _INV_SQRT_2PI / (safe * (1.0 - safe)) * np.exp(-0.5 * logit * logit)
    out = np.where(interior, dens, 0.0)
    return float(out) if np.isscalar(t) or np.ndim(t) == 0 else out
