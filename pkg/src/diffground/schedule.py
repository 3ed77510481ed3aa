"""Forward-process noise schedule math for DDPM-style latent diffusion.

A schedule holds per-step variances beta_1..beta_T and their cumulative
signal-retention products abar_t = prod_{i<=t}(1 - beta_i). The composed
closed form of the stepwise chain q(z_t | z_{t-1}) is

    z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I).

Timesteps are 1-indexed (t = 1..T); index-0 bookkeeping stays internal.

Noise is generated by a counter-based Philox generator keyed on
(global_seed, timestep_index, sample_index) only. Deliberately not keyed on
proposal identity: every proposal scored at the same (t, s) sees the same
noise realization, so comparisons are paired and results are independent of
evaluation order and batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroundingError

SCHEDULE_KINDS = ("linear", "scaled_linear")


class InvalidScheduleParams(GroundingError):
    pass


class ShapeMismatch(GroundingError):
    pass


class TimestepOutOfRange(GroundingError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    timesteps: int

    def alpha_bar(self, t: int) -> float:
        """Cumulative product abar_t for 1-indexed timestep t."""
        self.check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.betas[t - 1])

    def check_timestep(self, t: int) -> None:
        if not 1 <= t <= self.timesteps:
            raise TimestepOutOfRange(f"timestep {t} outside [1, {self.timesteps}]")


def make_schedule(kind: str, beta_start: float, beta_end: float, timesteps: int) -> NoiseSchedule:
    """Build a noise schedule.

    linear: beta_t evenly spaced on [beta_start, beta_end].
    scaled_linear: sqrt(beta_t) evenly spaced on [sqrt(beta_start), sqrt(beta_end)].
    """
    if kind not in SCHEDULE_KINDS:
        raise InvalidScheduleParams(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    if timesteps < 1:
        raise InvalidScheduleParams(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidScheduleParams(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    else:
        betas = np.linspace(beta_start**0.5, beta_end**0.5, timesteps, dtype=np.float64) ** 2
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, timesteps=timesteps)


@dataclass(frozen=True)
class SeedRecord:
    """Complete key for regenerating one noise tensor bit-exactly."""

    global_seed: int
    timestep_index: int
    sample_index: int

    def __post_init__(self) -> None:
        for name in ("global_seed", "timestep_index", "sample_index"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")


@dataclass(frozen=True)
class LatentTensor:
    """Rank-3 latent (channels x h x w) plus a provenance tag for the source view."""

    values: np.ndarray
    provenance: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class NoiseSample:
    values: np.ndarray
    seed: SeedRecord


@dataclass(frozen=True)
class NoisedLatent:
    values: np.ndarray
    t: int
    noise: NoiseSample


def sample_noise(shape: tuple[int, ...], seed: SeedRecord) -> NoiseSample:
    """Draw standard-normal noise keyed solely on the seed record.

    Philox is counter-based, so the same record always regenerates the same
    tensor regardless of call order or process history.
    """
    seq = np.random.SeedSequence([seed.global_seed, seed.timestep_index, seed.sample_index])
    gen = np.random.Generator(np.random.Philox(seq))
    return NoiseSample(values=gen.standard_normal(shape, dtype=np.float64), seed=seed)


def add_noise(z0: LatentTensor, eps: NoiseSample, t: int, schedule: NoiseSchedule) -> NoisedLatent:
    """Closed-form forward noising: sqrt(abar_t)*z0 + sqrt(1-abar_t)*eps."""
    if z0.values.shape != eps.values.shape:
        raise ShapeMismatch(f"latent shape {z0.values.shape} != noise shape {eps.values.shape}")
    abar = schedule.alpha_bar(t)
    values = np.sqrt(abar) * z0.values + np.sqrt(1.0 - abar) * eps.values
    return NoisedLatent(values=values, t=t, noise=eps)
