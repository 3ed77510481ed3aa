"""Per-proposal noise-prediction errors and proposal selection.

For every configured (timestep, sample) pair the scorer regenerates the
Gaussian noise from (global_seed, timestep index, sample index), noises the
proposal's latent, asks the backend to predict that noise, and accumulates
the per-element mean squared deviation. The per-element mean (rather than a
raw sum) keeps errors comparable across latent shapes; selection is
invariant to that positive scaling.

Noise is shared across proposals at matching (t, s) so comparisons are
paired: permuting proposals, splitting them into batches, or scoring them
on different workers cannot change any value.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backend import Backend, TextEmbedding
from .errors import GroundingError
from .isolation import IsolatedView
from .schedule import LatentTensor, NoiseSchedule, SeedRecord, add_noise, sample_noise

ERROR_REDUCTION = "mean_per_element"


class NoProposals(GroundingError):
    pass


class Aggregation(enum.Enum):
    """How mask-view and crop-view errors combine into a selection key."""

    SUM = "sum"
    MIN = "min"
    MASK_ONLY = "mask"
    CROP_ONLY = "crop"

    @property
    def needs_mask(self) -> bool:
        return self is not Aggregation.CROP_ONLY

    @property
    def needs_crop(self) -> bool:
        return self is not Aggregation.MASK_ONLY


def default_timesteps(total_timesteps: int = 1000, count: int = 10) -> tuple[int, ...]:
    """Evenly spaced timesteps over [T/10, 9T/10].

    Extremes are avoided: near t=0 errors are dominated by imperceptible
    noise, near t=T by pure noise.
    """
    lo = max(total_timesteps // 10, 1)
    hi = (9 * total_timesteps) // 10
    if count == 1:
        return ((lo + hi) // 2,)
    raw = np.linspace(lo, hi, count)
    ts = sorted({int(round(v)) for v in raw})
    return tuple(ts)


@dataclass(frozen=True)
class ScoringConfig:
    timesteps: tuple[int, ...] = field(default_factory=default_timesteps)
    samples_per_timestep: int = 1
    aggregation: Aggregation = Aggregation.SUM
    seed: int = 0
    canvas: int = 512
    error_reduction: str = ERROR_REDUCTION

    def validate(self, schedule: NoiseSchedule) -> None:
        if not self.timesteps:
            raise ValueError("timestep set is empty")
        if list(self.timesteps) != sorted(set(self.timesteps)):
            raise ValueError(f"timesteps must be strictly increasing, got {self.timesteps}")
        if self.timesteps[0] < 1 or self.timesteps[-1] > schedule.timesteps:
            raise ValueError(f"timesteps {self.timesteps} outside schedule range [1, {schedule.timesteps}]")
        if self.samples_per_timestep < 1:
            raise ValueError(f"samples_per_timestep must be >= 1, got {self.samples_per_timestep}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.error_reduction != ERROR_REDUCTION:
            raise ValueError(f"unsupported error reduction {self.error_reduction!r}")

    def to_dict(self) -> dict:
        return {
            "timesteps": list(self.timesteps),
            "samples_per_timestep": self.samples_per_timestep,
            "aggregation": self.aggregation.value,
            "seed": self.seed,
            "canvas": self.canvas,
            "error_reduction": self.error_reduction,
        }


@dataclass(frozen=True)
class ProposalViews:
    """The isolated views of one proposal; either may be absent if unused."""

    mask: IsolatedView | None = None
    crop: IsolatedView | None = None


@dataclass(frozen=True)
class ScoreRecord:
    proposal_index: int
    e_mask: float | None
    e_crop: float | None
    e_total: float
    aggregation: Aggregation
    raw_errors: dict[str, list[tuple[int, int, float]]] = field(default_factory=dict)

    def summary(self) -> list[float | None]:
        return [self.e_mask, self.e_crop, self.e_total]


def noise_prediction_error(eps_values: np.ndarray, predicted: np.ndarray) -> float:
    """Per-element mean of the squared deviation between true and predicted noise."""
    diff = eps_values - predicted
    return float(np.mean(diff * diff))


def view_error(
    z0: LatentTensor,
    cond: TextEmbedding,
    cfg: ScoringConfig,
    backend: Backend,
    schedule: NoiseSchedule,
    raw: list[tuple[int, int, float]] | None = None,
) -> float:
    """Mean noise-prediction error of one latent over all (t, s) pairs."""
    cfg.validate(schedule)
    errors = []
    for ti, t in enumerate(cfg.timesteps):
        for s in range(cfg.samples_per_timestep):
            eps = sample_noise(z0.values.shape, SeedRecord(cfg.seed, ti, s))
            zt = add_noise(z0, eps, t, schedule)
            predicted = backend.predict_noise(zt, t, cond)
            err = noise_prediction_error(eps.values, predicted)
            errors.append(err)
            if raw is not None:
                raw.append((t, s, err))
    return float(np.mean(errors))


def _total(e_mask: float | None, e_crop: float | None, mode: Aggregation) -> float:
    if mode is Aggregation.SUM:
        assert e_mask is not None and e_crop is not None
        return e_mask + e_crop
    if mode is Aggregation.MIN:
        assert e_mask is not None and e_crop is not None
        return min(e_mask, e_crop)
    if mode is Aggregation.MASK_ONLY:
        assert e_mask is not None
        return e_mask
    assert e_crop is not None
    return e_crop


def score_proposals(
    views: Sequence[ProposalViews],
    cond: TextEmbedding,
    cfg: ScoringConfig,
    backend: Backend,
    schedule: NoiseSchedule,
    keep_raw: bool = False,
) -> list[ScoreRecord]:
    """Score every proposal's views; one ScoreRecord per proposal, input order."""
    if not views:
        raise NoProposals("no proposals to score")
    mode = cfg.aggregation
    records = []
    for idx, pv in enumerate(views):
        if mode.needs_mask and pv.mask is None:
            raise ValueError(f"proposal {idx} lacks the mask view required by {mode.value!r} aggregation")
        if mode.needs_crop and pv.crop is None:
            raise ValueError(f"proposal {idx} lacks the crop view required by {mode.value!r} aggregation")
        raw: dict[str, list[tuple[int, int, float]]] = {}
        e_mask = e_crop = None
        if mode.needs_mask:
            mask_raw: list[tuple[int, int, float]] | None = [] if keep_raw else None
            z0 = backend.encode_image(pv.mask)
            e_mask = view_error(z0, cond, cfg, backend, schedule, raw=mask_raw)
            if mask_raw is not None:
                raw["mask"] = mask_raw
        if mode.needs_crop:
            crop_raw: list[tuple[int, int, float]] | None = [] if keep_raw else None
            z0 = backend.encode_image(pv.crop)
            e_crop = view_error(z0, cond, cfg, backend, schedule, raw=crop_raw)
            if crop_raw is not None:
                raw["crop"] = crop_raw
        records.append(
            ScoreRecord(
                proposal_index=idx,
                e_mask=e_mask,
                e_crop=e_crop,
                e_total=_total(e_mask, e_crop, mode),
                aggregation=mode,
                raw_errors=raw,
            )
        )
    return records


def select(records: Sequence[ScoreRecord], mode: Aggregation) -> int:
    """Index of the winning proposal; ties go to the smallest proposal index."""
    if not records:
        raise NoProposals("no score records to select from")
    best = min(records, key=lambda r: (_total(r.e_mask, r.e_crop, mode), r.proposal_index))
    return best.proposal_index
