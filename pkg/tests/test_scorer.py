from __future__ import annotations

import numpy as np
import pytest

from diffground import (
    Aggregation,
    BoundingBox,
    ProposalViews,
    ScoringConfig,
    SourceImage,
    SyntheticBackend,
    crop_isolate,
    mask_isolate,
    score_proposals,
    select,
    view_error,
)
from diffground.schedule import sample_noise
from diffground.scorer import NoProposals, ScoreRecord, default_timesteps, noise_prediction_error

from helpers import PALETTE, hex_to_unit_rgb, make_scene


class OffsetBackend(SyntheticBackend):
    """Predicts the true noise plus a constant offset, for exact error algebra."""

    def __init__(self, offset: float, **kwargs):
        super().__init__(**kwargs)
        self.offset = offset

    def predict_noise(self, zt, t, cond):
        eps_true = sample_noise(zt.values.shape, zt.noise.seed).values
        return eps_true + self.offset


def record(idx: int, e_mask: float | None, e_crop: float | None, mode: Aggregation) -> ScoreRecord:
    total = {
        Aggregation.SUM: (e_mask or 0.0) + (e_crop or 0.0),
        Aggregation.MIN: min(v for v in (e_mask, e_crop) if v is not None),
        Aggregation.MASK_ONLY: e_mask,
        Aggregation.CROP_ONLY: e_crop,
    }[mode]
    return ScoreRecord(proposal_index=idx, e_mask=e_mask, e_crop=e_crop, e_total=total, aggregation=mode)


def scene_views(backend, rng, n=4, canvas=64):
    pixels, boxes, colors, target = make_scene(rng, n)
    img = SourceImage(pixels=pixels.astype(np.float64) / 255.0)
    views = [
        ProposalViews(
            mask=mask_isolate(img, b, canvas=canvas, proposal_index=i),
            crop=crop_isolate(img, b, canvas=canvas, proposal_index=i),
        )
        for i, b in enumerate(boxes)
    ]
    return views, colors, target


class TestDefaultTimesteps:
    def test_standard_grid(self):
        assert default_timesteps(1000) == (100, 189, 278, 367, 456, 544, 633, 722, 811, 900)

    def test_strictly_increasing_within_range(self):
        for total in (10, 50, 1000):
            ts = default_timesteps(total)
            assert list(ts) == sorted(set(ts))
            assert ts[0] >= 1 and ts[-1] <= total


class TestScoringConfigValidation:
    def test_defaults_valid(self, schedule):
        ScoringConfig(canvas=64).validate(schedule)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"timesteps": ()},
            {"timesteps": (500, 100)},
            {"timesteps": (100, 100)},
            {"timesteps": (0, 100)},
            {"timesteps": (100, 1001)},
            {"samples_per_timestep": 0},
            {"seed": -1},
            {"error_reduction": "sum"},
        ],
    )
    def test_rejects_bad_values(self, schedule, kwargs):
        with pytest.raises(ValueError):
            ScoringConfig(canvas=64, **kwargs).validate(schedule)


class TestViewError:
    def test_hand_computed_mean_of_squares(self):
        assert noise_prediction_error(np.array([1.0, -1.0]), np.array([0.0, 0.0])) == 1.0

    def test_matching_signature_gives_exact_zero(self, backend, schedule, scoring_config):
        color = PALETTE[3]
        img = SourceImage(pixels=np.full((64, 64, 3), hex_to_unit_rgb(color)))
        view = crop_isolate(img, BoundingBox(0, 0, 64, 64), canvas=64)
        z0 = backend.encode_image(view)
        cond = backend.encode_text(f"the {color} thing")
        assert view_error(z0, cond, scoring_config, backend, schedule) == 0.0

    @pytest.mark.parametrize("offset", [0.3, 1.7, -0.9])
    def test_constant_offset_error_is_offset_squared(self, schedule, scoring_config, offset):
        b = OffsetBackend(offset, canvas=64, seed=0)
        img = SourceImage(pixels=np.random.default_rng(0).random((64, 64, 3)))
        z0 = b.encode_image(crop_isolate(img, BoundingBox(0, 0, 64, 64), canvas=64))
        cond = b.encode_text("whatever text")
        err = view_error(z0, cond, scoring_config, b, schedule)
        assert err == pytest.approx(offset**2, abs=1e-10)

    def test_error_is_nonnegative(self, backend, schedule, scoring_config, rng):
        img = SourceImage(pixels=rng.random((64, 64, 3)))
        z0 = backend.encode_image(crop_isolate(img, BoundingBox(0, 0, 64, 64), canvas=64))
        cond = backend.encode_text("some unrelated words")
        assert view_error(z0, cond, scoring_config, backend, schedule) >= 0.0

    def test_raw_errors_collected(self, backend, schedule, scoring_config, rng):
        img = SourceImage(pixels=rng.random((64, 64, 3)))
        z0 = backend.encode_image(crop_isolate(img, BoundingBox(0, 0, 64, 64), canvas=64))
        cond = backend.encode_text("words")
        raw: list = []
        view_error(z0, cond, scoring_config, backend, schedule, raw=raw)
        assert [(t, s) for t, s, _ in raw] == [(100, 0), (500, 0), (900, 0)]


class TestScoreProposals:
    def test_permutation_equivariance(self, backend, schedule, scoring_config, rng):
        views, _, _ = scene_views(backend, rng)
        base = score_proposals(views, backend.encode_text("the thing"), scoring_config, backend, schedule)
        perm = [2, 0, 3, 1]
        permuted = score_proposals(
            [views[i] for i in perm], backend.encode_text("the thing"), scoring_config, backend, schedule
        )
        for new_idx, old_idx in enumerate(perm):
            assert permuted[new_idx].e_mask == base[old_idx].e_mask
            assert permuted[new_idx].e_crop == base[old_idx].e_crop

    def test_batch_size_invariance_bit_exact(self, backend, schedule, scoring_config, rng):
        views, _, _ = scene_views(backend, rng)
        cond = backend.encode_text("the object")
        together = score_proposals(views, cond, scoring_config, backend, schedule)
        separate = [
            score_proposals([v], cond, scoring_config, backend, schedule)[0] for v in views
        ]
        for a, b in zip(together, separate):
            assert a.e_mask == b.e_mask
            assert a.e_crop == b.e_crop

    def test_singleton_is_argmin(self, backend, schedule, scoring_config, rng):
        views, _, _ = scene_views(backend, rng, n=1)
        cond = backend.encode_text("anything at all")
        records = score_proposals(views, cond, scoring_config, backend, schedule)
        assert select(records, Aggregation.SUM) == 0

    def test_planted_match_is_strictly_smallest_in_both_views(self, backend, schedule, scoring_config, rng):
        views, colors, target = scene_views(backend, rng, n=3)
        cond = backend.encode_text(f"the {colors[target]} object")
        records = score_proposals(views, cond, scoring_config, backend, schedule)
        for r in records:
            if r.proposal_index == target:
                continue
            assert records[target].e_mask < r.e_mask
            assert records[target].e_crop < r.e_crop

    def test_empty_input_rejected(self, backend, schedule, scoring_config):
        with pytest.raises(NoProposals):
            score_proposals([], backend.encode_text("x"), scoring_config, backend, schedule)

    def test_mask_only_mode_skips_crop_views(self, backend, schedule, rng):
        cfg = ScoringConfig(
            timesteps=(100, 500), aggregation=Aggregation.MASK_ONLY, seed=3, canvas=64
        )
        views, _, _ = scene_views(backend, rng, n=2)
        mask_only = [ProposalViews(mask=v.mask, crop=None) for v in views]
        records = score_proposals(mask_only, backend.encode_text("x"), cfg, backend, schedule)
        assert all(r.e_crop is None for r in records)
        assert all(r.e_total == r.e_mask for r in records)

    def test_missing_required_view_rejected(self, backend, schedule, scoring_config, rng):
        views, _, _ = scene_views(backend, rng, n=2)
        broken = [ProposalViews(mask=views[0].mask, crop=None), views[1]]
        with pytest.raises(ValueError):
            score_proposals(broken, backend.encode_text("x"), scoring_config, backend, schedule)


class TestSelect:
    def test_sum_and_min_worked_example(self):
        records = [
            record(0, 1.0, 2.0, Aggregation.SUM),
            record(1, 2.0, 0.5, Aggregation.SUM),
        ]
        assert select(records, Aggregation.SUM) == 1  # 2.5 < 3.0
        assert select(records, Aggregation.MIN) == 1  # 0.5 smallest overall

    def test_tie_breaks_to_lowest_index(self):
        records = [record(i, 1.0, 1.0, Aggregation.SUM) for i in range(3)]
        assert select(records, Aggregation.SUM) == 0
        assert select(records, Aggregation.MIN) == 0

    def test_mask_only_argmin(self):
        records = [record(i, e, None, Aggregation.MASK_ONLY) for i, e in enumerate([3.0, 1.0, 2.0])]
        assert select(records, Aggregation.MASK_ONLY) == 1

    def test_crop_only_argmin(self):
        records = [record(i, None, e, Aggregation.CROP_ONLY) for i, e in enumerate([0.2, 0.9])]
        assert select(records, Aggregation.CROP_ONLY) == 0

    def test_empty_rejected(self):
        with pytest.raises(NoProposals):
            select([], Aggregation.SUM)

    def test_shift_invariance_of_sum_argmin(self, rng):
        for _ in range(50):
            e_mask = rng.random(6)
            e_crop = rng.random(6)
            records = [record(i, m, c, Aggregation.SUM) for i, (m, c) in enumerate(zip(e_mask, e_crop))]
            shifted = [record(i, m + 5.25, c, Aggregation.SUM) for i, (m, c) in enumerate(zip(e_mask, e_crop))]
            assert select(records, Aggregation.SUM) == select(shifted, Aggregation.SUM)

    def test_positive_scaling_invariance_all_modes(self, rng):
        for _ in range(50):
            e_mask = rng.random(5)
            e_crop = rng.random(5)
            for mode in Aggregation:
                records = [record(i, m, c, mode) for i, (m, c) in enumerate(zip(e_mask, e_crop))]
                scaled = [record(i, 7.5 * m, 7.5 * c, mode) for i, (m, c) in enumerate(zip(e_mask, e_crop))]
                assert select(records, mode) == select(scaled, mode)

    def test_sum_and_min_agree_when_per_view_argmins_coincide(self, rng):
        found = 0
        while found < 25:
            e_mask = rng.random(5)
            e_crop = rng.random(5)
            if int(np.argmin(e_mask)) != int(np.argmin(e_crop)):
                continue
            found += 1
            records = [record(i, m, c, Aggregation.SUM) for i, (m, c) in enumerate(zip(e_mask, e_crop))]
            winner = int(np.argmin(e_mask))
            assert select(records, Aggregation.SUM) == winner
            assert select(records, Aggregation.MIN) == winner
            assert select(records, Aggregation.MASK_ONLY) == winner
            assert select(records, Aggregation.CROP_ONLY) == winner
