"""Evaluation harness tests: slicing, equivariance rotation, corruption,
ablation comparison.  Expected errors come from independent per-sample math."""

import math

import numpy as np
import pytest

from latentgaze.data import EyeLandmarks, Sample
from latentgaze.evaluation import (
    EvalReport,
    EvaluationError,
    SequencePredictor,
    SliceResult,
    ablation_report,
    blur,
    corrupt_sample,
    corruption_eval,
    darken,
    equivariance_sweep,
    evaluate,
    rotate_image,
    rotate_points,
    rotate_samples,
    select_low_illumination,
)
from latentgaze.geometry import rotate2d


def _make_samples(labels, size=32, with_landmarks=True):
    rng = np.random.default_rng(0)
    samples = []
    for i, (pitch, yaw) in enumerate(labels):
        face = rng.uniform(0.2, 0.8, (3, size, size)).astype(np.float32)
        lm = None
        if with_landmarks:
            lm = EyeLandmarks(
                (size * 0.25, size * 0.45), (size * 0.4, size * 0.45),
                (size * 0.6, size * 0.45), (size * 0.75, size * 0.45),
            )
        samples.append(
            Sample(
                face=face,
                left_patch=rng.uniform(0, 1, (3, 36, 60)).astype(np.float32),
                right_patch=rng.uniform(0, 1, (3, 36, 60)).astype(np.float32),
                label=np.array([pitch, yaw]),
                subject_id=f"s{i % 2}",
                landmarks=lm,
                illumination=float(face.mean()),
            )
        )
    return samples


def _oracle_error_deg(label, pred):
    # Independent scalar arithmetic: convert both to 3D and measure the arc.
    def vec(p, y):
        return (
            math.cos(p) * math.sin(y),
            math.sin(p),
            math.cos(p) * math.cos(y),
        )

    a, b = vec(*label), vec(*pred)
    dot = max(-1.0, min(1.0, sum(x * y for x, y in zip(a, b))))
    return math.degrees(math.acos(dot))


class TestEvaluate:
    def test_perfect_predictor_zero_everywhere(self):
        labels = [(0.1, 0.2), (-0.3, 1.0), (0.0, -2.5)]
        samples = _make_samples(labels)
        report = evaluate(SequencePredictor(labels), samples)
        assert report.mean_error == pytest.approx(0.0, abs=1e-6)
        for s in report.slices:
            if s.count:
                assert s.mean_error == pytest.approx(0.0, abs=1e-6)

    def test_constant_predictor_matches_brute_force(self):
        labels = [(0.2, 0.4), (-0.2, -0.4), (0.1, 1.2), (-0.1, -1.2)]
        samples = _make_samples(labels)
        constant = [(0.0, 0.0)] * len(labels)
        report = evaluate(SequencePredictor(constant), samples)
        expected = np.mean([_oracle_error_deg(l, (0.0, 0.0)) for l in labels])
        assert report.mean_error == pytest.approx(expected, abs=1e-9)
        np.testing.assert_allclose(
            report.per_sample,
            [_oracle_error_deg(l, (0.0, 0.0)) for l in labels],
            atol=1e-9,
        )

    def test_slice_nesting(self):
        # yaw magnitudes: 10deg, 60deg, 170deg
        labels = [(0.0, math.radians(10)), (0.0, math.radians(60)), (0.0, math.radians(170))]
        samples = _make_samples(labels)
        report = evaluate(SequencePredictor(labels), samples)
        counts = {s.limit_deg: s.count for s in report.slices}
        assert counts == {180.0: 3, 90.0: 2, 20.0: 1}

    def test_empty_slice_undefined_not_zero(self):
        labels = [(0.0, math.radians(60))]
        samples = _make_samples(labels)
        report = evaluate(SequencePredictor(labels), samples)
        narrow = [s for s in report.slices if s.limit_deg == 20.0][0]
        assert narrow.count == 0
        assert narrow.mean_error is None

    def test_mean_equals_per_sample_mean(self):
        labels = [(0.1, 0.3), (0.2, -0.7), (-0.15, 0.9)]
        samples = _make_samples(labels)
        preds = [(0.0, 0.1), (0.3, -0.5), (-0.2, 1.0)]
        report = evaluate(SequencePredictor(preds), samples)
        assert report.mean_error == pytest.approx(np.mean(report.per_sample), abs=1e-12)

    def test_empty_sample_list_rejected(self):
        with pytest.raises(EvaluationError):
            evaluate(SequencePredictor([]), [])


class TestRotationHelpers:
    def test_point_tracks_image_rotation(self):
        img = np.zeros((3, 31, 31), dtype=np.float32)
        img[:, 5, 15] = 1.0  # above center
        theta = math.pi / 2
        rotated = rotate_image(img, theta)
        seen = np.unravel_index(np.argmax(rotated.sum(axis=0)), (31, 31))
        predicted = rotate_points(np.array([[15.0, 5.0]]), theta, (31, 31))[0]
        assert (round(predicted[1]), round(predicted[0])) == seen

    def test_zero_rotation_identity_object(self):
        samples = _make_samples([(0.1, 0.2)])
        rotated, excluded = rotate_samples(samples, 0.0)
        assert excluded == 0
        assert rotated[0] is samples[0]

    def test_rotation_rotates_label(self):
        samples = _make_samples([(0.1, 0.2)])
        theta = math.radians(15)
        rotated, _ = rotate_samples(samples, theta)
        np.testing.assert_allclose(
            rotated[0].label, rotate2d(samples[0].label, theta), atol=1e-12
        )

    def test_corner_exclusion(self):
        # A landmark near the image corner leaves the frame under rotation.
        samples = _make_samples([(0.0, 0.0)], size=32)
        samples[0] = Sample(
            face=samples[0].face,
            left_patch=samples[0].left_patch,
            right_patch=samples[0].right_patch,
            label=samples[0].label,
            subject_id="s0",
            landmarks=EyeLandmarks((2.0, 2.0), (8.0, 4.0), (20.0, 16.0), (26.0, 16.0)),
            illumination=0.5,
        )
        rotated, excluded = rotate_samples(samples, math.radians(30))
        assert excluded == 1
        assert rotated == []


class TestEquivarianceSweep:
    def test_theta_zero_equals_plain_evaluate(self):
        labels = [(0.1, 0.4), (-0.2, -0.6)]
        samples = _make_samples(labels)
        preds = [(0.05, 0.3), (-0.1, -0.5)]
        plain = evaluate(SequencePredictor(preds), samples)
        curve = equivariance_sweep(SequencePredictor(preds), samples, thetas=[0.0])
        assert curve.points[0].mean_error == plain.mean_error
        assert curve.points[0].count == plain.count

    def test_label_rotating_oracle_scores_zero(self):
        labels = [(0.1, 0.2), (-0.15, 0.5), (0.2, -0.3)]
        samples = _make_samples(labels, size=48)
        thetas = [math.radians(d) for d in (0, 5, 10, 15, 20, 25, 30)]
        # The sweep evaluates thetas in ascending order over samples in order,
        # so the oracle can replay the rotated labels sequentially.
        cached = np.concatenate(
            [rotate2d(np.array(labels), t) for t in sorted(thetas)], axis=0
        )
        curve = equivariance_sweep(SequencePredictor(cached), samples, thetas=thetas)
        assert len(curve.points) == 7
        for point in curve.points:
            assert point.excluded == 0
            assert point.mean_error == pytest.approx(0.0, abs=1e-6)

    def test_rotation_isometry_on_cached_predictions(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=(50, 2))
        y_hat = rng.normal(size=(50, 2))
        for theta in (0.1, 0.5, 1.2):
            d0 = np.linalg.norm(y - y_hat, axis=-1)
            d1 = np.linalg.norm(rotate2d(y, theta) - rotate2d(y_hat, theta), axis=-1)
            np.testing.assert_allclose(d0, d1, atol=1e-9)


class TestCorruption:
    def test_darken_identity_at_one(self):
        labels = [(0.1, 0.2), (-0.2, 0.3)]
        samples = _make_samples(labels)
        preds = [(0.0, 0.0), (0.0, 0.0)]
        plain = evaluate(SequencePredictor(preds), samples)
        out = corruption_eval(SequencePredictor(preds + preds), samples, "darken", 1.0)
        assert out["clean"]["mean_error"] == plain.mean_error
        assert out["corrupted"]["mean_error"] == plain.mean_error

    def test_report_contains_both_sides(self):
        labels = [(0.1, 0.2)]
        samples = _make_samples(labels)
        out = corruption_eval(SequencePredictor([(0, 0), (0, 0)]), samples, "darken", 0.5)
        assert "clean" in out and "corrupted" in out
        assert out["amount"] == 0.5

    def test_darken_scales_pixels(self):
        samples = _make_samples([(0.0, 0.0)])
        out = corrupt_sample(samples[0], "darken", 0.5)
        np.testing.assert_allclose(out.face, samples[0].face * 0.5, atol=1e-6)
        assert out.illumination < samples[0].illumination

    def test_blur_zero_is_identity(self):
        samples = _make_samples([(0.0, 0.0)])
        out = corrupt_sample(samples[0], "blur", 0.0)
        np.testing.assert_array_equal(out.face, samples[0].face)

    def test_unknown_corruption_rejected(self):
        samples = _make_samples([(0.0, 0.0)])
        with pytest.raises(EvaluationError):
            corrupt_sample(samples[0], "sharpen", 1.0)

    def test_planted_dark_subset_selected_exactly(self):
        labels = [(0.1, 0.2)] * 6
        samples = _make_samples(labels)
        planted = {1, 4}
        for i in planted:
            samples[i] = corrupt_sample(samples[i], "darken", 0.05)
        picked = select_low_illumination(samples, threshold=0.1)
        assert set(picked) == planted

    def test_subset_evaluation(self):
        labels = [(0.1, 0.2)] * 4
        samples = _make_samples(labels)
        for i in (0, 2):
            samples[i] = corrupt_sample(samples[i], "darken", 0.05)
        out = corruption_eval(
            SequencePredictor([(0, 0)] * 4), samples, "blur", 1.0, illum_threshold=0.1
        )
        assert out["selected_count"] == 2


def _report(errors_by_slice):
    slices = [
        SliceResult(limit_deg=d, count=10, mean_error=e) for d, e in errors_by_slice.items()
    ]
    return EvalReport(
        mean_error=float(np.mean(list(errors_by_slice.values()))),
        count=10,
        slices=slices,
        per_sample=[],
    )


class TestAblationReport:
    def test_identical_variant_zero_increase(self):
        ref = _report({180.0: 10.0, 90.0: 9.0})
        out = ablation_report({"ref": ref, "same": _report({180.0: 10.0, 90.0: 9.0})}, "ref")
        assert out["variants"]["same"]["mean_pct_increase"] == pytest.approx(0.0)

    def test_ten_percent_single_slice(self):
        out = ablation_report(
            {"ref": _report({180.0: 10.0}), "worse": _report({180.0: 11.0})}, "ref"
        )
        assert out["variants"]["worse"]["mean_pct_increase"] == pytest.approx(10.0)

    def test_three_slice_hand_table(self):
        # Hand spreadsheet: increases 10%, 20%, -5% -> mean 25/3 %
        ref = _report({180.0: 10.0, 90.0: 5.0, 20.0: 4.0})
        var = _report({180.0: 11.0, 90.0: 6.0, 20.0: 3.8})
        out = ablation_report({"ref": ref, "v": var}, "ref")
        assert out["variants"]["v"]["mean_pct_increase"] == pytest.approx((10 + 20 - 5) / 3)

    def test_mismatched_slices_rejected(self):
        ref = _report({180.0: 10.0, 90.0: 5.0})
        var = _report({180.0: 10.0})
        with pytest.raises(EvaluationError):
            ablation_report({"ref": ref, "v": var}, "ref")

    def test_missing_reference_rejected(self):
        with pytest.raises(EvaluationError):
            ablation_report({"v": _report({180.0: 1.0})}, "ref")


class TestReportSerialization:
    def test_json_round_trip_stable(self):
        labels = [(0.1, 0.2), (0.0, -0.4)]
        samples = _make_samples(labels)
        r1 = evaluate(SequencePredictor(labels), samples, config_hash="abc123")
        r2 = evaluate(SequencePredictor(labels), samples, config_hash="abc123")
        assert r1.to_json() == r2.to_json()
        assert "abc123" in r1.to_json()

    def test_table_renders(self):
        labels = [(0.1, 0.2)]
        samples = _make_samples(labels)
        table = evaluate(SequencePredictor(labels), samples).render_table()
        assert "mean angular error" in table
