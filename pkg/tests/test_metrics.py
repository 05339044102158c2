import numpy as np
import pytest

from ffrpullback.curves import Grid, PullbackCurve
from ffrpullback.metrics import (
    PPGConfig,
    aupc,
    bland_altman,
    classify_focal,
    confusion_stats,
    evaluate_curves,
    histogram_overlap,
    ppg_index,
)

RNG = np.random.default_rng(20260814)


def curve(ffr, spacing=1.0):
    ffr = np.asarray(ffr, dtype=float)
    return PullbackCurve(Grid(spacing, len(ffr)), ffr)


def ramp_curve(total_mm, drop_start, drop_end, drop, spacing=1.0):
    """Flat at 1, linear drop over [drop_start, drop_end], flat after."""
    n = int(round(total_mm / spacing)) + 1
    x = np.arange(n) * spacing
    ffr = np.ones(n)
    inside = (x > drop_start) & (x <= drop_end)
    ffr[inside] = 1.0 - drop * (x[inside] - drop_start) / (drop_end - drop_start)
    ffr[x > drop_end] = 1.0 - drop
    return curve(ffr, spacing)


class TestAupc:
    def test_constant_one_over_100mm(self):
        c = curve(np.ones(201), spacing=0.5)
        assert aupc(c) == pytest.approx(11.0, abs=1e-12)

    def test_constant_half(self):
        c = curve(np.full(201, 0.5), spacing=0.5)
        assert aupc(c) == pytest.approx(5.5, abs=1e-12)

    def test_linearity(self):
        for _ in range(50):
            a = curve(RNG.uniform(0.4, 1.0, 101), spacing=1.0)
            b = curve(RNG.uniform(0.4, 1.0, 101), spacing=1.0)
            lam = float(RNG.uniform(0, 1))
            mix = curve(lam * a.ffr + (1 - lam) * b.ffr, spacing=1.0)
            assert aupc(mix) == pytest.approx(lam * aupc(a) + (1 - lam) * aupc(b), abs=1e-9)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            aupc(curve([1.0, 0.9], spacing=1.0))


class TestPpgIndex:
    def test_focal_hand_case(self):
        # whole 0.4 drop inside one 20 mm window, 20 mm diseased of 100 mm
        c = ramp_curve(100.0, 40.0, 60.0, 0.4)
        assert ppg_index(c) == pytest.approx(0.9, abs=1e-12)

    def test_uniform_diffuse_hand_case(self):
        # uniform 0.2 drop over the whole 100 mm: (0.2 + 0) / 2
        n = 101
        ffr = 1.0 - 0.2 * np.arange(n) / (n - 1)
        assert ppg_index(curve(ffr)) == pytest.approx(0.1, abs=1e-12)

    def test_flat_curve_undefined(self):
        assert ppg_index(curve(np.ones(80))) is None

    def test_in_unit_interval_for_monotone_curves(self):
        for _ in range(100):
            n = int(RNG.integers(30, 200))
            drops = RNG.uniform(0, 0.01, n)
            ffr = 1.0 - np.cumsum(drops)
            p = ppg_index(curve(ffr))
            if p is not None:
                assert 0.0 <= p <= 1.0

    def test_short_vessel_single_window(self):
        c = ramp_curve(15.0, 5.0, 10.0, 0.3)
        p = ppg_index(c)
        assert p is not None and 0.0 <= p <= 1.0

    def test_segment_grid_sensitivity_is_mild(self):
        # methodological probe: disease-length grid at 0.5 vs 1 mm
        for _ in range(30):
            c = ramp_curve(100.0, float(RNG.uniform(20, 40)), float(RNG.uniform(55, 80)), float(RNG.uniform(0.1, 0.4)))
            p1 = ppg_index(c, PPGConfig(segment_mm=1.0))
            p05 = ppg_index(c, PPGConfig(segment_mm=0.5))
            assert abs(p1 - p05) < 0.1


class TestClassify:
    def test_above_threshold_focal(self):
        assert classify_focal(0.64, 0.63) == "focal"

    def test_tie_goes_diffuse(self):
        assert classify_focal(0.63, 0.63) == "diffuse"

    def test_missing_propagates(self):
        assert classify_focal(None, 0.63) is None

    def test_monotone_rescaling_invariance(self):
        for _ in range(100):
            ppg = float(RNG.uniform(0, 1))
            thr = float(RNG.uniform(0, 1))
            scale, shift = float(RNG.uniform(0.1, 3)), float(RNG.uniform(-1, 1))
            assert classify_focal(ppg, thr) == classify_focal(scale * ppg + shift, scale * thr + shift)


class TestConfusion:
    def test_perfect(self):
        pairs = [("focal", "focal")] * 3 + [("diffuse", "diffuse")] * 5
        s = confusion_stats(pairs)
        assert (s["accuracy"], s["sensitivity"], s["specificity"]) == (1.0, 1.0, 1.0)

    def test_all_diffuse_prediction_on_balanced_set(self):
        pairs = [("diffuse", "focal")] * 10 + [("diffuse", "diffuse")] * 10
        s = confusion_stats(pairs)
        assert s["accuracy"] == 0.5
        assert s["sensitivity"] == 0.0
        assert s["specificity"] == 1.0

    def test_accuracy_decomposition(self):
        for _ in range(50):
            pairs = [
                (RNG.choice(["focal", "diffuse"]), RNG.choice(["focal", "diffuse"]))
                for _ in range(int(RNG.integers(4, 40)))
            ]
            s = confusion_stats(pairs)
            if s["sensitivity"] is None or s["specificity"] is None:
                continue
            expect = (s["sensitivity"] * s["n_positive"] + s["specificity"] * s["n_negative"]) / s["n"]
            assert s["accuracy"] == pytest.approx(expect, abs=1e-12)

    def test_single_class_reports_missing(self):
        s = confusion_stats([("focal", "focal")])
        assert s["specificity"] is None

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            confusion_stats([])


class TestBlandAltman:
    def test_identical_pairs(self):
        out = bland_altman([(0.5, 0.5), (0.7, 0.7)])
        assert out == {"bias": 0.0, "lower_limit": 0.0, "upper_limit": 0.0}

    def test_constant_offset(self):
        out = bland_altman([(0.6, 0.5), (0.8, 0.7), (0.3, 0.2)])
        assert out["bias"] == pytest.approx(0.1)
        assert out["upper_limit"] == pytest.approx(0.1)

    def test_mixed_offsets(self):
        out = bland_altman([(0.6, 0.5), (0.4, 0.5)])
        sd = np.std([0.1, -0.1], ddof=1)
        assert out["bias"] == pytest.approx(0.0, abs=1e-15)
        assert out["upper_limit"] == pytest.approx(1.96 * sd)

    def test_too_few(self):
        with pytest.raises(ValueError):
            bland_altman([(0.5, 0.5)])


class TestHistogramOverlap:
    def test_identical(self):
        vals = RNG.uniform(0.3, 1.0, 500)
        assert histogram_overlap(vals, vals) == pytest.approx(1.0)

    def test_disjoint(self):
        assert histogram_overlap(np.full(50, 0.1), np.full(50, 0.9)) == 0.0

    def test_half_overlap(self):
        pred = np.repeat(np.arange(10) * 0.05 + 0.025, 10)       # bins 0..9
        ref = np.repeat(np.arange(10) * 0.05 + 0.275, 10)        # bins 5..14
        assert histogram_overlap(pred, ref) == pytest.approx(0.5, abs=1e-12)


class TestEvaluateCurves:
    def _pairs(self, n=12):
        pairs = []
        for i in range(n):
            focal = i % 2 == 0
            if focal:
                ref = ramp_curve(100.0, 40.0, 52.0, 0.3)
            else:
                ref = ramp_curve(100.0, 20.0, 80.0, 0.25)
            noise = curve(np.clip(ref.ffr + RNG.normal(0, 0.005, ref.ffr.shape), 0, 1))
            pairs.append((f"a{i}", noise, ref))
        return pairs

    def test_report_structure_and_auto_threshold(self):
        report = evaluate_curves(self._pairs())
        agg = report["aggregates"]
        assert agg["n_arteries"] == 12
        assert agg["n_classified"] == 12
        assert 0 <= agg["accuracy"] <= 1
        assert agg["aupc_mad"] < 0.5
        ppgs = sorted(r["ppg_ref"] for r in report["per_artery"])
        assert agg["ppg_threshold"] == pytest.approx(np.median(ppgs))

    def test_external_threshold_respected(self):
        report = evaluate_curves(self._pairs(), threshold=0.99)
        assert all(r["class_ref"] == "diffuse" for r in report["per_artery"])

    def test_near_perfect_prediction_scores_high(self):
        report = evaluate_curves(self._pairs())
        assert report["aggregates"]["accuracy"] >= 0.9
        # hard 0.05 bins leak mass across edges even for tiny noise
        assert report["aggregates"]["ffr_histogram_overlap"] > 0.75
