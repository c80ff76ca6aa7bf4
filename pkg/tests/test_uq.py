import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from pulseflow import uq
from pulseflow.errors import ArgumentError, DegenerateCorrelationError, NumericError

LOG_2PI_HALF = 0.5 * math.log(2 * math.pi)


def crps_quad(y, mu, sigma):
    """Definitional integral of (F(x) - 1{x >= y})^2, split at the jump."""
    F = lambda x: stats.norm.cdf(x, mu, sigma)  # noqa: E731
    lo, _ = integrate.quad(lambda x: F(x) ** 2, -np.inf, y, epsabs=1e-12, epsrel=1e-12, limit=200)
    hi, _ = integrate.quad(lambda x: (1 - F(x)) ** 2, y, np.inf, epsabs=1e-12, epsrel=1e-12, limit=200)
    return lo + hi


class TestPulseMetrics:
    def test_identity(self):
        m = uq.pulse_metrics([60, 70, 80], [60, 70, 80])
        assert (m["mae"], m["rmse"], m["pcc"]) == (0.0, 0.0, pytest.approx(1.0, abs=1e-15))

    def test_offset(self):
        m = uq.pulse_metrics([62, 72, 82], [60, 70, 80])
        assert m["mae"] == pytest.approx(2.0) and m["rmse"] == pytest.approx(2.0)
        assert m["pcc"] == pytest.approx(1.0, abs=1e-15)

    def test_two_point(self):
        m = uq.pulse_metrics([70, 80], [72, 76])
        assert m["mae"] == 3.0 and m["rmse"] == pytest.approx(math.sqrt(10), abs=1e-12)

    def test_constant_input(self):
        m = uq.pulse_metrics([70, 70, 70], [60, 65, 80])
        assert m["pcc_degenerate"] and math.isnan(m["pcc"]) and m["mae"] == pytest.approx(25 / 3)
        with pytest.raises(DegenerateCorrelationError) as exc:
            uq.pulse_metrics([70, 70, 70], [60, 65, 80], strict=True)
        assert exc.value.metrics["mae"] == pytest.approx(25 / 3)

    def test_pcc_vs_numpy(self, rng):
        a, b = rng.standard_normal((2, 50))
        assert uq.pulse_metrics(a, b)["pcc"] == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)

    def test_lengths(self):
        with pytest.raises(ArgumentError):
            uq.pulse_metrics([], [])
        with pytest.raises(ArgumentError):
            uq.pulse_metrics([1, 2], [1])


class TestNll:
    def test_at_mean(self):
        assert uq.gaussian_nll(np.zeros(5), np.zeros(5), np.ones(5)) == pytest.approx(0.91894, abs=1e-5)
        assert uq.gaussian_nll(0.0, 0.0, 1.0) == pytest.approx(LOG_2PI_HALF, abs=1e-15)

    def test_one_sigma_off(self):
        assert uq.gaussian_nll(1.0, 0.0, 1.0) == pytest.approx(1.41894, abs=1e-5)

    def test_vs_density(self, rng):
        y, mu = rng.standard_normal((2, 100))
        s = rng.uniform(0.1, 3, 100)
        assert uq.gaussian_nll(y, mu, s) == pytest.approx(-np.mean(stats.norm.logpdf(y, mu, s)), abs=1e-12)

    def test_can_be_negative(self):
        assert uq.gaussian_nll(0.0, 0.0, 0.01) < 0

    def test_non_finite(self):
        with pytest.raises(NumericError):
            uq.gaussian_nll([np.nan], [0.0], [1.0])

    def test_floor(self):
        assert np.isfinite(uq.gaussian_nll(1.0, 1.0, 0.0))


class TestCrps:
    def test_standard_value(self):
        assert uq.crps_gaussian(0.0, 0.0, 1.0) == pytest.approx((math.sqrt(2) - 1) / math.sqrt(math.pi), abs=1e-12)
        # the closed form is 0.233695; the integral oracle agrees
        assert uq.crps_gaussian(0.0, 0.0, 1.0) == pytest.approx(crps_quad(0.0, 0.0, 1.0), abs=1e-9)

    def test_point_mass(self):
        assert uq.crps_gaussian(2.0, 2.0, 1e-9) < 1e-6

    def test_homogeneous(self):
        base = uq.crps_gaussian(0.7, 0.0, 1.0)
        assert uq.crps_gaussian(3 * 0.7, 0.0, 3.0) == pytest.approx(3 * base, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(y=st.floats(-5, 5), mu=st.floats(-5, 5), sigma=st.floats(0.05, 4))
    def test_matches_integral(self, y, mu, sigma):
        got = uq.crps_gaussian(y, mu, sigma)
        assert got >= 0
        assert got == pytest.approx(crps_quad(y, mu, sigma), abs=1e-6)


class TestSharpness:
    def test_examples(self):
        assert uq.sharpness(np.ones(4)) == 1.0
        assert uq.sharpness(np.zeros(4)) == 0.0
        assert uq.sharpness([1.0, 2.0]) == 2.5


class TestCheckScore:
    def test_examples(self):
        assert uq.check_score(3.0, [[1.0]], [0.5]) == 1.0
        y = np.array([1.0, 2.0])
        assert uq.check_score(y, np.stack([y, y]), [0.1, 0.9]) == 0.0

    def test_vs_loop(self, rng):
        taus = [0.1, 0.5, 0.8]
        y = rng.standard_normal(20)
        q = rng.standard_normal((3, 20))
        total = 0.0
        for i, tau in enumerate(taus):
            for j in range(20):
                d = y[j] - q[i, j]
                total += d * tau if d >= 0 else -d * (1 - tau)
        assert uq.check_score(y, q, taus) == pytest.approx(total / 60, abs=1e-12)

    @pytest.mark.parametrize("taus", [[0.0], [1.0], [1.2], []])
    def test_bad_taus(self, taus):
        with pytest.raises(ArgumentError):
            uq.check_score(1.0, np.zeros((len(taus), 1)), taus)

    def test_quantiles_match_scipy(self, rng):
        mu, s = rng.standard_normal(5), rng.uniform(0.5, 2, 5)
        q = uq.gaussian_quantiles(mu, s, [0.05, 0.5, 0.95])
        np.testing.assert_allclose(q, stats.norm.ppf([[0.05], [0.5], [0.95]], mu, s), atol=1e-12)


class TestIntervalScore:
    def test_covered(self):
        assert uq.interval_score(1.0, 0.0, 2.0, 0.05) == 2.0
        assert uq.interval_score(0.0, 0.0, 2.0, 0.05) == 2.0

    def test_above(self):
        assert uq.interval_score(3.0, 0.0, 2.0, 0.05) == pytest.approx(2.0 + 40.0)

    def test_vs_loop(self, rng):
        y, lo = rng.standard_normal((2, 30))
        hi = lo + rng.uniform(0, 2, 30)
        ref = np.mean([(u - l) + 40 * max(l - v, 0) + 40 * max(v - u, 0) for v, l, u in zip(y, lo, hi)])
        got = uq.interval_score(y, lo, hi, 0.05)
        assert got == pytest.approx(ref, abs=1e-12)
        assert got >= np.mean(hi - lo)

    def test_errors(self):
        with pytest.raises(ArgumentError):
            uq.interval_score(0.0, 1.0, 0.0, 0.05)
        with pytest.raises(ArgumentError):
            uq.interval_score(0.0, 0.0, 1.0, 1.5)


class TestCalibration:
    N = 100_000

    def _data(self):
        rng = np.random.default_rng(99)
        mu = rng.standard_normal(self.N)
        s = rng.uniform(0.5, 2.0, self.N)
        return mu + s * rng.standard_normal(self.N), mu, s

    def test_self_consistent(self):
        y, mu, s = self._data()
        cc = uq.calibration_curve(y, mu, s)
        assert cc.miscalibration_area < 0.02
        assert np.all(np.diff(cc.levels) > 0)

    def test_inflated_sigma(self):
        y, mu, s = self._data()
        cc = uq.calibration_curve(y, mu, 10 * s)
        assert np.all(cc.observed >= cc.levels)
        # the 5% interval of a 10x sigma still spans +-0.63 true sigma, so ~1 only from p = 0.5
        assert np.all(cc.observed[cc.levels >= 0.5] > 0.99)

    def test_deflated_sigma(self):
        y, mu, s = self._data()
        cc = uq.calibration_curve(y, mu, s / 10)
        assert np.all(cc.observed <= cc.levels)
        assert cc.observed.max() < 0.2

    def test_default_levels(self):
        assert uq.DEFAULT_LEVELS[0] == 0.05 and uq.DEFAULT_LEVELS[-1] == 0.95 and len(uq.DEFAULT_LEVELS) == 19

    def test_empty(self):
        with pytest.raises(ArgumentError):
            uq.calibration_curve([], [], [])


class TestSpectrum:
    def test_identical(self, rng):
        p = rng.uniform(0, 1, 40)
        m = uq.spectrum_metrics(p, p)
        assert m["mae"] == 0 and m["r2"] == 1 and m["pcc"] == pytest.approx(1.0, abs=1e-15)

    def test_zero_prediction(self, rng):
        assert uq.spectrum_metrics(np.zeros(40), rng.uniform(0, 1, 40))["r2"] <= 0

    def test_vs_formulas(self, rng):
        p, g = rng.uniform(0, 1, (2, 40))
        pn, gn = p / p.max(), g / g.max()
        m = uq.spectrum_metrics(p, g)
        assert m["mae"] == pytest.approx(np.mean(np.abs(pn - gn)), abs=1e-12)
        assert m["rmse"] == pytest.approx(np.sqrt(np.mean((pn - gn) ** 2)), abs=1e-12)
        assert m["r2"] == pytest.approx(1 - np.sum((pn - gn) ** 2) / np.sum((gn - gn.mean()) ** 2), abs=1e-12)
        assert m["pcc"] == pytest.approx(stats.pearsonr(pn, gn)[0], abs=1e-12)
        assert m["normalized"] is True

    def test_grid_mismatch(self):
        with pytest.raises(ArgumentError):
            uq.spectrum_metrics(np.ones(3), np.ones(4))


class TestBlandAltman:
    def test_examples(self):
        assert uq.bland_altman([1, 2], [1, 2]) == {"mean_diff": 0, "sd_diff": 0, "loa_lo": 0, "loa_hi": 0}
        r = uq.bland_altman([2, 3], [1, 2])
        assert (r["mean_diff"], r["sd_diff"], r["loa_lo"], r["loa_hi"]) == (1, 0, 1, 1)
        r = uq.bland_altman([0, 2], [1, 1])
        assert r["mean_diff"] == 0 and r["sd_diff"] == pytest.approx(math.sqrt(2))
        assert r["loa_hi"] == pytest.approx(1.96 * math.sqrt(2))

    def test_length(self):
        with pytest.raises(ArgumentError):
            uq.bland_altman([1], [1])

    def test_csv(self, tmp_path):
        uq.write_bland_altman_csv(tmp_path / "ba.csv", [70, 80], [72, 76])
        rows = list(csv.reader(open(tmp_path / "ba.csv")))
        assert rows == [["mean_bpm", "diff_bpm"], ["71.0", "-2.0"], ["78.0", "4.0"]]


class TestReport:
    def test_fields_and_bounds(self, rng):
        ens = rng.uniform(0, 1, (20, 3, 30))
        rep = uq.uncertainty_report(ens, rng.uniform(0, 1, (3, 30)))
        assert np.all(rep.std >= 0) and set(rep.scalars()) == {
            "nll", "crps", "sharpness", "check_score", "interval_score", "miscalibration_area"}
        assert np.all((rep.calibration.observed >= 0) & (rep.calibration.observed <= 1))
        d = json.loads(uq.report_json(rep.to_dict()))
        assert d["degenerate"] is False

    def test_collapsed_ensemble(self):
        rep = uq.uncertainty_report(np.ones((5, 10)), np.ones(10))
        assert rep.degenerate and all(np.isfinite(v) for v in rep.scalars().values())

    def test_calibration_csv(self, tmp_path, rng):
        cc = uq.calibration_curve(rng.standard_normal(50), 0.0, 1.0, [0.5, 0.9])
        uq.write_calibration_csv(tmp_path / "c.csv", cc)
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["level", "observed"] and [r[0] for r in rows[1:]] == ["0.5", "0.9"]

    def test_summed_spectrum_normalized(self, rng):
        freqs, power = uq.summed_spectrum(rng.standard_normal((4, 250, 3)), 25.0)
        assert power.shape == (4, freqs.size) and freqs.max() <= 200
        np.testing.assert_allclose(power.max(axis=1), 1.0)
