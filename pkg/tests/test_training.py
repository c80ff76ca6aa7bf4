import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pulseflow import training
from pulseflow.errors import ArgumentError, ConfigError, DegenerateCorrelationError, TrainingDivergence
from pulseflow.synth import SynthConfig, make_dataset
from pulseflow.training import (PairBatch, TrainConfig, Track, loss_terms, overlap_fraction, rcl_batch,
                                rcl_loss, sample_shifted_pair, total_loss, train, window_pair)
from pulseflow.vectorfield import tape as ad
from pulseflow.vectorfield.network import init_params

TINY = dict(hidden=8, blocks=1, time_dim=8, batch_size=4, window_length=50, stride=25, val_every=2)


def pearson_oracle(p, q):
    p, q = np.ravel(p), np.ravel(q)
    n = p.size
    num = n * np.sum(p * q) - np.sum(p) * np.sum(q)
    den = np.sqrt(n * np.sum(p * p) - np.sum(p) ** 2) * np.sqrt(n * np.sum(q * q) - np.sum(q) ** 2)
    return num / den


class TestRcl:
    def test_examples(self, rng):
        p = rng.standard_normal(20)
        assert rcl_loss(p, p) == pytest.approx(0.0, abs=1e-15)
        assert rcl_loss(p, -p) == pytest.approx(2.0, abs=1e-15)
        assert rcl_loss([1, 2, 3], [2, 4, 6]) == pytest.approx(0.0, abs=1e-15)
        assert rcl_loss([1, 2, 3], [3, 2, 1]) == pytest.approx(2.0, abs=1e-15)

    def test_matches_sum_form_pearson(self, rng):
        p, q = rng.standard_normal((2, 7, 3))
        assert rcl_loss(p, q) == pytest.approx(1 - pearson_oracle(p, q), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(a=st.floats(0.01, 100), b=st.floats(-100, 100), seed=st.integers(0, 2**32 - 1))
    def test_affine_invariance(self, a, b, seed):
        p, q = np.random.default_rng(seed).standard_normal((2, 30))
        base = rcl_loss(p, q)
        assert rcl_loss(a * p + b, q) == pytest.approx(base, abs=1e-12)
        assert rcl_loss(-p, q) == pytest.approx(2 - base, abs=1e-12)
        assert 0 <= base <= 2

    @pytest.mark.parametrize("phi", [0.0, 0.4, 1.3, np.pi / 2, 2.5, np.pi])
    def test_one_minus_cosine(self, phi, rng):
        u, w = np.linalg.qr(rng.standard_normal((40, 2)) - 0)[0].T
        u, w = u - u.mean(), w - w.mean()
        w = w - (w @ u) / (u @ u) * u
        u, w = u / np.linalg.norm(u), w / np.linalg.norm(w)
        q = np.cos(phi) * u + np.sin(phi) * w
        assert rcl_loss(u, q) == pytest.approx(1 - np.cos(phi), abs=1e-12)

    def test_both_constant_raises(self):
        with pytest.raises(DegenerateCorrelationError):
            rcl_loss(np.ones(4), np.full(4, 2.0))

    def test_one_constant_is_uncorrelated(self, rng):
        assert rcl_loss(np.ones(5), rng.standard_normal(5)) == 1.0

    def test_length_checks(self):
        with pytest.raises(ArgumentError):
            rcl_loss([1.0], [2.0])
        with pytest.raises(ArgumentError):
            rcl_loss([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_batch_matches_scalar_route(self, rng):
        p, q = rng.standard_normal((2, 5, 12))
        q[3] = 4.0  # one constant row
        tape = ad.Tape()
        got = rcl_batch(tape.constant(p), tape.constant(q)).value
        expect = np.mean([rcl_loss(p[i], q[i]) for i in range(5)])
        assert float(got) == pytest.approx(expect, abs=1e-13)

    def test_batch_zero_rows(self):
        tape = ad.Tape()
        z = np.zeros((2, 6))
        assert float(rcl_batch(tape.constant(z), tape.constant(z)).value) == 0.0

    def test_batch_gradient(self, rng):
        params = {"p": rng.standard_normal((3, 10)), "q": rng.standard_normal((3, 10))}
        assert ad.grad_check(lambda t, v: rcl_batch(v["p"], v["q"]), params) < 1e-6


def _track(rng, n=400, r=2):
    return Track("s", rng.standard_normal((n, r)), rng.standard_normal((n, r)), 25.0)


class TestShiftedPair:
    def test_zero_shift_identical(self, rng):
        tr = _track(rng)
        a, b, _ = sample_shifted_pair(tr, 100, 0, 50, rng)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_shift_starts_delta_earlier(self, rng):
        tr = _track(rng)
        a, b, origin = sample_shifted_pair(tr, 120, 30, 50, rng)
        assert origin == 120
        for u, v in zip(b, window_pair(tr, 90, 50)):
            np.testing.assert_array_equal(u, v)

    def test_overlap_fractions(self):
        assert overlap_fraction(250, 250) == 0.0
        assert overlap_fraction(25, 250) == pytest.approx(0.9)
        assert overlap_fraction(0, 250) == 1.0

    def test_insufficient_history_resampled(self, rng):
        tr = _track(rng)
        _, _, origin = sample_shifted_pair(tr, 10, 100, 50, rng)
        assert 100 <= origin <= 350

    def test_track_too_short(self, rng):
        with pytest.raises(ArgumentError):
            sample_shifted_pair(_track(rng, n=60), 0, 20, 50, rng)


def _predictions(tape, v, n):
    return tape.constant(v), tape.constant(n)


class TestLoss:
    def test_lambda_zero_is_sum_of_mses(self, rng):
        v, n, tgt, z = rng.standard_normal((4, 6, 20, 2))
        tape = ad.Tape()
        total, terms = loss_terms(tape.constant(v), tape.constant(n), tgt, z, 0.0)
        assert float(total.value) == terms["flow_loss"] + terms["score_loss"]
        assert terms["flow_loss"] == np.mean((v - tgt) ** 2)
        assert terms["score_loss"] == np.mean((n - z) ** 2)

    def test_perfect_predictor(self, rng):
        tgt, z = rng.standard_normal((2, 4, 20, 2))
        tape = ad.Tape()
        total, terms = loss_terms(tape.constant(tgt), tape.constant(z), tgt, z, 0.1)
        assert terms["flow_loss"] == 0 and terms["score_loss"] == 0 and terms["rcl_loss"] == 0
        assert float(total.value) == 0.0

    def test_anti_aligned_contribution(self, rng):
        base = rng.standard_normal((1, 20, 2))
        tgt = np.zeros((2, 20, 2))
        v = np.concatenate([base, -base])  # residuals r and -r
        z = np.zeros_like(tgt)
        tape = ad.Tape()
        total, terms = loss_terms(tape.constant(v), tape.constant(z), tgt, z, 0.1)
        assert terms["rcl_loss"] == pytest.approx(2.0, abs=1e-14)
        assert float(total.value) - terms["flow_loss"] == pytest.approx(0.2, abs=1e-14)

    def test_flow_mode_uses_predictions(self, rng):
        v, tgt = rng.standard_normal((2, 4, 10, 1))
        tape = ad.Tape()
        _, res = loss_terms(tape.constant(v), tape.constant(v), tgt, v, 1.0, "residual")
        _, flow = loss_terms(tape.constant(v), tape.constant(v), tgt, v, 1.0, "flow")
        flat = v.reshape(2, 2, -1)
        expect = np.mean([rcl_loss(flat[0, i], flat[1, i]) for i in range(2)])
        assert flow["rcl_loss"] == pytest.approx(expect, abs=1e-13)
        assert res["rcl_loss"] != flow["rcl_loss"]

    def test_couples_share_t_and_z(self, rng, monkeypatch):
        seen = {}
        real = training.loss_terms

        def spy(v_pred, n_pred, target, z, lam, mode="residual"):
            seen["z"] = z
            return real(v_pred, n_pred, target, z, lam, mode)

        monkeypatch.setattr(training, "loss_terms", spy)
        cfg = TrainConfig(**TINY)
        arch = cfg.architecture(2)
        batch = PairBatch(*rng.standard_normal((4, 3, 50, 2)))
        total_loss(batch, init_params(arch, rng), init_params(arch, rng), cfg, rng, arch)
        np.testing.assert_array_equal(seen["z"][:3], seen["z"][3:])

    def test_non_finite_loss_named(self, rng):
        cfg = TrainConfig(**TINY)
        arch = cfg.architecture(2)
        batch = PairBatch(*rng.standard_normal((4, 2, 50, 2)))
        params = init_params(arch, rng)
        bad = dict(params)
        bad["out.b"] = np.array([np.inf, 0.0])
        with pytest.raises(Exception, match="non-finite"):
            total_loss(batch, bad, params, cfg, rng, arch)


@pytest.fixture(scope="module")
def tiny_dataset():
    return make_dataset(SynthConfig(seed=21, region_gains=(1.0, 0.7)), 3, 16.0, 25.0)


class TestTrain:
    def test_deterministic_curves(self, tiny_dataset):
        cfg = TrainConfig(max_steps=6, delta_shift=1.0, **TINY)
        a, b = train(tiny_dataset, cfg), train(tiny_dataset, cfg)
        assert a.curves == b.curves
        for k in a.params_v:
            assert a.params_v[k].tobytes() == b.params_v[k].tobytes()

    def test_overfits_fixed_batch(self, rng):
        cfg = TrainConfig(lr=3e-3, **TINY)
        arch = cfg.architecture(2)
        trainer = training.Trainer(arch, cfg, rng)
        ds = make_dataset(SynthConfig(seed=5, region_gains=(1.0, 0.8)), 1, 12.0, 25.0)
        tr = training.prepare_tracks(ds, cfg)
        batch = training.assemble_batch(tr, [(0, 60), (0, 100), (0, 150), (0, 200)], 25, 50, rng)
        fixed = np.random.default_rng(0)
        losses = [trainer.train_step(batch, np.random.default_rng(fixed.integers(2**32)))["total"]
                  for _ in range(200)]
        running = np.convolve(losses, np.ones(20) / 20, mode="valid")
        assert running[-1] < losses[0]
        assert running[-1] < running[0]

    def test_curves_csv(self, tiny_dataset, tmp_path):
        res = train(tiny_dataset, TrainConfig(max_steps=4, delta_shift=1.0, **TINY))
        training.write_curves(tmp_path / "c.csv", res.curves)
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["step", "flow_loss", "score_loss", "rcl_loss", "total", "val_total"]
        assert len(rows) == 5
        assert any(r[5] for r in rows[1:])

    def test_best_validation_retained(self, tiny_dataset):
        res = train(tiny_dataset, TrainConfig(max_steps=6, delta_shift=1.0, **TINY))
        vals = [(r["val_total"], r["step"]) for r in res.curves if r["val_total"] is not None]
        assert res.best_step == min(vals)[1]

    def test_resume_continues_step(self, tiny_dataset):
        cfg = TrainConfig(max_steps=3, delta_shift=1.0, **TINY)
        first = train(tiny_dataset, cfg)
        second = train(tiny_dataset, cfg, resume=first.checkpoint(best=False))
        assert [r["step"] for r in second.curves] == [4, 5, 6]

    def test_divergence_aborts(self, tiny_dataset, monkeypatch):
        monkeypatch.setattr(training, "DIVERGENCE_LIMIT", 0.0)
        with pytest.raises(TrainingDivergence) as exc:
            train(tiny_dataset, TrainConfig(max_steps=3, delta_shift=1.0, **TINY))
        assert exc.value.step == 1 and "total" in exc.value.terms

    def test_empty_dataset(self, tiny_dataset):
        empty = replace(tiny_dataset, subjects=[])
        with pytest.raises(ArgumentError):
            train(empty, TrainConfig(**TINY))

    def test_split_is_subject_level(self):
        tr, va = training.split_subjects(20, 0.1, 0)
        assert len(va) == 2 and not set(tr) & set(va) and len(tr) + len(va) == 20

    def test_ablation_grid_configurable(self):
        grid = [TrainConfig(lambda_rcl=lam, delta_shift=d)
                for lam in np.round(np.arange(0, 1.01, 0.1), 1) for d in range(1, 11)]
        assert len(grid) == 110


class TestConfig:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lambda_rcl, cfg.delta_shift, cfg.lr, cfg.batch_size) == (0.1, 9.0, 1e-3, 32)

    @pytest.mark.parametrize("kw", [{"lambda_rcl": -1}, {"lambda_rcl": float("nan")}, {"lr": 0},
                                    {"rcl_mode": "both"}, {"batch_size": 0}, {"val_fraction": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = TrainConfig(lambda_rcl=0.3, passband=(40, 160))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"momentum": 0.9})
