"""Hutchinson trace oracle and loss-curve analytics."""

import math

import numpy as np
import pytest

from est.diagnostics import (
    HessianTraceEstimate,
    hutchinson_trace,
    model_grad_fn,
    slope_compare,
    transition_drop,
)
from est.data import load_corpus
from est.errors import NumericalError
from est.scheduler import make_scheduler
from est.train import LossLog

from helpers import make_corpus_text, seeded_model, tiny_model_config


def quadratic_grad(a_matrix):
    return lambda theta: a_matrix @ theta


class TestHutchinson:
    def test_diagonal_quadratic_trace(self):
        a = np.diag(np.arange(1.0, 11.0))
        est = hutchinson_trace(quadratic_grad(a), np.zeros(10), n_probes=256, seed=1)
        assert abs(est.value - 55.0) / 55.0 <= 0.05

    def test_identity_hessian_gives_dimension(self):
        n = 37
        est = hutchinson_trace(quadratic_grad(np.eye(n)), np.ones(n), n_probes=16, seed=2)
        assert est.value == pytest.approx(n, rel=1e-9)

    def test_single_probe_reports_zero_std_error(self):
        a = np.diag(np.arange(1.0, 5.0))
        est = hutchinson_trace(quadratic_grad(a), np.zeros(4), n_probes=1, seed=3)
        assert est.std_error == 0.0 and est.n_probes == 1

    def test_std_error_shrinks_with_probes(self):
        # needs off-diagonal mass: Rademacher probes have zero variance on
        # diagonal quadratics
        rng = np.random.default_rng(4)
        m = rng.normal(size=(12, 12))
        a = m @ m.T
        lo = hutchinson_trace(quadratic_grad(a), np.zeros(12), n_probes=64, seed=5)
        hi = hutchinson_trace(quadratic_grad(a), np.zeros(12), n_probes=256, seed=5)
        assert hi.std_error < lo.std_error
        assert abs(hi.value - np.trace(a)) <= 4 * hi.std_error

    def test_estimate_insensitive_to_epsilon_on_quadratics(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(8, 8))
        a = m @ m.T
        theta = rng.normal(size=8)
        e1 = hutchinson_trace(quadratic_grad(a), theta, n_probes=32, fd_epsilon=1e-3, seed=7)
        e2 = hutchinson_trace(quadratic_grad(a), theta, n_probes=32, fd_epsilon=1e-4, seed=7)
        assert e1.value == pytest.approx(e2.value, rel=1e-6)

    def test_non_finite_gradient_aborts(self):
        def bad(theta):
            return np.full_like(theta, np.nan)

        with pytest.raises(NumericalError):
            hutchinson_trace(bad, np.zeros(3), n_probes=1)

    def test_seed_reproducibility(self):
        a = np.diag(np.arange(1.0, 7.0))
        e1 = hutchinson_trace(quadratic_grad(a), np.zeros(6), n_probes=8, seed=9)
        e2 = hutchinson_trace(quadratic_grad(a), np.zeros(6), n_probes=8, seed=9)
        assert e1 == e2

    def test_model_grad_fn_smoke(self, tmp_path):
        (tmp_path / "c.txt").write_text(make_corpus_text(4000, seed=2))
        corpus = load_corpus(tmp_path / "c.txt")
        model = seeded_model(tiny_model_config(seq_len=16, vocab=256))
        grad_fn, theta0 = model_grad_fn(model, corpus, n_batches=2, batch_size=2)
        est = hutchinson_trace(grad_fn, theta0, n_probes=4, seed=11)
        assert isinstance(est, HessianTraceEstimate)
        assert math.isfinite(est.value)
        # grad_fn restores nothing by itself; theta0 reloads the start point
        g1 = grad_fn(theta0)
        g2 = grad_fn(theta0)
        np.testing.assert_array_equal(g1, g2)


def synthetic_log(losses, stage_of=None):
    log = LossLog()
    for i, loss in enumerate(losses, start=1):
        stage = stage_of(i) if stage_of else 1
        log.append(i, stage, float(loss), 1e-4, i)
    return log


class TestTransitionDrop:
    def test_constant_log_gives_zero_drops(self):
        sched = make_scheduler((30, 60, 90), [(0.5, 0.5, 0.5), (0.5, 0.5, 1.0), (1.0, 1.0, 1.0)])
        log = synthetic_log([2.0] * 90)
        reports = transition_drop(log, sched, window=10)
        assert [r.transition_step for r in reports] == [30, 60]
        assert all(r.drop == 0.0 for r in reports)

    def test_step_function_drop_measured(self):
        sched = make_scheduler((50, 100), [(0.5, 0.5, 1.0), (1.0, 1.0, 1.0)])
        losses = [3.0] * 50 + [2.7] * 50
        reports = transition_drop(synthetic_log(losses), sched, window=20)
        assert reports[0].drop == pytest.approx(0.3)
        assert reports[0].pre_mean == pytest.approx(3.0)

    def test_negative_drop_reported_not_rejected(self):
        sched = make_scheduler((50, 100), [(0.5, 0.5, 1.0), (1.0, 1.0, 1.0)])
        losses = [2.0] * 50 + [2.5] * 50
        reports = transition_drop(synthetic_log(losses), sched, window=10)
        assert reports[0].drop == pytest.approx(-0.5)

    def test_window_straddling_other_transition_rejected(self):
        sched = make_scheduler((30, 40, 100), [(0.5, 0.5, 0.5), (0.5, 0.5, 1.0), (1.0, 1.0, 1.0)])
        log = synthetic_log([1.0] * 100)
        with pytest.raises(ValueError, match="straddles"):
            transition_drop(log, sched, window=15)

    def test_insufficient_coverage_rejected(self):
        sched = make_scheduler((50, 100), [(0.5, 0.5, 1.0), (1.0, 1.0, 1.0)])
        log = synthetic_log([1.0] * 55)  # log ends before step 60
        with pytest.raises(ValueError, match="cover"):
            transition_drop(log, sched, window=10)

    def test_pure_function_of_inputs(self):
        sched = make_scheduler((50, 100), [(0.5, 0.5, 1.0), (1.0, 1.0, 1.0)])
        losses = list(np.linspace(3, 2, 100))
        a = transition_drop(synthetic_log(losses), sched, window=10)
        b = transition_drop(synthetic_log(losses), sched, window=10)
        assert a == b


class TestSlopeCompare:
    def test_identical_logs_identical_slopes(self):
        losses = 2.0 + np.exp(-np.arange(1, 2001) / 400.0)
        log = synthetic_log(losses)
        sa, sb = slope_compare(log, log, loss_level=2.5)
        assert sa == sb

    def test_two_to_one_decay_rate_ratio(self):
        steps = np.arange(1, 20001, dtype=float)
        fast = np.exp(-2e-4 * steps)
        slow = np.exp(-1e-4 * steps)
        level = 0.5
        sa, sb = slope_compare(synthetic_log(fast), synthetic_log(slow), loss_level=level)
        # at a matched level the slopes are -2k*level and -k*level
        assert sa < sb < 0
        assert sa / sb == pytest.approx(2.0, rel=0.1)

    def test_level_never_reached_rejected(self):
        log = synthetic_log([3.0] * 100)
        with pytest.raises(ValueError, match="never reaches"):
            slope_compare(log, log, loss_level=1.0)
