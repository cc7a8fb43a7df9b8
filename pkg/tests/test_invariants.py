"""Cross-module invariants that tie operations to their independent routes."""
import numpy as np
import pytest

from samlab.diffops import finite_diff_grad, grad
from samlab.harness.config import golden_config
from samlab.harness.experiments import factorization_batch_grads
from samlab.harness.sweep import rho_grid_search
from samlab.landscape import empirical_beta, perturbation_gap
from samlab.models import (
    ModelSpec,
    factorization_family,
    factorization_init,
    gen_factorization_problem,
    squared_loss_fn,
)
from samlab.optim import OptimizerConfig, Schedule, train
from samlab.record import RunRecord, StepRow
from samlab.rng import make_rng

from conftest import mlps_with_kink_margin


class TestFactorizationGradientRoutes:
    """The analytic batch gradients must agree with the reverse-mode tape,
    and the tape with the finite-difference oracle."""

    def test_analytic_matches_autodiff(self):
        problem = gen_factorization_problem(rank=5, n_samples=12, seed=4)
        family = factorization_family(problem)
        params = factorization_init(problem, sigma=0.5, seed=1)
        W1, W2 = params.view("w1"), params.view("w2")
        batch = [1, 4, 7]
        g_ad = family.mean_grad(params, batch)
        XB = problem.samples[batch]
        TB = XB @ problem.A.T
        g1, g2 = factorization_batch_grads(W1, W2, XB, TB)
        assert np.allclose(g_ad.view("w1"), g1, atol=1e-12)
        assert np.allclose(g_ad.view("w2"), g2, atol=1e-12)

    def test_autodiff_matches_finite_differences(self):
        problem = gen_factorization_problem(rank=3, n_samples=5, seed=2)
        family = factorization_family(problem)
        params = factorization_init(problem, sigma=0.4, seed=3)
        for i in (0, 2):
            g = grad(family[i], params)
            gf = finite_diff_grad(family[i], params)
            assert (g - gf).norm() / g.norm() <= 1e-6


class TestScheduleTrace:
    def test_eta_trace_matches_closed_form(self):
        spec = ModelSpec(layer_widths=(3, 4, 1))
        rng = make_rng(0, "sched")
        X, Y = rng.normal(size=(16, 3)), rng.normal(size=16)
        steps = 40
        cfg = OptimizerConfig(
            kind="sgd", eta=0.02, batch_size=4,
            schedule=Schedule.step_at_fractions((0.5, 0.75), steps, decay=0.1),
        )
        record = train(spec, (X, Y), "squared", cfg, steps=steps, seed=0)
        etas = [r.eta for r in record.step_rows]
        expected = [0.02 * 0.1 ** sum(1 for m in (20, 30) if t >= m) for t in range(steps)]
        assert len(etas) == steps
        assert etas == pytest.approx(expected)


class TestPerturbationGapOnTrainedNets:
    def test_gap_bounded_by_trajectory_beta(self):
        # the smoothness argument: the ascent-point gradient gap stays below
        # rho times the largest empirical smoothness seen on the trajectory
        (spec, params, fn, X, Y), = mlps_with_kink_margin(1, 0.05, widths=(4, 8, 1))
        fn = squared_loss_fn(spec, X, Y)
        cfg = OptimizerConfig(kind="sgd", eta=0.02, batch_size=X.shape[0])
        record = train(spec, (X, Y), "squared", cfg, steps=60, seed=1,
                       init=params, snapshot_every=10)
        snaps = [p for _, p in record.snapshots]
        betas = [
            empirical_beta(fn, a, b)
            for a, b in zip(snaps, snaps[1:])
            if (b - a).norm() > 0
        ]
        beta_max = max(betas)
        rho = 0.05
        for point in snaps[1:]:
            gap = perturbation_gap(fn, point, rho)
            assert gap <= beta_max * rho * (1.0 + 0.05) + 1e-9


class TestRecordValidation:
    def test_step_rows_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            RunRecord(config_hash="x", seed=0, steps=2,
                      step_rows=[StepRow(1, 0.1, 1.0, 1.0), StepRow(1, 0.1, 0.9, 1.0)])


class TestWorkerPool:
    def test_sweep_matches_sequential_under_process_pool(self, monkeypatch):
        cfg = golden_config("rho_grid").with_overrides(
            seeds=[0],
            data={"n_train": 128, "n_test": 64},
            train={"epochs": 2},
            model={"width": 10},
        )
        seq = rho_grid_search(cfg, [0.01, 0.1])
        monkeypatch.setenv("SAMLAB_WORKERS", "2")
        par = rho_grid_search(cfg, [0.01, 0.1])
        assert [r["per_seed"] for r in par.table] == [r["per_seed"] for r in seq.table]
        assert par.rho_star == seq.rho_star
