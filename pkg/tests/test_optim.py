import numpy as np
import pytest

from samlab.diffops import FunctionFamily, grad, quadratic
from samlab.models import ModelSpec, mlp_init
from samlab.optim import (
    ConvergenceConstants,
    OptimizerConfig,
    Schedule,
    contraction_factor,
    convergence_bound,
    gd_step,
    minibatch_sam_step,
    optimal_step_size,
    sam_step,
    sgd_step,
    train,
)
from samlab.params import ParamVector
from samlab.record import run_summary, save_run
from samlab.rng import make_rng

from conftest import random_mlp, random_quadratic_family


def pv(values, layout):
    return ParamVector(np.asarray(values, dtype=float), layout)


class TestSamStep:
    def test_rho_zero_equals_gd(self):
        spec, params, fn, _, _ = random_mlp(seed=2)
        for normalized in (True, False):
            xs = sam_step(fn, params, eta=0.05, rho=0.0, normalized=normalized).x
            xg = gd_step(fn, params, eta=0.05)
            assert np.allclose(xs.data, xg.data, rtol=1e-12, atol=0.0)

    def test_scalar_hand_values(self):
        f = quadratic(np.array([[1.0]]))
        x1 = pv([1.0], f.layout)
        assert sam_step(f, x1, 0.1, 0.1, normalized=True).x.data[0] == pytest.approx(0.89)
        x2 = pv([2.0], f.layout)
        assert sam_step(f, x2, 0.1, 0.1, normalized=True).x.data[0] == pytest.approx(1.79)
        assert sam_step(f, x2, 0.1, 0.1, normalized=False).x.data[0] == pytest.approx(1.78)

    def test_zero_gradient_flagged_not_raised(self):
        f = quadratic(np.eye(2))
        origin = pv([0.0, 0.0], f.layout)
        result = sam_step(f, origin, 0.1, 0.1, normalized=True)
        assert result.zero_gradient
        assert np.array_equal(result.x.data, origin.data)

    @pytest.mark.parametrize("rho", [1e-2, 1e-4, 1e-6])
    def test_rho_continuity_linear_decay(self, rho):
        H = np.array([[2.0, 0.3], [0.3, 1.0]])
        f = quadratic(H)
        x = pv([1.0, -0.7], f.layout)
        eta = 0.05
        lam = np.linalg.eigvalsh(H)[-1]
        gap = (sam_step(f, x, eta, rho, normalized=True).x - gd_step(f, x, eta)).norm()
        assert gap <= lam * rho * eta * (1.0 + 1e-6)


class TestMinibatchSam:
    def test_full_batch_rho_zero_is_gd_on_mean(self):
        family, _, _ = random_quadratic_family(seed=1, d=4, n=6)
        x = pv(make_rng(0).normal(size=4), family.layout)
        stepped = minibatch_sam_step(family, range(6), x, eta=0.1, rho=0.0)
        expected = x - 0.1 * family.mean_grad(x)
        assert np.allclose(stepped.data, expected.data)

    def test_single_sample_is_per_sample_unnormalized(self):
        family, _, _ = random_quadratic_family(seed=2, d=3, n=5)
        x = pv(make_rng(1).normal(size=3), family.layout)
        stepped = minibatch_sam_step(family, [2], x, eta=0.07, rho=0.3)
        expected = sam_step(family[2], x, 0.07, 0.3, normalized=False).x
        assert np.allclose(stepped.data, expected.data)

    def test_identical_members_match_full_batch(self):
        H = np.array([[1.5, 0.0], [0.0, 0.4]])
        family = FunctionFamily([quadratic(H) for _ in range(8)])
        x = pv([0.9, -1.1], family.layout)
        for batch in ([0], [1, 3], list(range(8))):
            stepped = minibatch_sam_step(family, batch, x, eta=0.05, rho=0.2)
            full = sam_step(family[0], x, 0.05, 0.2, normalized=False).x
            assert np.allclose(stepped.data, full.data)

    def test_empty_batch_rejected(self):
        family, _, _ = random_quadratic_family(seed=3, d=2, n=3)
        x = pv([1.0, 1.0], family.layout)
        with pytest.raises(ValueError, match="batch"):
            minibatch_sam_step(family, [], x, eta=0.1, rho=0.1)


class TestSgdStep:
    def test_momentum_zero_plain_step(self):
        layout = quadratic(np.eye(2)).layout
        g = pv([1.0, -2.0], layout)
        x = pv([0.0, 0.0], layout)
        x1, _ = sgd_step(g, x, eta=0.1)
        assert np.allclose(x1.data, [-0.1, 0.2])

    def test_two_steps_constant_gradient(self):
        layout = quadratic(np.eye(1)).layout
        g = pv([1.0], layout)
        x = pv([0.0], layout)
        x, state = sgd_step(g, x, eta=0.5, momentum=0.9)
        x, state = sgd_step(g, x, eta=0.5, momentum=0.9, state=state)
        assert x.data[0] == pytest.approx(-0.5 * (1.0 + 1.9))

    def test_converges_on_scalar_quadratic(self):
        f = quadratic(np.array([[1.0]]))
        x = pv([1.0], f.layout)
        state = None
        for _ in range(500):
            x, state = sgd_step(grad(f, x), x, eta=0.1, momentum=0.9, state=state)
        assert abs(x.data[0]) < 1e-6


class TestTheory:
    def test_step_size_simple_substitution(self):
        c = ConvergenceConstants(beta=1, lam=1, alpha=0.5, rho=0.0, batch_size=1)
        assert c.kappa() == pytest.approx(2.0)
        assert optimal_step_size(c) == pytest.approx(0.25)

    def test_large_batch_limit(self):
        c = ConvergenceConstants(beta=1, lam=2, alpha=1, rho=0.0, batch_size=10_000)
        assert c.kappa() == pytest.approx(0.5, rel=1e-3)
        assert optimal_step_size(c) == pytest.approx(1.0 / 2.0, rel=1e-3)

    def test_independent_reevaluation(self):
        c = ConvergenceConstants(beta=2, lam=2, alpha=1, rho=0.05, batch_size=1)
        kappa = (1 / 1) * ((1 - 1) / 2 + 2 / 1)
        expected = (1 - (kappa + 0.5) * 2 * 0.05) / (2 * 2 * kappa * (2 * 0.05 + 1) ** 2)
        assert optimal_step_size(c) == pytest.approx(expected)
        assert expected == pytest.approx(0.75 / 9.68)

    def test_rho_bound_error_names_bound(self):
        with pytest.raises(ValueError, match=r"1/\(\(beta/alpha \+ 1/2\) beta\)"):
            ConvergenceConstants(beta=2, lam=1, alpha=1, rho=1.0, batch_size=1)

    def test_bound_at_t_zero_is_f0(self):
        c = ConvergenceConstants(beta=1, lam=1, alpha=1, rho=0.0)
        assert convergence_bound(c, f0=3.7, t=0) == pytest.approx(3.7)

    def test_contraction_factor_rho_zero(self):
        c = ConvergenceConstants(beta=1, lam=1, alpha=1, rho=0.0, batch_size=1)
        assert contraction_factor(c) == pytest.approx(0.75)

    def test_contraction_strictly_inside_unit_interval(self):
        beta, lam, alpha = 2.0, 2.5, 0.8
        bound = 1.0 / ((beta / alpha + 0.5) * beta)
        for rho in np.linspace(0.0, bound * 0.999, 25):
            c = ConvergenceConstants(beta=beta, lam=lam, alpha=alpha, rho=float(rho))
            assert 0.0 < contraction_factor(c) < 1.0

    def test_b1_matches_direct_form(self):
        beta, lam, alpha, rho = 1.7, 2.2, 0.6, 0.05
        c = ConvergenceConstants(beta=beta, lam=lam, alpha=alpha, rho=rho, batch_size=1)
        direct = (alpha - (beta + alpha / 2) * beta * rho) / (2 * lam * beta * (beta * rho + 1) ** 2)
        assert optimal_step_size(c) == pytest.approx(direct)


class TestSchedule:
    def test_step_decay_closed_form(self):
        total = 100
        sched = Schedule.step_at_fractions((0.5, 0.75), total, decay=0.1)
        etas = [sched.eta_at(1.0, t, total) for t in range(total)]
        assert etas[0] == 1.0 and etas[49] == 1.0
        assert etas[50] == pytest.approx(0.1) and etas[74] == pytest.approx(0.1)
        assert etas[75] == pytest.approx(0.01) and etas[99] == pytest.approx(0.01)

    def test_cosine_endpoints(self):
        sched = Schedule(kind="cosine")
        assert sched.eta_at(2.0, 0, 100) == pytest.approx(2.0)
        assert sched.eta_at(2.0, 100, 100) == pytest.approx(0.0, abs=1e-12)

    def test_inverse_sqrt(self):
        sched = Schedule(kind="inverse_sqrt")
        assert sched.eta_at(1.0, 3, 10) == pytest.approx(0.5)

    def test_linear_decay(self):
        sched = Schedule(kind="linear")
        assert sched.eta_at(1.0, 50, 100) == pytest.approx(0.5)

    def test_milestones_must_increase(self):
        with pytest.raises(ValueError):
            Schedule(kind="step", milestones=(10, 10))


def quadratic_dataset(seed=0, n=16, d=3):
    rng = make_rng(seed, "quad_data")
    X = rng.normal(size=(n, d))
    w_true = rng.normal(size=d)
    Y = X @ w_true
    return X, Y


class TestTrain:
    def test_zero_steps_only_initial_state(self):
        spec = ModelSpec(layer_widths=(3, 4, 1))
        X, Y = quadratic_dataset()
        record = train(spec, (X, Y), "squared", OptimizerConfig(kind="gd", eta=0.01),
                       steps=0, seed=0, snapshot_every=1)
        assert record.step_rows == []
        assert len(record.eval_rows) == 1 and record.eval_rows[0].step == 0
        assert [s for s, _ in record.snapshots] == [0]

    def test_gd_monotone_on_quadratic(self):
        spec = ModelSpec(layer_widths=(3, 1), activation="identity")
        X, Y = quadratic_dataset(n=12)
        record = train(spec, (X, Y), "squared", OptimizerConfig(kind="gd", eta=0.05),
                       steps=60, seed=1, eval_every=1)
        losses = [r.train_loss for r in record.eval_rows]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_determinism_byte_identical(self, tmp_path):
        spec = ModelSpec(layer_widths=(3, 5, 1))
        X, Y = quadratic_dataset(seed=3)
        cfg = OptimizerConfig(kind="sam", eta=0.02, rho=0.05, batch_size=4)
        kw = dict(steps=25, seed=7, snapshot_every=10, eval_every=5, config_hash="t")
        r1 = train(spec, (X, Y), "squared", cfg, **kw)
        r2 = train(spec, (X, Y), "squared", cfg, **kw)
        s1, s2 = run_summary(r1), run_summary(r2)
        assert s1["content_hash"] == s2["content_hash"]
        d1, d2 = save_run(r1, tmp_path / "a"), save_run(r2, tmp_path / "b")
        assert (d1 / "trace.csv").read_bytes() == (d2 / "trace.csv").read_bytes()
        assert (d1 / "eval.csv").read_bytes() == (d2 / "eval.csv").read_bytes()
        assert np.array_equal(r1.final_params.data, r2.final_params.data)

    def test_frozen_layers_bit_identical(self):
        spec = ModelSpec(
            layer_widths=(3, 6, 1),
            train_weights=(True, False),
            train_biases=(False, False),
        )
        init = mlp_init(spec, "gauss_1_over_m", seed=5)
        X, Y = quadratic_dataset(seed=5)
        cfg = OptimizerConfig(kind="sam", eta=0.05, rho=0.1, batch_size=8, momentum=0.5)
        record = train(spec, (X, Y), "squared", cfg, steps=40, seed=5, init=init)
        final = record.final_params
        assert np.array_equal(final.view("w1"), init.view("w1"))
        assert np.array_equal(final.view("b0"), init.view("b0"))
        assert np.array_equal(final.view("b1"), init.view("b1"))
        assert not np.array_equal(final.view("w0"), init.view("w0"))

    def test_masked_weights_never_move(self):
        from samlab.data import random_mask

        base = ModelSpec(layer_widths=(3, 8, 1))
        mask = random_mask(base.layout(), sparsity=0.5, seed=11)
        spec = ModelSpec(layer_widths=(3, 8, 1), mask=mask.bits)
        X, Y = quadratic_dataset(seed=11)
        cfg = OptimizerConfig(kind="sgd", eta=0.05, batch_size=4, momentum=0.9)
        record = train(spec, (X, Y), "squared", cfg, steps=30, seed=11)
        dead = mask.bits.data == 0.0
        assert np.array_equal(record.final_params.data[dead], np.zeros(dead.sum()))

    def test_divergence_flag_and_partial_record(self):
        spec = ModelSpec(layer_widths=(3, 4, 1))
        X, Y = quadratic_dataset(seed=2)
        cfg = OptimizerConfig(kind="gd", eta=1e9)
        record = train(spec, (X, Y), "squared", cfg, steps=50, seed=2)
        assert record.diverged
        assert record.meta["completed_steps"] < 50

    def test_gd_ignores_batch_size(self):
        spec = ModelSpec(layer_widths=(3, 1), activation="identity")
        X, Y = quadratic_dataset(seed=9, n=10)
        r_gd = train(spec, (X, Y), "squared", OptimizerConfig(kind="gd", eta=0.03, batch_size=2),
                     steps=5, seed=4)
        r_full = train(spec, (X, Y), "squared",
                       OptimizerConfig(kind="sgd", eta=0.03, batch_size=10), steps=5, seed=4)
        assert np.allclose(r_gd.final_params.data, r_full.final_params.data)

    def test_reserved_optimizer_kinds(self):
        with pytest.raises(NotImplementedError):
            OptimizerConfig(kind="adam")
