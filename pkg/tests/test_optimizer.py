import numpy as np
import pytest

from fcspump import optimizer as opt
from fcspump.errors import NumericBlowup
from fcspump.fcs import flows_3state
from fcspump.models import (
    ConstantDrive, RateSet2, RateSet3, SpinDrive, TwoStateControlDrive, initial_spin_controls,
    initial_two_state_controls,
)
from fcspump.optimizer import (
    AdjointRecord, CostWeights, Scenario, adjoint_backprop, adjoint_directional_derivative, control_gradient,
    cost_gradients, cost_rate, evaluate, fd_directional_derivative, optimize, step_profile,
)
from fcspump.propagation import TimeGrid, build_augmented_generator, run_cycle
from oracles import adjoint_constant

TWO = CostWeights(-0.2, 0.2, 0.0, Scenario.TWO_STATE)
SPIN = CostWeights(-0.5, 1.0, 0.2, Scenario.SPIN_PUMP)
DECO = CostWeights(2.0, -2.0, 0.0, Scenario.DECORRELATE)


def two_state_setup(cfg, m=1024, f=(0.3, 0.2)):
    return TwoStateControlDrive(cfg, initial_two_state_controls(cfg, m, *f)), TimeGrid(cfg.period, M=m)


def spin_setup(cfg, m=1024):
    return SpinDrive(cfg, initial_spin_controls(cfg, m)), TimeGrid(cfg.period, M=m)


class TestWeights:
    @pytest.mark.parametrize("w", [
        CostWeights(-0.2, 0.0, 0.0, "two_state"),
        CostWeights(-0.5, 1.0, 0.0, "spin_pump"),
        CostWeights(0.0, -1.0, 0.0, "decorrelate"),
        CostWeights(1.0, 1.0, 0.0, "decorrelate"),
    ])
    def test_invalid(self, w):
        with pytest.raises(ValueError):
            w.validate()

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            CostWeights(1, 1, 1, "nope")


class TestCostRate:
    def test_zero_weights(self):
        rng = np.random.default_rng(0)
        r = RateSet3(*rng.uniform(0, 2, 8))
        for sc in Scenario:
            d = 4 if sc is Scenario.TWO_STATE else 9
            rr = RateSet2(*rng.uniform(0, 2, 4)) if d == 4 else r
            assert cost_rate(rng.normal(size=d), rr, CostWeights(0, 0, 0, sc)) == 0

    def test_spin_symmetric_state(self):
        r = RateSet3(1.0, 2.0, 1.0, 2.0, 0.5, 0.5, 0.5, 0.5)
        x = np.array([0.4, 0.3, 0.3, 0.1, -0.2, 0.05, 0.1, -0.2, 0.05])
        f = flows_3state(x, r)
        assert cost_rate(x, r, SPIN) == pytest.approx(1.0 * f.i_sigma ** 2 + 0.2 * f.s_updown, abs=1e-15)


class TestCostGradients:
    def test_linear_current(self):
        r = RateSet2(1.7, 0.6, 1.0, 1.0)
        dx, _ = cost_gradients(np.array([0.2, 0.8, 0.1, -0.1]), r, CostWeights(-0.3, 0, 0, Scenario.TWO_STATE))
        np.testing.assert_allclose(dx, -0.3 * np.array([1.7, -0.6, 0, 0]))

    def test_square_term(self):
        r = RateSet3(*np.linspace(0.5, 2, 8))
        x = np.linspace(0.1, 0.9, 9)
        w = CostWeights(0.0, 1.0, 0.0, Scenario.SPIN_PUMP)
        dx, _ = cost_gradients(x, r, w)
        i_sigma = flows_3state(x, r).i_sigma
        assert dx[0] == pytest.approx(2 * i_sigma * (r.l_up_p + r.l_dn_p))

    @pytest.mark.parametrize("w", [TWO, SPIN, DECO])
    def test_fd(self, w):
        rng = np.random.default_rng(1)
        for _ in range(5):
            if w.scenario is Scenario.TWO_STATE:
                arr, x = rng.uniform(0.5, 3, 4), rng.normal(size=4)
                cls = RateSet2
            else:
                arr, x = rng.uniform(0.5, 3, 8), rng.normal(size=9)
                cls = RateSet3
            dx, dr = cost_gradients(x, cls(*arr), w)
            h = 1e-6
            for k in range(x.size):
                e = np.eye(x.size)[k] * h
                fd = (cost_rate(x + e, cls(*arr), w) - cost_rate(x - e, cls(*arr), w)) / (2 * h)
                assert dx[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)
            for k in range(arr.size):
                e = np.eye(arr.size)[k] * h
                fd = (cost_rate(x, cls(*(arr + e)), w) - cost_rate(x, cls(*(arr - e)), w)) / (2 * h)
                assert dr[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)


class TestAdjoint:
    def test_zero_cost_zero_adjoint(self, cfg):
        d, g = two_state_setup(cfg, 256)
        tr = run_cycle(d, g)
        adj = adjoint_backprop(tr, CostWeights(0, 0, 0, Scenario.TWO_STATE))
        assert not adj.v.any()
        assert not adj.v_warmup.any()

    def test_constant_rates_closed_form(self):
        r = RateSet2(1.3, 0.8, 0.6, 1.1)
        period = 1.5
        tr = run_cycle(ConstantDrive(r, period), TimeGrid(period, M=1024))
        w = CostWeights(-0.7, 0.0, 0.0, Scenario.TWO_STATE)
        adj = adjoint_backprop(tr, w)
        a = build_augmented_generator(r)
        b = -0.7 * np.array([1.3, -0.8, 0.0, 0.0])
        for j in (0, 100, 512, 1000):
            tau = period - tr.grid.nodes[j]
            np.testing.assert_allclose(adj.v[j], adjoint_constant(a, b, tau), atol=1e-8)

    def test_terminal_condition(self, cfg):
        d, g = spin_setup(cfg, 256)
        adj = adjoint_backprop(run_cycle(d, g), SPIN)
        assert not adj.v[-1].any()

    @pytest.mark.parametrize("which", ["two", "spin", "deco"])
    def test_total_derivative(self, cfg, which):
        if which == "two":
            (d, g), w = two_state_setup(cfg), TWO
        else:
            c = cfg if which == "spin" else cfg.replace(omega=50)
            (d, g), w = spin_setup(c), (SPIN if which == "spin" else DECO)
        ev = evaluate(d, g, w)
        grad = control_gradient(ev.traj, adjoint_backprop(ev.traj, w), w)
        rng = np.random.default_rng(3)
        t = g.nodes / g.period
        # smooth random direction vanishing at both ends
        coef = rng.normal(size=(d.n_controls, 3))
        direction = sum(coef[:, [k]] * np.sin((k + 1) * np.pi * t) for k in range(3))
        predicted = adjoint_directional_derivative(grad, g, direction)
        assert predicted == pytest.approx(fd_directional_derivative(d, g, w, direction, 1e-5), rel=1e-4)

    def test_bound(self, cfg):
        d, g = spin_setup(cfg, 1024)
        tr = run_cycle(d, g)
        adj = adjoint_backprop(tr, SPIN)
        dx, _ = cost_gradients(tr.states, tr.rates, SPIN)
        total = np.asarray(tr.rates.total)
        growth = np.exp(np.sum(total[:-1] + total[1:]) * g.dt / 2)
        forcing = np.sum(np.linalg.norm(dx, axis=1)) * g.dt
        assert np.linalg.norm(adj.v, axis=1).max() <= growth * forcing

    def test_blowup(self, cfg, monkeypatch):
        d, g = two_state_setup(cfg, 256)
        tr = run_cycle(d, g)
        monkeypatch.setattr(opt, "ADJOINT_LIMIT", 1e-12)
        with pytest.raises(NumericBlowup):
            adjoint_backprop(tr, TWO)


class TestControlGradient:
    def test_zero_adjoint_control_free_cost(self, cfg):
        d, g = two_state_setup(cfg, 256)
        tr = run_cycle(d, g)
        zero = AdjointRecord(np.zeros_like(tr.states))
        assert not control_gradient(tr, zero, CostWeights(0, 0, 0, Scenario.TWO_STATE)).any()

    def test_parametrization_factor(self, cfg):
        d, g = two_state_setup(cfg, 256, f=(0.0, 0.0))
        tr = run_cycle(d, g)
        w = CostWeights(-0.5, 0, 0, Scenario.TWO_STATE)
        grad = control_gradient(tr, AdjointRecord(np.zeros_like(tr.states)), w)
        t = g.nodes
        factor = 2 * np.sin(cfg.omega * t / 2) * np.sqrt(4 + np.cos(cfg.omega * t))
        np.testing.assert_allclose(grad[0], 0.5 * tr.states[:, 0] * factor, atol=1e-13)

    def test_per_node(self, cfg):
        d, g = two_state_setup(cfg)
        ev = evaluate(d, g, TWO)
        grad = control_gradient(ev.traj, adjoint_backprop(ev.traj, TWO), TWO)
        for c, j in ((0, 137), (1, 700)):
            e = np.zeros_like(d.controls)
            e[c, j] = 1.0
            fd = fd_directional_derivative(d, g, TWO, e, 1e-4)
            assert adjoint_directional_derivative(grad, g, e) == pytest.approx(fd, rel=1e-3)

    def test_requires_controls(self):
        tr = run_cycle(ConstantDrive(RateSet2(1.0, 1.0, 1.0, 1.0), 1.0), TimeGrid(1.0, M=256))
        with pytest.raises(ValueError):
            control_gradient(tr, AdjointRecord(np.zeros_like(tr.states)), TWO)


class TestOptimize:
    def test_step_profile(self):
        p = step_profile(TimeGrid(1.0, M=256), 0.8)
        assert p[0] == 0 and p[-1] == 0
        assert p[128] == pytest.approx(0.8)

    def test_zero_step_constant(self, cfg):
        d, g = two_state_setup(cfg, 256)
        rep = optimize(d, g, TWO, 0.0, 3)
        assert len(set(rep.costs)) == 1
        np.testing.assert_array_equal(rep.controls, d.controls)

    def test_report_length_and_pinning(self, cfg):
        d, g = spin_setup(cfg, 256)
        rep = optimize(d, g, SPIN, 2.0, 5, snapshot_every=2)
        assert len(rep.costs) == len(rep.moments) == 6
        assert sorted(rep.snapshots) == [0, 2, 4, 5]
        for snap in rep.snapshots.values():
            np.testing.assert_array_equal(snap[:, [0, -1]], d.controls[:, [0, -1]])
        assert rep.to_dict()["iterations"] == 5

    def test_deterministic(self, cfg):
        d, g = two_state_setup(cfg, 256)
        a = optimize(d, g, TWO, 0.8, 3)
        b = optimize(d, g, TWO, 0.8, 3)
        assert a.costs == b.costs
        np.testing.assert_array_equal(a.controls, b.controls)

    @pytest.mark.parametrize("which", ["two", "spin", "deco"])
    def test_descent_with_backtracking(self, cfg, which):
        if which == "two":
            (d, g), w, eps = two_state_setup(cfg, 1024, f=(0.0, 0.0)), TWO, 0.8
        elif which == "spin":
            (d, g), w, eps = spin_setup(cfg), SPIN, 2.0
        else:
            (d, g), w, eps = spin_setup(cfg.replace(omega=50)), DECO, 4.0
        rep = optimize(d, g, w, eps, 10, backtrack=True, snapshot_every=0)
        assert np.all(np.diff(rep.costs) <= 0)
        assert rep.costs[-1] < rep.costs[0]

    def test_tolerance_stop(self, cfg):
        d, g = two_state_setup(cfg, 256)
        rep = optimize(d, g, TWO, 1e-9, 50, tol=1e-8)
        assert rep.stopped_early and rep.iterations == 1

    def test_error_carries_iteration(self, cfg, monkeypatch):
        d, g = two_state_setup(cfg, 256)
        real = opt.evaluate
        calls = {"n": 0}

        def flaky(*a):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NumericBlowup("boom")
            return real(*a)

        monkeypatch.setattr(opt, "evaluate", flaky)
        with pytest.raises(NumericBlowup) as err:
            optimize(d, g, TWO, 0.8, 5)
        assert err.value.iteration == 2

    def test_mismatched_scenario(self, cfg):
        d, g = spin_setup(cfg, 256)
        with pytest.raises(ValueError):
            optimize(d, g, TWO, 0.8, 1)

    def test_decorrelate_defaults(self, cfg):
        d, g = spin_setup(cfg.replace(omega=50), 256)
        rep = opt.decorrelate(d, g, iterations=1)
        assert rep.weights == DECO
        with pytest.raises(ValueError):
            opt.decorrelate(d, g, SPIN, iterations=1)
