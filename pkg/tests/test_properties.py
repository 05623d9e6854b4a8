import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fcspump.fcs import flows_3state, noise_terms_3state
from fcspump.models import (
    PhysicalControls, ProtocolConfig, RateSet2, RateSet3, filling_factor, generator, parametrized_rates_2state,
    rates_3state,
)
from fcspump.propagation import build_augmented_generator, stationary_dist, step_rk4

rate = st.floats(0.0, 50.0, allow_nan=False)
pos_rate = st.floats(0.05, 50.0, allow_nan=False)
finite = st.floats(-1e3, 1e3, allow_nan=False)
configs = st.builds(
    ProtocolConfig,
    A=st.floats(1.0, 10.0), R=st.floats(0.0, 0.99), omega=st.floats(0.1, 100.0),
)


@given(st.lists(rate, min_size=4, max_size=4), st.floats(-np.pi, np.pi))
def test_two_state_columns_and_field(r, chi):
    rs = RateSet2(*r)
    assert np.abs(generator(rs).sum(axis=0)).max() <= 1e-12 * max(1.0, max(r))
    # the field touches only off-diagonal left transfers
    diff = generator(rs, chi) - generator(rs)
    assert diff[0, 0] == 0 and diff[1, 1] == 0
    right_only = RateSet2(0.0, 0.0, r[2], r[3])
    np.testing.assert_allclose(generator(right_only, chi), generator(right_only))


@given(st.lists(rate, min_size=8, max_size=8))
def test_three_state_columns(r):
    assert np.abs(generator(RateSet3(*r)).sum(axis=0)).max() <= 1e-12 * max(1.0, max(r))


@given(st.lists(pos_rate, min_size=8, max_size=8))
def test_stationary_is_kernel(r):
    rs = RateSet3(*r)
    pi = stationary_dist(rs)
    assert np.all(pi >= -1e-14)
    assert abs(pi.sum() - 1) <= 1e-12
    assert np.abs(generator(rs) @ pi).max() <= 1e-10 * max(r)


@given(configs, finite, finite, st.floats(0, 1))
def test_square_parametrization(cfg, fl, fr, frac):
    r = parametrized_rates_2state(frac * cfg.period, fl, fr, cfg)
    assert r.gl_p >= 0 and r.gr_p >= 0
    for t in (0.0, cfg.period):
        e = parametrized_rates_2state(t, fl, fr, cfg)
        assert abs(e.gl_p - (cfg.A + cfg.R * np.cos(cfg.omega * t))) <= 1e-9 * (1 + abs(fl)) ** 2


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(0.01, 10))
def test_filling_factor_monotone(a, b, kbt):
    fa, fb = filling_factor(a, kbt), filling_factor(b, kbt)
    assert 0 <= fa <= 1
    if a < b:
        assert fa <= fb


@given(configs, st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(0, 1))
def test_spin_channel_totals(cfg, u, frac):
    t = frac * cfg.period
    r = rates_3state(t, PhysicalControls(*u), cfg)
    gl = cfg.A + cfg.R * np.cos(cfg.omega * t)
    assert abs(r.l_up_p + r.l_up_m - gl) <= 1e-12 * gl
    assert abs(r.l_dn_p + r.l_dn_m - gl) <= 1e-12 * gl


@given(st.lists(rate, min_size=8, max_size=8), arrays(float, 9, elements=st.floats(-5, 5)))
def test_spin_charge_identity(r, x):
    rs = RateSet3(*r)
    f = flows_3state(x, rs)
    diag, _, i_d, i_s, su, sd = noise_terms_3state(x, rs)
    ref = 2 * diag - 2 * i_d * (su - sd) - 2 * i_s * (su + sd)
    scale = 1 + np.abs(ref) + max(r) * (1 + np.abs(x).max()) ** 2
    assert abs(f.s_n + f.s_updown - ref) <= 1e-13 * scale


@settings(max_examples=50)
@given(st.lists(rate, min_size=4, max_size=4), st.floats(1e-4, 0.05))
def test_rk4_step_conserves(r, dt):
    rs = RateSet2(*r)
    x = np.array([0.3, 0.7, 0.0, 0.0])
    y = step_rk4(x, 0.0, dt, lambda t: rs)
    assert abs(y[:2].sum() - 1) <= 1e-13
    # sensitivity blocks obey the same column-sum law as the current operator
    a = build_augmented_generator(rs)
    np.testing.assert_allclose(a[:, :2].sum(axis=0), [rs.gl_p, -rs.gl_m], atol=1e-12 * (1 + max(r)))
