"""Instantaneous currents, noise currents and per-cycle moments.

``N`` counts particles entering the dot from the left reservoir (net), so a
positive current ``i`` drains the left reservoir.  In the spin model
``N = N_up + N_down`` and ``S = N_up - N_down``.

Coordinates follow the augmented state: ``x = (p0, p1, pbar0, pbar1)`` for
the two-state system and
``x = (p0, p_up, p_dn, pbar^up_0, pbar^up_up, pbar^up_dn, pbar^dn_0,
pbar^dn_up, pbar^dn_dn)`` for the spin model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, GridMismatch
from .models import RateSet2
from .propagation import TimeGrid, TrajectoryRecord, propagate_with_field, warmup


@dataclass(frozen=True)
class Flows2:
    i: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class Flows3:
    i_delta: np.ndarray
    i_sigma: np.ndarray
    s_updown: np.ndarray
    s_n: np.ndarray


def _rates2(rates):
    return np.asarray(rates.gl_p, float), np.asarray(rates.gl_m, float)


def _rates3(rates):
    return tuple(np.asarray(getattr(rates, n), float) for n in ("l_up_p", "l_up_m", "l_dn_p", "l_dn_m"))


def flows_2state(x, rates: RateSet2) -> Flows2:
    """Particle current ``i`` and noise current ``s`` of the two-state pump."""
    x = np.asarray(x)
    a, b = _rates2(rates)
    x1, x2, x3, x4 = np.moveaxis(x, -1, 0)
    i = a * x1 - b * x2
    s = a * x1 + b * x2 + 2 * a * x3 - 2 * b * x4 - 2 * i * (x3 + x4)
    return Flows2(i=i, s=s)


def flows_2state_dx(x, rates: RateSet2):
    """Gradients ``(di/dx, ds/dx)``, each of shape ``(..., 4)``."""
    x = np.asarray(x)
    a, b = _rates2(rates)
    x1, x2, x3, x4 = np.moveaxis(x, -1, 0)
    i = a * x1 - b * x2
    q = x3 + x4
    zero = np.zeros_like(i)
    di = np.stack(np.broadcast_arrays(a, -b, zero, zero), axis=-1)
    ds = np.stack(np.broadcast_arrays(a - 2 * a * q, b + 2 * b * q, 2 * a - 2 * i, -2 * b - 2 * i), axis=-1)
    return di, ds


def spin_currents(x, rates):
    """Return ``(i_up, i_down)``."""
    x = np.asarray(x)
    a, b, c, d = _rates3(rates)
    return a * x[..., 0] - b * x[..., 1], c * x[..., 0] - d * x[..., 2]


def noise_terms_3state(x, rates):
    """Building blocks of the spin-model noise currents.

    Returns ``(diag, cross, i_delta, i_sigma, sum_up, sum_dn)`` where
    ``diag`` collects the shot-noise terms and the same-spin
    sensitivity terms, ``cross`` the opposite-spin sensitivity terms and
    ``sum_up``/``sum_dn`` are the accumulated mean counts per spin.
    """
    x = np.asarray(x)
    a, b, c, d = _rates3(rates)
    x1, x2, x3, x4, x5, x6, x7, x8, x9 = np.moveaxis(x, -1, 0)
    i_delta = (a - c) * x1 - b * x2 + d * x3
    i_sigma = (a + c) * x1 - b * x2 - d * x3
    diag = (a * x1 + b * x2 + 2 * a * x4 - 2 * b * x5
            + c * x1 + d * x3 + 2 * c * x7 - 2 * d * x9)
    cross = 2 * (a * x7 - b * x8) + 2 * (c * x4 - d * x6)
    return diag, cross, i_delta, i_sigma, x4 + x5 + x6, x7 + x8 + x9


def flows_3state(x, rates) -> Flows3:
    """Spin/charge currents and noise currents of the spin model."""
    diag, cross, i_d, i_s, su, sd = noise_terms_3state(x, rates)
    return Flows3(
        i_delta=i_d,
        i_sigma=i_s,
        s_updown=diag - cross - 2 * i_d * (su - sd),
        s_n=diag + cross - 2 * i_s * (su + sd),
    )


def flows_3state_dx(x, rates):
    """Gradients of ``(i_delta, i_sigma, s_updown, s_n)`` in the 9 coordinates."""
    x = np.asarray(x)
    a, b, c, d = _rates3(rates)
    _, _, i_d, i_s, su, sd = noise_terms_3state(x, rates)
    z = np.zeros_like(i_d)
    a, b, c, d = np.broadcast_arrays(a, b, c, d, z)[:4]
    g_id = np.stack([a - c, -b, d, z, z, z, z, z, z], axis=-1)
    g_is = np.stack([a + c, -b, -d, z, z, z, z, z, z], axis=-1)
    g_diag = np.stack([a + c, b, d, 2 * a, -2 * b, z, 2 * c, z, -2 * d], axis=-1)
    g_cross = np.stack([z, z, z, 2 * c, z, -2 * d, 2 * a, -2 * b, z], axis=-1)
    up = np.array([0, 0, 0, 1, 1, 1, 0, 0, 0], dtype=float)
    dn = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1], dtype=float)
    g_sud = (g_diag - g_cross - 2 * (su - sd)[..., None] * g_id
             - 2 * i_d[..., None] * (up - dn))
    g_sn = (g_diag + g_cross - 2 * (su + sd)[..., None] * g_is
            - 2 * i_s[..., None] * (up + dn))
    return g_id, g_is, g_sud, g_sn


def flows(x, rates):
    if isinstance(rates, RateSet2):
        return flows_2state(x, rates)
    return flows_3state(x, rates)


@dataclass(frozen=True)
class CycleMoments:
    """Per-cycle moments; spin fields are ``None`` for the two-state system."""

    n_mean: float
    n_var: float
    s_mean: float | None = None
    s_var: float | None = None
    n_mean_quad: float | None = None
    s_mean_quad: float | None = None
    rule: str = "trapezoid"

    def to_dict(self):
        return asdict(self)


def _check_grid(traj: TrajectoryRecord):
    g = traj.grid
    t = np.asarray(traj.times)
    if t.shape != (g.M + 1,) or traj.states.shape[0] != g.M + 1:
        raise GridMismatch(f"expected {g.M + 1} nodes, got {t.shape[0]}")
    if not np.allclose(np.diff(t), g.dt, rtol=1e-9, atol=0):
        raise GridMismatch("trajectory nodes are not uniformly spaced on the period grid")
    if abs((t[-1] - t[0]) - g.period) > 1e-9 * g.period:
        raise GridMismatch("trajectory does not span exactly one period")


def trapezoid(y, dt):
    y = np.asarray(y)
    return float(dt * (y.sum(axis=-1) - 0.5 * (y[..., 0] + y[..., -1])))


def cycle_moments(traj: TrajectoryRecord) -> CycleMoments:
    """Means from the sensitivity endpoints, variances by trapezoid quadrature."""
    _check_grid(traj)
    x = traj.states
    dt = traj.grid.dt
    end = x[-1]
    if traj.nstates == 2:
        fl = flows_2state(x, traj.rates)
        return CycleMoments(
            n_mean=float(end[2] + end[3]),
            n_var=trapezoid(fl.s, dt),
            n_mean_quad=trapezoid(fl.i, dt),
        )
    fl = flows_3state(x, traj.rates)
    up = float(end[3:6].sum())
    dn = float(end[6:9].sum())
    return CycleMoments(
        n_mean=up + dn,
        n_var=trapezoid(fl.s_n, dt),
        s_mean=up - dn,
        s_var=trapezoid(fl.s_updown, dt),
        n_mean_quad=trapezoid(fl.i_sigma, dt),
        s_mean_quad=trapezoid(fl.i_delta, dt),
    )


def geometric_pump_value(A, R, gamma_minus=1.0):
    """Adiabatic-limit particles per cycle of the two-state circular cycle.

    Closed form of the enclosed-area integral for
    ``G_L+ = A + R cos``, ``G_R+ = A + R sin`` and both ``-`` rates equal to
    ``gamma_minus``: ``2 pi g R^2 / (4 (A + g)^2 - 2 R^2)^(3/2)``.
    """
    g = gamma_minus
    denom = 4.0 * (A + g) ** 2 - 2.0 * R ** 2
    if not denom > 0:
        raise DomainError("need 4 (A + gamma_minus)^2 > 2 R^2")
    return 2.0 * np.pi * g * R ** 2 / denom ** 1.5


def chi_moments(drive, grid: TimeGrid, h=1e-3, p0=None):
    """First and second moments from finite differences of ``phi(chi)``.

    Independent of the sensitivity-vector route; used as a cross-check.
    Returns a dict with ``n_mean``, ``n_second``, ``n_var`` and, for the spin
    model, the same keys for ``s``.
    """
    if p0 is None:
        p0 = warmup(drive, grid).p

    def moments(direction):
        def phi(c):
            return propagate_with_field(drive, grid, c * np.asarray(direction, float) if direction else c, p0)

        fp, f0, fm = phi(h), phi(0.0), phi(-h)
        mean = (-1j * (fp - fm) / (2 * h)).real
        second = (-(fp - 2 * f0 + fm) / h ** 2).real
        return mean, second, second - mean ** 2

    out = {}
    if drive.nstates == 2:
        out["n_mean"], out["n_second"], out["n_var"] = moments(None)
    else:
        out["n_mean"], out["n_second"], out["n_var"] = moments((1.0, 1.0))
        out["s_mean"], out["s_second"], out["s_var"] = moments((1.0, -1.0))
    return out


def mixed_moment(drive, grid: TimeGrid, h=1e-3, p0=None) -> float:
    """``<N_up N_down>`` per cycle from a mixed central difference of ``phi``."""
    if drive.nstates != 3:
        raise ValueError("mixed moments need the spin model")
    if p0 is None:
        p0 = warmup(drive, grid).p
    f = {(a, b): propagate_with_field(drive, grid, (a * h, b * h), p0) for a in (1, -1) for b in (1, -1)}
    d2 = (f[1, 1] - f[1, -1] - f[-1, 1] + f[-1, -1]) / (4 * h * h)
    return float((-d2).real)
