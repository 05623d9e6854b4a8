"""Driving protocols, rate parametrizations and master-equation generators.

Two systems are covered:

* a two-state dot (empty/occupied) with rates ``gl_p, gl_m, gr_p, gr_m``;
  ``+`` moves a particle from a reservoir into the dot, ``-`` the reverse;
* a three-state Coulomb-blockaded dot (empty, spin up, spin down) whose
  eight rates follow from reservoir filling factors.

State ordering is ``(empty, occupied)`` and ``(empty, up, down)``.  Every
function accepts scalar or array times and broadcasts over them; matrices
carry the time axes in front, ``(..., d, d)``.

Time is in units of ``1/Gamma_0``, rates in ``Gamma_0``, energies in
``V_0 = k_B T_sys``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, UnphysicalRate

FD_STEPS_PER_PERIOD = 10_000


@dataclass(frozen=True)
class ProtocolConfig:
    """Parameters of the prescribed pumping cycle.

    ``Gamma_L(t) = A + R cos(omega t)`` and ``Gamma_R(t) = A + R sin(omega t)``.
    In the two-state system these are the ``+`` rates and both ``-`` rates
    equal ``gamma_minus``.  In the spin model they are the channel totals
    split by the filling factors at temperature ``kbt``.

    ``zeeman_sign`` is the sign of the Zeeman shift applied to spin up
    (spin down receives the opposite sign).
    """

    A: float = 4.0
    R: float = 1.0
    omega: float = 10.0
    gamma_minus: float = 1.0
    kbt: float = 1.0
    zeeman_sign: int = 1

    def __post_init__(self):
        if not (self.A > self.R >= 0):
            raise ValueError(f"need A > R >= 0, got A={self.A}, R={self.R}")
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not self.gamma_minus >= 0:
            raise ValueError("gamma_minus must be non-negative")
        if not self.kbt > 0:
            raise ValueError("kbt must be positive")
        if self.zeeman_sign not in (1, -1):
            raise ValueError("zeeman_sign must be +1 or -1")

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.omega

    @property
    def v0(self) -> float:
        return self.kbt

    def replace(self, **changes) -> "ProtocolConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RateSet2:
    """Rates of the two-state system; fields may be arrays sharing a shape."""

    gl_p: np.ndarray
    gl_m: np.ndarray
    gr_p: np.ndarray
    gr_m: np.ndarray

    nstates = 2
    names = ("gl_p", "gl_m", "gr_p", "gr_m")

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(*(np.asarray(getattr(self, n), float) for n in self.names)))

    @classmethod
    def from_array(cls, arr) -> "RateSet2":
        arr = np.asarray(arr, dtype=float)
        return cls(*arr)

    @property
    def total(self):
        return self.gl_p + self.gl_m + self.gr_p + self.gr_m

    @property
    def total_in(self):
        return self.gl_p + self.gr_p

    @property
    def total_out(self):
        return self.gl_m + self.gr_m

    def check(self, times=None):
        """Raise `UnphysicalRate` at the first negative entry."""
        _check_nonnegative(self, times)
        return self


@dataclass(frozen=True)
class RateSet3:
    """Rates ``Gamma_{k,sigma}^{+/-}`` of the three-state spin model."""

    l_up_p: np.ndarray
    l_up_m: np.ndarray
    l_dn_p: np.ndarray
    l_dn_m: np.ndarray
    r_up_p: np.ndarray
    r_up_m: np.ndarray
    r_dn_p: np.ndarray
    r_dn_m: np.ndarray

    nstates = 3
    names = ("l_up_p", "l_up_m", "l_dn_p", "l_dn_m",
             "r_up_p", "r_up_m", "r_dn_p", "r_dn_m")

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(*(np.asarray(getattr(self, n), float) for n in self.names)))

    @classmethod
    def from_array(cls, arr) -> "RateSet3":
        arr = np.asarray(arr, dtype=float)
        return cls(*arr)

    @property
    def total(self):
        return sum(getattr(self, n) for n in self.names)

    def check(self, times=None):
        _check_nonnegative(self, times)
        return self


def rateset_class(nstates: int):
    return {2: RateSet2, 3: RateSet3}[nstates]


def _check_nonnegative(rates, times):
    for name in rates.names:
        val = np.asarray(getattr(rates, name))
        bad = np.flatnonzero(~(val >= 0))
        if bad.size:
            k = bad[0]
            t = np.broadcast_to(times, val.shape).ravel()[k] if times is not None else np.nan
            raise UnphysicalRate(t, name, val.ravel()[k])


@dataclass(frozen=True)
class PhysicalControls:
    """Gate voltages and Zeeman energies in units of ``V_0``."""

    v_l: np.ndarray
    v_r: np.ndarray
    ez_l: np.ndarray
    ez_r: np.ndarray

    names = ("V_L", "V_R", "eps_LZ", "eps_RZ")

    def as_array(self):
        return np.stack(np.broadcast_arrays(self.v_l, self.v_r, self.ez_l, self.ez_r)).astype(float)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("physical controls must be finite")
        return cls(*arr)


# ---------------------------------------------------------------------------
# prescribed protocols


def channel_totals(t, cfg: ProtocolConfig):
    """Return ``(Gamma_L(t), Gamma_R(t))`` of the prescribed cycle."""
    wt = cfg.omega * np.asarray(t, dtype=float)
    return cfg.A + cfg.R * np.cos(wt), cfg.A + cfg.R * np.sin(wt)


def base_rates_2state(t, cfg: ProtocolConfig) -> RateSet2:
    gl, gr = channel_totals(t, cfg)
    gm = np.full_like(gl, cfg.gamma_minus)
    return RateSet2(gl_p=gl, gl_m=gm, gr_p=gr, gr_m=gm.copy())


def _fd4(fun, t, h):
    return (-fun(t + 2 * h) + 8 * fun(t + h) - 8 * fun(t - h) + fun(t - 2 * h)) / (12 * h)


def cd_gamma(t, cfg: ProtocolConfig, base: Callable | None = None, h: float | None = None):
    """Counterdiabatic correction ``d/dt[(d/dt(G-/G)) / G]`` of a two-state protocol.

    ``G = G+ + G-`` are the total in/out rates of ``base`` (defaults to
    `base_rates_2state`).  Both derivatives use the fourth-order central
    stencil with step ``h`` (default ``T / 10**4``).
    """
    base = base or (lambda s: base_rates_2state(s, cfg))
    h = cfg.period / FD_STEPS_PER_PERIOD if h is None else h
    t = np.asarray(t, dtype=float)

    def out_fraction(s):
        r = base(s)
        return r.total_out / r.total

    def lagged(s):
        total = base(s).total
        with np.errstate(divide="ignore", invalid="ignore"):
            return _fd4(out_fraction, s, h) / total

    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = _fd4(lagged, t, h)
    if not np.all(np.isfinite(gamma)):
        raise DomainError("total rate vanishes; counterdiabatic term undefined")
    return gamma


def sta_rates(t, cfg: ProtocolConfig, base: Callable | None = None) -> RateSet2:
    """Shortcut rates: right-reservoir rates shifted by ``+/- cd_gamma``.

    Raises `UnphysicalRate` instead of clipping when a shifted rate is
    negative.
    """
    base_fn = base or (lambda s: base_rates_2state(s, cfg))
    r0 = base_fn(t)
    g = cd_gamma(t, cfg, base_fn)
    rates = RateSet2(gl_p=r0.gl_p, gl_m=r0.gl_m, gr_p=r0.gr_p + g, gr_m=r0.gr_m - g)
    return rates.check(t)


def sta_breakdown_frequency(cfg: ProtocolConfig, lo=1.0, hi=1e3, samples=2048, rtol=1e-6):
    """Smallest cycling frequency at which the shortcut needs a negative rate.

    Bisection on ``omega`` between ``lo`` (must be physical) and ``hi``
    (must be unphysical), scanning ``samples`` points per period.
    """

    def physical(om):
        c = cfg.replace(omega=om)
        t = c.period * np.arange(samples) / samples
        try:
            sta_rates(t, c)
        except UnphysicalRate:
            return False
        return True

    if not physical(lo):
        raise ValueError(f"shortcut already unphysical at omega={lo}")
    if physical(hi):
        raise ValueError(f"shortcut still physical at omega={hi}")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if physical(mid):
            lo = mid
        else:
            hi = mid
    return hi


def _phase_sine(t, cfg):
    return np.sin(0.5 * cfg.omega * np.asarray(t, dtype=float))


def parametrized_rates_2state(t, f_l, f_r, cfg: ProtocolConfig) -> RateSet2:
    """Square parametrization ``G+ = (sqrt(G0+) + sin(omega t / 2) f)**2``.

    Only the ``+`` rates depend on the controls, and at ``t = 0`` and
    ``t = T`` they reduce to the base protocol.
    """
    r0 = base_rates_2state(t, cfg)
    s = _phase_sine(t, cfg)
    return RateSet2(
        gl_p=(np.sqrt(r0.gl_p) + s * f_l) ** 2,
        gl_m=r0.gl_m,
        gr_p=(np.sqrt(r0.gr_p) + s * f_r) ** 2,
        gr_m=r0.gr_m,
    )


def filling_factor(eps, kbt):
    """Fermi factor ``1 / (1 + exp(-eps / kbt))`` without overflow."""
    if np.any(np.asarray(kbt) <= 0):
        raise ValueError("kbt must be positive")
    x = np.asarray(eps, dtype=float) / kbt
    big = np.abs(x) > 30.0
    xs = np.where(big, 0.0, x)
    mid = 1.0 / (1.0 + np.exp(-xs))
    # |x| > 30: exp(-|x|) is the whole correction
    tail = np.exp(-np.abs(np.where(big, x, 0.0)))
    far = np.where(x > 0, 1.0 / (1.0 + tail), tail / (1.0 + tail))
    out = np.where(big, far, mid)
    return out if out.ndim else float(out)


def spin_energies(u: PhysicalControls, cfg: ProtocolConfig):
    """Return ``(eps_L_up, eps_L_dn, eps_R_up, eps_R_dn)``."""
    z = cfg.zeeman_sign
    return (u.v_l + z * u.ez_l, u.v_l - z * u.ez_l,
            u.v_r + z * u.ez_r, u.v_r - z * u.ez_r)


def rates_3state(t, u: PhysicalControls, cfg: ProtocolConfig) -> RateSet3:
    gl, gr = channel_totals(t, cfg)
    e_lu, e_ld, e_ru, e_rd = spin_energies(u, cfg)
    f = [filling_factor(e, cfg.kbt) for e in (e_lu, e_ld, e_ru, e_rd)]
    return RateSet3(
        l_up_p=f[0] * gl, l_up_m=(1 - f[0]) * gl,
        l_dn_p=f[1] * gl, l_dn_m=(1 - f[1]) * gl,
        r_up_p=f[2] * gr, r_up_m=(1 - f[2]) * gr,
        r_dn_p=f[3] * gr, r_dn_m=(1 - f[3]) * gr,
    )


# ---------------------------------------------------------------------------
# generators and counting operators


def generator(rates, chi=None):
    """Master-equation generator, optionally decorated with counting fields.

    Parameters
    ----------
    rates : RateSet2 or RateSet3
    chi : float or (float, float), optional
        Counting field on the left reservoir (two-state) or the pair
        ``(chi_up, chi_down)`` (three-state).  ``None`` gives the real
        generator ``L_0``.

    Returns
    -------
    ndarray, shape ``(..., d, d)``
    """
    if isinstance(rates, RateSet2):
        return _generator2(rates, chi)
    return _generator3(rates, chi)


def _phases(chi, n):
    if chi is None:
        return (1.0,) * n, (1.0,) * n, float
    chis = np.atleast_1d(np.asarray(chi, dtype=float))
    if chis.size != n:
        raise ValueError(f"expected {n} counting field(s), got {chis.size}")
    return tuple(np.exp(1j * c) for c in chis), tuple(np.exp(-1j * c) for c in chis), complex


def _generator2(r: RateSet2, chi):
    (pin,), (pout,), dtype = _phases(chi, 1)
    a = np.broadcast_arrays(*(np.asarray(getattr(r, n), float) for n in r.names))
    gl_p, gl_m, gr_p, gr_m = a
    L = np.zeros(gl_p.shape + (2, 2), dtype=dtype)
    L[..., 0, 0] = -gl_p - gr_p
    L[..., 0, 1] = gl_m * pout + gr_m
    L[..., 1, 0] = gl_p * pin + gr_p
    L[..., 1, 1] = -gl_m - gr_m
    return L


def _generator3(r: RateSet3, chi):
    (pu, pd), (mu, md), dtype = _phases(chi, 2)
    a = np.broadcast_arrays(*(np.asarray(getattr(r, n), float) for n in r.names))
    lup, lum, ldp, ldm, rup, rum, rdp, rdm = a
    L = np.zeros(lup.shape + (3, 3), dtype=dtype)
    L[..., 0, 0] = -(lup + rup + ldp + rdp)
    L[..., 0, 1] = lum * mu + rum
    L[..., 0, 2] = ldm * md + rdm
    L[..., 1, 0] = lup * pu + rup
    L[..., 1, 1] = -(lum + rum)
    L[..., 2, 0] = ldp * pd + rdp
    L[..., 2, 2] = -(ldm + rdm)
    return L


def current_operators(rates):
    """First and second counting-field derivatives of the generator at zero.

    Two-state: returns ``(J1, J2)`` of shape ``(..., 2, 2)``.
    Three-state: returns ``(J1, J2)`` of shape ``(2, ..., 3, 3)`` where the
    leading axis is the spin (0 = up, 1 = down).
    """
    if isinstance(rates, RateSet2):
        gl_p, gl_m = np.broadcast_arrays(np.asarray(rates.gl_p, float), np.asarray(rates.gl_m, float))
        j1 = np.zeros(gl_p.shape + (2, 2))
        j1[..., 1, 0] = gl_p
        j1[..., 0, 1] = -gl_m
        j2 = np.abs(j1)
        return j1, j2
    a = np.broadcast_arrays(*(np.asarray(getattr(rates, n), float) for n in rates.names))
    lup, lum, ldp, ldm = a[:4]
    j1 = np.zeros((2,) + lup.shape + (3, 3))
    j1[0, ..., 1, 0] = lup
    j1[0, ..., 0, 1] = -lum
    j1[1, ..., 2, 0] = ldp
    j1[1, ..., 0, 2] = -ldm
    return j1, np.abs(j1)


# ---------------------------------------------------------------------------
# control chain rule


def filling_factor_derivative(eps, kbt):
    f = filling_factor(eps, kbt)
    return f * (1.0 - f) / kbt


def rate_sensitivities(t, u, cfg: ProtocolConfig) -> np.ndarray:
    """Jacobian of the rates with respect to the controls.

    ``u`` is either a ``(f_L, f_R)`` pair (square parametrization of the
    two-state pump) or `PhysicalControls`.  Returns an array of shape
    ``(n_rates, n_controls, ...)`` in the `RateSet2.names` /
    `RateSet3.names` row order.
    """
    t = np.asarray(t, dtype=float)
    if isinstance(u, PhysicalControls):
        gl, gr = channel_totals(t, cfg)
        z = cfg.zeeman_sign
        e_lu, e_ld, e_ru, e_rd = spin_energies(u, cfg)
        shape = np.broadcast(t, *u.as_array()).shape
        jac = np.zeros((8, 4) + shape)
        # (row of + rate, channel total, control index of V, d eps / d eps_Z)
        for row, eps, tot, iv, iz, dz in (
            (0, e_lu, gl, 0, 2, z), (2, e_ld, gl, 0, 2, -z),
            (4, e_ru, gr, 1, 3, z), (6, e_rd, gr, 1, 3, -z),
        ):
            d = filling_factor_derivative(eps, cfg.kbt) * tot
            jac[row, iv] = d
            jac[row, iz] = dz * d
            jac[row + 1, iv] = -d
            jac[row + 1, iz] = -dz * d
        return jac
    f_l, f_r = u
    r0 = base_rates_2state(t, cfg)
    s = _phase_sine(t, cfg)
    shape = np.broadcast(t, f_l, f_r).shape
    jac = np.zeros((4, 2) + shape)
    jac[0, 0] = 2.0 * s * (np.sqrt(r0.gl_p) + s * f_l)
    jac[2, 1] = 2.0 * s * (np.sqrt(r0.gr_p) + s * f_r)
    return jac


# ---------------------------------------------------------------------------
# drives: time-dependent rate sources used by propagation and sampling


class Drive:
    """Periodic source of rates.  Subclasses implement ``_rates(phase)``."""

    nstates = 2
    n_controls = 0
    control_names: tuple = ()

    def __init__(self, period: float):
        self.period = float(period)

    def phase(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t <= self.period)
        return np.where(inside, t, np.mod(t, self.period))

    def rates(self, t):
        return self._rates(self.phase(t))

    def _rates(self, phase):
        raise NotImplementedError


class ConstantDrive(Drive):
    """Time-independent rates, with a nominal period for counting."""

    def __init__(self, rates, period: float):
        super().__init__(period)
        rates.check()
        self.nstates = rates.nstates
        self._arr = rates.as_array()
        self._cls = type(rates)

    def _rates(self, phase):
        shape = np.shape(phase)
        return self._cls.from_array(self._arr.reshape(self._arr.shape[:1] + (1,) * len(shape)) * np.ones(shape))


class BareDrive(Drive):
    """Uncorrected two-state cycle `base_rates_2state`."""

    def __init__(self, cfg: ProtocolConfig):
        super().__init__(cfg.period)
        self.cfg = cfg

    def _rates(self, phase):
        return base_rates_2state(phase, self.cfg)


class STADrive(BareDrive):
    """Two-state cycle with the counterdiabatic shortcut on the right."""

    def _rates(self, phase):
        return sta_rates(phase, self.cfg)


class _ControlledDrive(Drive):
    def __init__(self, cfg: ProtocolConfig, controls):
        super().__init__(cfg.period)
        self.cfg = cfg
        controls = np.array(controls, dtype=float)
        if controls.ndim != 2 or controls.shape[0] != self.n_controls:
            raise ValueError(f"controls must have shape ({self.n_controls}, M+1)")
        if controls.shape[1] < 2:
            raise ValueError("need at least two control nodes")
        if not np.all(np.isfinite(controls)):
            raise ValueError("controls must be finite")
        controls.setflags(write=False)
        self.controls = controls

    @property
    def control_times(self):
        m = self.controls.shape[1] - 1
        return self.period * np.arange(m + 1) / m

    def control_values(self, t):
        """Piecewise-linear control waveform at times ``t``; shape ``(n_c, ...)``."""
        ph = self.phase(t)
        nodes = self.control_times
        return np.stack([np.interp(ph, nodes, c) for c in self.controls])

    def with_controls(self, controls):
        return type(self)(self.cfg, controls)

    def rate_jacobian(self, t):
        raise NotImplementedError


class TwoStateControlDrive(_ControlledDrive):
    """Two-state pump whose ``+`` rates follow the square parametrization."""

    nstates = 2
    n_controls = 2
    control_names = ("f_L", "f_R")

    def _rates(self, phase):
        f_l, f_r = self._values(phase)
        return parametrized_rates_2state(phase, f_l, f_r, self.cfg)

    def _values(self, phase):
        nodes = self.control_times
        return [np.interp(phase, nodes, c) for c in self.controls]

    def rate_jacobian(self, t):
        ph = self.phase(t)
        return rate_sensitivities(ph, tuple(self._values(ph)), self.cfg)


class SpinDrive(_ControlledDrive):
    """Three-state spin pump driven by gate voltages and Zeeman energies."""

    nstates = 3
    n_controls = 4
    control_names = PhysicalControls.names

    def _rates(self, phase):
        return rates_3state(phase, self._values(phase), self.cfg)

    def _values(self, phase):
        nodes = self.control_times
        return PhysicalControls(*(np.interp(phase, nodes, c) for c in self.controls))

    def rate_jacobian(self, t):
        ph = self.phase(t)
        return rate_sensitivities(ph, self._values(ph), self.cfg)


def control_nodes(cfg: ProtocolConfig, m: int):
    return cfg.period * np.arange(m + 1) / m


def initial_two_state_controls(cfg: ProtocolConfig, m: int, f_l=0.0, f_r=0.0):
    out = np.zeros((2, m + 1))
    out[0] = f_l
    out[1] = f_r
    return out


def initial_spin_controls(cfg: ProtocolConfig, m: int, v_amp=0.1, ez_l=0.05, ez_r=0.05):
    """Voltages ``v_amp*V0*(cos, sin)(omega t)``, constant Zeeman energies.

    Defaults reproduce the starting cycle of the spin-pump experiments:
    ``V0/10`` voltage amplitude and ``V0/20`` Zeeman energies.
    """
    t = control_nodes(cfg, m)
    wt = cfg.omega * t
    v0 = cfg.v0
    return np.stack([
        v_amp * v0 * np.cos(wt),
        v_amp * v0 * np.sin(wt),
        np.full_like(t, ez_l * v0),
        np.full_like(t, ez_r * v0),
    ])
