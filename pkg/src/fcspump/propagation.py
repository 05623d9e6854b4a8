"""Fixed-step RK4 integration of the augmented counting master equations.

The augmented state stacks the probability vector ``p`` with its
counting-field sensitivities: ``(p, pbar)`` for the two-state system and
``(p, pbar_up, pbar_down)`` for the spin model.  Because every generator is
linear in the state, one classical RK4 step over ``[t_j, t_j + h]`` is a
matrix ``Phi_j`` that depends only on the generator at the start, midpoint
and end of the step.  The per-step matrices are assembled in one batched
pass and then chained, which is algebraically identical to running
`step_rk4` node by node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateKernel, NumericBlowup
from .models import Drive, RateSet2, RateSet3, current_operators, generator

BLOWUP_LIMIT = 1e6


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``M`` steps per period and ``n_warmup`` relaxation periods."""

    period: float
    M: int = 4096
    n_warmup: int = 3

    def __post_init__(self):
        if self.M < 256:
            raise ValueError(f"M must be >= 256, got {self.M}")
        if self.n_warmup < 0:
            raise ValueError("n_warmup must be >= 0")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def dt(self) -> float:
        return self.period / self.M

    @property
    def nodes(self) -> np.ndarray:
        return self.period * np.arange(self.M + 1) / self.M

    @property
    def mids(self) -> np.ndarray:
        return self.period * (np.arange(self.M) + 0.5) / self.M

    @property
    def t0(self) -> float:
        return self.n_warmup * self.period


def augmented_dim(nstates: int) -> int:
    return {2: 4, 3: 9}[nstates]


def build_augmented_generator(rates) -> np.ndarray:
    """Block lower-triangular generator acting on ``(p, pbar...)``.

    ``L4 = [[L0, 0], [J1, L0]]`` for `RateSet2`, and
    ``L9 = [[L0, 0, 0], [J1_up, L0, 0], [J1_dn, 0, L0]]`` for `RateSet3`.
    """
    L0 = generator(rates)
    j1, _ = current_operators(rates)
    d = L0.shape[-1]
    if isinstance(rates, RateSet2):
        blocks = [j1]
    else:
        blocks = [j1[0], j1[1]]
    n = 1 + len(blocks)
    out = np.zeros(L0.shape[:-2] + (n * d, n * d))
    for k in range(n):
        out[..., k * d:(k + 1) * d, k * d:(k + 1) * d] = L0
    for k, j in enumerate(blocks, start=1):
        out[..., k * d:(k + 1) * d, :d] = j
    return out


def operator_for(rates, dim: int, chi=None) -> np.ndarray:
    """Generator acting on a state of length ``dim`` (plain or augmented)."""
    if dim == rates.nstates:
        return generator(rates, chi)
    if chi is not None:
        raise ValueError("counting fields apply to the plain probability vector only")
    return build_augmented_generator(rates)


def step_rk4(x, t, dt, rates_at, chi=None):
    """One classical RK4 step of ``dx/dt = L(t) x``.

    The generator is rebuilt from ``rates_at`` at ``t``, ``t + dt/2`` and
    ``t + dt``.
    """
    x = np.asarray(x)
    a1 = operator_for(rates_at(t), x.shape[-1], chi)
    a2 = operator_for(rates_at(t + 0.5 * dt), x.shape[-1], chi)
    a3 = operator_for(rates_at(t + dt), x.shape[-1], chi)
    k1 = a1 @ x
    k2 = a2 @ (x + 0.5 * dt * k1)
    k3 = a2 @ (x + 0.5 * dt * k2)
    k4 = a3 @ (x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_maps(a_start, a_mid, a_end, h, b_start=None, b_mid=None, b_end=None):
    """Affine maps ``y_next = Phi y + c`` of RK4 steps of ``y' = A(s) y + b(s)``.

    All arguments are stacked over steps: matrices ``(n, D, D)``, vectors
    ``(n, D)``.  Returns ``Phi`` and ``c`` (``None`` when no forcing is given).
    """
    eye = np.eye(a_start.shape[-1], dtype=a_start.dtype)
    b1 = a_start
    b2 = a_mid @ (eye + 0.5 * h * b1)
    b3 = a_mid @ (eye + 0.5 * h * b2)
    b4 = a_end @ (eye + h * b3)
    phi = eye + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
    if b_start is None:
        return phi, None
    k1 = b_start
    k2 = np.einsum("nij,nj->ni", a_mid, 0.5 * h * k1) + b_mid
    k3 = np.einsum("nij,nj->ni", a_mid, 0.5 * h * k2) + b_mid
    k4 = np.einsum("nij,nj->ni", a_end, h * k3) + b_end
    c = (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return phi, c


def chain_forward(phi, x0):
    """States ``x_0 .. x_n`` with ``x_{j+1} = Phi_j x_j``."""
    out = np.empty((phi.shape[0] + 1,) + x0.shape, dtype=np.result_type(phi, x0))
    out[0] = x0
    x = out[0]
    for j in range(phi.shape[0]):
        x = phi[j] @ x
        out[j + 1] = x
    return out


def chain_backward(psi, c, v_end):
    """States ``v_0 .. v_n`` with ``v_j = Psi_j v_{j+1} + c_j`` and ``v_n = v_end``."""
    n = psi.shape[0]
    out = np.empty((n + 1,) + v_end.shape)
    out[n] = v_end
    v = out[n]
    for j in range(n - 1, -1, -1):
        v = psi[j] @ v + c[j]
        out[j] = v
    return out


@dataclass
class PeriodOperators:
    """Rates, generators and RK4 maps of one period on a `TimeGrid`."""

    drive: Drive
    grid: TimeGrid
    rates: object
    mid_rates: object
    a_nodes: np.ndarray
    a_mids: np.ndarray
    phi: np.ndarray

    @classmethod
    def build(cls, drive: Drive, grid: TimeGrid) -> "PeriodOperators":
        if abs(grid.period - drive.period) > 1e-12 * drive.period:
            raise ValueError("grid period does not match the drive period")
        rates = drive.rates(grid.nodes)
        mid_rates = drive.rates(grid.mids)
        rates.check(grid.nodes)
        mid_rates.check(grid.mids)
        a_nodes = build_augmented_generator(rates)
        a_mids = build_augmented_generator(mid_rates)
        phi, _ = rk4_maps(a_nodes[:-1], a_mids, a_nodes[1:], grid.dt)
        return cls(drive, grid, rates, mid_rates, a_nodes, a_mids, phi)

    @property
    def nstates(self) -> int:
        return self.drive.nstates

    @property
    def phi_p(self) -> np.ndarray:
        d = self.nstates
        return self.phi[:, :d, :d]


@dataclass(frozen=True)
class Warmup:
    """Relaxation result at the counting start ``t0 = n_warmup * T``."""

    p: np.ndarray
    x0: np.ndarray
    p_init: np.ndarray
    states: np.ndarray = field(repr=False)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP_LIMIT:
        raise NumericBlowup(f"{what} exceeded {BLOWUP_LIMIT:g}; check for negative rates")


def warmup(drive: Drive, grid: TimeGrid, p_init=None, ops: PeriodOperators | None = None) -> Warmup:
    """Propagate ``p`` alone for ``n_warmup`` periods from ``p_init``.

    ``p_init`` defaults to the uniform distribution.  The returned augmented
    state has every sensitivity block set to zero.
    """
    ops = ops or PeriodOperators.build(drive, grid)
    d = drive.nstates
    p = np.full(d, 1.0 / d) if p_init is None else np.asarray(p_init, dtype=float).copy()
    if p.shape != (d,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
        raise ValueError("p_init must be a probability vector")
    p_init = p.copy()
    states = np.empty((grid.n_warmup, grid.M + 1, d))
    phi_p = ops.phi_p
    for k in range(grid.n_warmup):
        states[k] = chain_forward(phi_p, p)
        p = states[k, -1]
    _check_finite(p, "warm-up state")
    x0 = np.zeros(augmented_dim(d))
    x0[:d] = p
    return Warmup(p=p.copy(), x0=x0, p_init=p_init, states=states)


@dataclass(frozen=True)
class TrajectoryRecord:
    """Augmented states over one counting period ``[t0, t0 + T]``."""

    drive: Drive
    grid: TimeGrid
    times: np.ndarray
    states: np.ndarray
    rates: object
    mid_rates: object
    a_nodes: np.ndarray = field(repr=False)
    a_mids: np.ndarray = field(repr=False)
    controls: np.ndarray | None = None
    warmup: Warmup | None = field(default=None, repr=False)

    @property
    def nstates(self) -> int:
        return self.drive.nstates

    @property
    def p(self) -> np.ndarray:
        return self.states[:, : self.nstates]


def propagate_period(drive: Drive, grid: TimeGrid, x0=None, ops: PeriodOperators | None = None,
                     p_init=None) -> TrajectoryRecord:
    """Integrate the augmented system over one counting period.

    When ``x0`` is omitted the warm-up is run first and kept on the record
    (the optimizer differentiates through it).
    """
    ops = ops or PeriodOperators.build(drive, grid)
    wu = None
    if x0 is None:
        wu = warmup(drive, grid, p_init, ops)
        x0 = wu.x0
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (augmented_dim(drive.nstates),):
        raise ValueError("x0 has the wrong dimension")
    states = chain_forward(ops.phi, x0)
    _check_finite(states, "augmented state")
    controls = None
    if getattr(drive, "n_controls", 0):
        controls = drive.control_values(grid.nodes)
    return TrajectoryRecord(
        drive=drive, grid=grid, times=grid.t0 + grid.nodes, states=states,
        rates=ops.rates, mid_rates=ops.mid_rates, a_nodes=ops.a_nodes, a_mids=ops.a_mids,
        controls=controls, warmup=wu,
    )


def run_cycle(drive: Drive, grid: TimeGrid, p_init=None) -> TrajectoryRecord:
    """Warm-up followed by one stored counting period."""
    return propagate_period(drive, grid, p_init=p_init)


def propagate_with_field(drive: Drive, grid: TimeGrid, chi, p0=None) -> complex:
    """Characteristic function ``phi(chi) = sum(p(chi, t0 + T))``.

    ``p0`` is the counting-start distribution; by default it comes from
    `warmup`.
    """
    if p0 is None:
        p0 = warmup(drive, grid).p
    rates = drive.rates(grid.nodes)
    mids = drive.rates(grid.mids)
    a_nodes = generator(rates, chi)
    a_mids = generator(mids, chi)
    phi, _ = rk4_maps(a_nodes[:-1], a_mids, a_nodes[1:], grid.dt)
    x = np.asarray(p0, dtype=complex)
    for j in range(phi.shape[0]):
        x = phi[j] @ x
    _check_finite(np.abs(x), "counting-field state")
    return complex(x.sum())


def stationary_dist(rates) -> np.ndarray:
    """Kernel of ``L0`` normalised to unit sum (single rate set)."""
    if isinstance(rates, RateSet2):
        total = float(rates.total)
        if not total > 0:
            raise DegenerateKernel("all rates vanish")
        return np.array([float(rates.total_out), float(rates.total_in)]) / total
    L0 = generator(rates)
    if L0.ndim != 2:
        raise ValueError("stationary_dist expects scalar rates")
    kernel = scipy.linalg.null_space(L0, rcond=1e-12)
    if kernel.shape[1] != 1:
        raise DegenerateKernel(f"kernel dimension {kernel.shape[1]} != 1")
    v = kernel[:, 0]
    return v / v.sum()


__all__ = [
    "TimeGrid", "build_augmented_generator", "step_rk4", "rk4_maps", "chain_forward",
    "chain_backward", "PeriodOperators", "Warmup", "warmup", "TrajectoryRecord",
    "propagate_period", "run_cycle", "propagate_with_field", "stationary_dist",
    "augmented_dim",
]
