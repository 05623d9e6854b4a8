"""Adjoint-gradient optimisation of periodic pumping controls.

The cost of a cycle is ``C[u] = int f0(x, u) dt`` over the counting period.
With the Pontryagin Hamiltonian ``H = -f0 + v . (L x)`` the adjoint obeys

    dv/dt = d f0/dx - L^T v,        v(t0 + T) = 0,

and ``dH/du = -df0/du + v . d(Lx)/du`` is minus the functional derivative
of ``C``.  Controls are pushed along this direction with a step profile
``eps(t) = eps0 sin(pi t / T)`` that vanishes at both ends of the period.

The counting period starts from the warm-up state, which itself depends on
the controls.  By default the adjoint of the probability block is carried
back through the warm-up periods as well, so the gradient is the derivative
of the cost exactly as it is evaluated.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import FcsPumpError, NumericBlowup
from .fcs import CycleMoments, cycle_moments, flows_2state, flows_2state_dx, flows_3state, flows_3state_dx, trapezoid
from .models import RateSet2, rateset_class
from .propagation import (
    PeriodOperators, TimeGrid, TrajectoryRecord, build_augmented_generator, chain_backward,
    propagate_period, rk4_maps,
)

log = logging.getLogger(__name__)

ADJOINT_LIMIT = 1e9


class Scenario(str, enum.Enum):
    TWO_STATE = "two_state"
    SPIN_PUMP = "spin_pump"
    DECORRELATE = "decorrelate"


@dataclass(frozen=True)
class CostWeights:
    """Weights of the running cost.

    ``two_state``:   ``f0 = w1 i + w2 s``
    ``spin_pump``:   ``f0 = w1 i_delta + w2 i_sigma**2 + w3 s_updown``
    ``decorrelate``: ``f0 = w1 s_n + w2 s_updown``
    """

    w1: float
    w2: float
    w3: float = 0.0
    scenario: Scenario = Scenario.TWO_STATE

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))

    def validate(self):
        s = self.scenario
        if s is Scenario.TWO_STATE and not self.w2 > 0:
            raise ValueError("two_state needs w2 > 0")
        if s is Scenario.SPIN_PUMP and not (self.w2 > 0 and self.w3 > 0):
            raise ValueError("spin_pump needs w2 > 0 and w3 > 0")
        if s is Scenario.DECORRELATE and not (self.w1 > 0 and self.w2 < 0):
            raise ValueError("decorrelate needs w1 > 0 and w2 < 0")
        return self

    @property
    def nstates(self):
        return 2 if self.scenario is Scenario.TWO_STATE else 3


def cost_rate(x, rates, w: CostWeights):
    """Running cost ``f0`` at states ``x`` (``(..., D)``) and matching rates."""
    if w.scenario is Scenario.TWO_STATE:
        fl = flows_2state(x, rates)
        return w.w1 * fl.i + w.w2 * fl.s
    fl = flows_3state(x, rates)
    if w.scenario is Scenario.SPIN_PUMP:
        return w.w1 * fl.i_delta + w.w2 * fl.i_sigma ** 2 + w.w3 * fl.s_updown
    return w.w1 * fl.s_n + w.w2 * fl.s_updown


def _unit_rates(rates):
    """Yield ``(row, unit RateSet)`` with a single rate equal to one."""
    cls = type(rates)
    n = len(cls.names)
    for r in range(n):
        e = np.zeros(n)
        e[r] = 1.0
        yield r, cls.from_array(e)


def cost_gradients(x, rates, w: CostWeights):
    """Closed-form partials of ``f0``.

    Returns ``(df0/dx, df0/drates)`` with shapes ``(..., D)`` and
    ``(n_rates, ...)``; the rate axis follows ``type(rates).names``.
    Every flow is linear in the rates, so its rate derivative is the flow
    evaluated at a unit rate vector.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    if w.scenario is Scenario.TWO_STATE:
        di, ds = flows_2state_dx(x, rates)
        dx = w.w1 * di + w.w2 * ds
        drates = np.zeros((4,) + shape)
        for r, unit in _unit_rates(rates):
            fl = flows_2state(x, unit)
            drates[r] = w.w1 * fl.i + w.w2 * fl.s
        return dx, drates
    g_id, g_is, g_sud, g_sn = flows_3state_dx(x, rates)
    drates = np.zeros((8,) + shape)
    if w.scenario is Scenario.SPIN_PUMP:
        i_sigma = flows_3state(x, rates).i_sigma
        dx = w.w1 * g_id + 2 * w.w2 * i_sigma[..., None] * g_is + w.w3 * g_sud
        for r, unit in _unit_rates(rates):
            fl = flows_3state(x, unit)
            drates[r] = w.w1 * fl.i_delta + 2 * w.w2 * i_sigma * fl.i_sigma + w.w3 * fl.s_updown
        return dx, drates
    dx = w.w1 * g_sn + w.w2 * g_sud
    for r, unit in _unit_rates(rates):
        fl = flows_3state(x, unit)
        drates[r] = w.w1 * fl.s_n + w.w2 * fl.s_updown
    return dx, drates


def total_cost(traj: TrajectoryRecord, w: CostWeights) -> float:
    return trapezoid(cost_rate(traj.states, traj.rates, w), traj.grid.dt)


def _rate_basis(nstates):
    """Augmented generators of unit rate vectors, ``(n_rates, D, D)``."""
    cls = rateset_class(nstates)
    n = len(cls.names)
    return build_augmented_generator(cls.from_array(np.eye(n)))


def hermite_midpoints(states, a_nodes, dt):
    """Cubic Hermite interpolation of the state at step midpoints."""
    xdot = np.einsum("nij,nj->ni", a_nodes, states)
    return 0.5 * (states[:-1] + states[1:]) + dt / 8.0 * (xdot[:-1] - xdot[1:])


@dataclass(frozen=True)
class AdjointRecord:
    """Adjoint at the counting-period nodes, plus its probability block
    carried through the warm-up periods (``None`` if not requested)."""

    v: np.ndarray
    v_warmup: np.ndarray | None = None


def _backward_maps(a_nodes, a_mids, dt, b_nodes=None, b_mids=None):
    at_nodes = np.swapaxes(a_nodes, -1, -2)
    at_mids = np.swapaxes(a_mids, -1, -2)
    if b_nodes is None:
        return rk4_maps(at_nodes[1:], at_mids, at_nodes[:-1], dt)
    return rk4_maps(at_nodes[1:], at_mids, at_nodes[:-1], dt,
                    -b_nodes[1:], -b_mids, -b_nodes[:-1])


def adjoint_backprop(traj: TrajectoryRecord, w: CostWeights, through_warmup=True) -> AdjointRecord:
    """Integrate ``dv/dt = df0/dx - L^T v`` backwards from ``v(t0 + T) = 0``.

    Uses RK4 on the same grid in reverse; states at step midpoints come
    from cubic Hermite interpolation of the stored nodes.
    """
    dt = traj.grid.dt
    x = traj.states
    x_mid = hermite_midpoints(x, traj.a_nodes, dt)
    b_nodes, _ = cost_gradients(x, traj.rates, w)
    b_mids, _ = cost_gradients(x_mid, traj.mid_rates, w)
    psi, c = _backward_maps(traj.a_nodes, traj.a_mids, dt, b_nodes, b_mids)
    v = chain_backward(psi, c, np.zeros(x.shape[1]))
    if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > ADJOINT_LIMIT:
        raise NumericBlowup("adjoint exceeded its bound")
    v_warm = None
    if through_warmup and traj.warmup is not None and traj.grid.n_warmup > 0:
        d = traj.nstates
        psi_p, _ = _backward_maps(traj.a_nodes[:, :d, :d], traj.a_mids[:, :d, :d], dt)
        n0 = traj.grid.n_warmup
        v_warm = np.empty((n0, traj.grid.M + 1, d))
        vp = v[0, :d]
        for k in range(n0 - 1, -1, -1):
            v_warm[k] = chain_backward(psi_p, np.zeros((psi_p.shape[0], d)), vp)
            vp = v_warm[k, 0]
    return AdjointRecord(v=v, v_warmup=v_warm)


def control_gradient(traj: TrajectoryRecord, adjoint: AdjointRecord, w: CostWeights) -> np.ndarray:
    """``dH/du`` at every grid node, shape ``(n_controls, M + 1)``.

    Contributions of the warm-up periods (when present on ``adjoint``) are
    accumulated at the same phase node.  For interior nodes
    ``dC/du_j = -g_j * dt``.
    """
    drive = traj.drive
    if not getattr(drive, "n_controls", 0):
        raise ValueError("drive has no controls")
    nodes = traj.grid.nodes
    jac = drive.rate_jacobian(nodes)                     # (n_rates, n_c, M+1)
    basis = _rate_basis(traj.nstates)                    # (n_rates, D, D)
    _, df_drates = cost_gradients(traj.states, traj.rates, w)
    dh_drates = -df_drates + np.einsum("ti,rij,tj->rt", adjoint.v, basis, traj.states)
    if adjoint.v_warmup is not None:
        d = traj.nstates
        basis_p = basis[:, :d, :d]
        for vp, p in zip(adjoint.v_warmup, traj.warmup.states):
            dh_drates += np.einsum("ti,rij,tj->rt", vp, basis_p, p)
    return np.einsum("rt,rct->ct", dh_drates, jac)


def step_profile(grid: TimeGrid, eps0: float) -> np.ndarray:
    """``eps0 sin(pi t / T)`` on the nodes with both endpoints exactly zero."""
    prof = eps0 * np.sin(np.pi * np.arange(grid.M + 1) / grid.M)
    prof[0] = prof[-1] = 0.0
    return prof


def normalized_direction(g: np.ndarray) -> np.ndarray:
    """Scale each control row of ``g`` by its largest magnitude."""
    scale = np.max(np.abs(g), axis=-1, keepdims=True)
    return np.divide(g, scale, out=np.zeros_like(g), where=scale > 0)


@dataclass
class Evaluation:
    traj: TrajectoryRecord
    cost: float
    moments: CycleMoments


def evaluate(drive, grid: TimeGrid, w: CostWeights) -> Evaluation:
    """Warm-up, counting period, cost and moments for one control set."""
    ops = PeriodOperators.build(drive, grid)
    traj = propagate_period(drive, grid, ops=ops)
    return Evaluation(traj, total_cost(traj, w), cycle_moments(traj))


def cost_of(drive, grid, w) -> float:
    return evaluate(drive, grid, w).cost


@dataclass
class OptimizationReport:
    """Per-iteration history; index 0 is the starting cycle."""

    weights: CostWeights
    costs: list = field(default_factory=list)
    moments: list = field(default_factory=list)
    step_scales: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    drive: object = None
    final: Evaluation | None = None
    stopped_early: bool = False

    @property
    def iterations(self) -> int:
        return len(self.costs) - 1

    @property
    def controls(self):
        return self.drive.controls

    def to_dict(self):
        return {
            "scenario": self.weights.scenario.value,
            "weights": [self.weights.w1, self.weights.w2, self.weights.w3],
            "iterations": self.iterations,
            "stopped_early": self.stopped_early,
            "costs": [float(c) for c in self.costs],
            "step_scales": [float(s) for s in self.step_scales],
            "moments": [m.to_dict() for m in self.moments],
        }


def optimize(drive, grid: TimeGrid, w: CostWeights, eps0: float, iterations: int = 100, *,
             normalize: bool = True, through_warmup: bool = True, snapshot_every: int = 10,
             backtrack: bool = False, max_halvings: int = 30, tol: float | None = None,
             callback=None) -> OptimizationReport:
    """Iterate adjoint-gradient updates of the controls of ``drive``.

    Each iteration re-runs the warm-up under the current controls, evaluates
    the cycle, integrates the adjoint and moves the controls by
    ``eps(t) * g / max|g|`` (``eps(t) * g`` with ``normalize=False``).
    With ``backtrack`` the step is halved until the cost does not increase.
    With ``tol`` the loop stops once ``|dC| < tol``.
    """
    w.validate()
    if w.nstates != drive.nstates:
        raise ValueError("weights scenario does not match the drive")
    if drive.controls.shape[1] != grid.M + 1:
        raise ValueError("control grid must have M + 1 nodes")
    profile = step_profile(grid, eps0)
    report = OptimizationReport(weights=w)

    def run(d, k):
        try:
            return evaluate(d, grid, w)
        except FcsPumpError as exc:
            exc.iteration = k
            raise

    cur = run(drive, 0)
    for k in range(iterations + 1):
        report.costs.append(cur.cost)
        report.moments.append(cur.moments)
        if snapshot_every and k % snapshot_every == 0:
            report.snapshots[k] = drive.controls.copy()
        if callback is not None:
            callback(k, cur)
        if k == iterations:
            break
        adj = adjoint_backprop(cur.traj, w, through_warmup=through_warmup)
        g = control_gradient(cur.traj, adj, w)
        direction = normalized_direction(g) if normalize else g
        scale = 1.0
        while True:
            new_controls = drive.controls + scale * profile * direction
            new_controls[:, 0] = drive.controls[:, 0]
            new_controls[:, -1] = drive.controls[:, -1]
            cand_drive = drive.with_controls(new_controls)
            cand = run(cand_drive, k + 1)
            if not backtrack or cand.cost <= cur.cost or scale < 0.5 ** max_halvings:
                break
            scale *= 0.5
        report.step_scales.append(scale)
        log.debug("iteration %d: cost %.10g -> %.10g", k + 1, cur.cost, cand.cost)
        done = tol is not None and abs(cand.cost - cur.cost) < tol
        drive, cur = cand_drive, cand
        if done:
            report.costs.append(cur.cost)
            report.moments.append(cur.moments)
            report.stopped_early = True
            break
    report.drive = drive
    report.final = cur
    if snapshot_every:
        report.snapshots[report.iterations] = drive.controls.copy()
    return report


def decorrelate(drive, grid: TimeGrid, w: CostWeights | None = None, eps0: float = 4.0,
                iterations: int = 100, **kwargs) -> OptimizationReport:
    """Drive charge and spin fluctuations apart with ``f0 = w1 s_n + w2 s_updown``."""
    w = w or CostWeights(2.0, -2.0, 0.0, Scenario.DECORRELATE)
    if w.scenario is not Scenario.DECORRELATE:
        raise ValueError("decorrelate needs decorrelate weights")
    return optimize(drive, grid, w, eps0, iterations, **kwargs)


def fd_directional_derivative(drive, grid: TimeGrid, w: CostWeights, direction, h=1e-6) -> float:
    """Central difference of ``C[u + s * direction]`` at ``s = 0``."""
    base = drive.controls
    cp = cost_of(drive.with_controls(base + h * direction), grid, w)
    cm = cost_of(drive.with_controls(base - h * direction), grid, w)
    return (cp - cm) / (2 * h)


def adjoint_directional_derivative(g: np.ndarray, grid: TimeGrid, direction) -> float:
    """``dC`` along ``direction`` predicted from ``g = dH/du`` (trapezoid weights)."""
    wts = np.full(grid.M + 1, grid.dt)
    wts[0] = wts[-1] = 0.5 * grid.dt
    return float(-np.sum(g * direction * wts))


__all__ = [
    "Scenario", "CostWeights", "cost_rate", "cost_gradients", "total_cost", "AdjointRecord",
    "adjoint_backprop", "control_gradient", "step_profile", "optimize", "decorrelate",
    "OptimizationReport", "evaluate", "fd_directional_derivative", "adjoint_directional_derivative",
    "RateSet2",
]
