"""Monte-Carlo sampling of jump trajectories by thinning.

Candidate jump times are drawn from a homogeneous Poisson process with rate
``gamma_max`` over the counting window.  A candidate at time ``t`` in state
``s`` is accepted with probability ``exit_rate(s, t) / gamma_max``; the same
uniform selects the channel in proportion to the instantaneous channel
rates.  The result is exact in distribution for any bounded time-dependent
rates.

Trajectory ``i`` draws from its own stream seeded by
``SeedSequence(seed, spawn_key=(i,))``, so results do not depend on how
trajectories are split into batches or processes.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BoundViolated
from .models import ConstantDrive, Drive, rateset_class
from .propagation import TimeGrid, stationary_dist, warmup

BOUND_MARGIN = 1.01


@dataclass(frozen=True)
class Channel:
    """One transition: rate name, endpoints and its effect on the counts."""

    rate: str
    source: int
    target: int
    reservoir: str
    direction: int
    spin: str | None = None

    @property
    def label(self):
        tag = f"{self.reservoir}{'+' if self.direction > 0 else '-'}"
        return tag if self.spin is None else f"{tag}{self.spin}"

    @property
    def counted(self):
        return self.reservoir == "L"


CHANNELS = {
    2: (
        Channel("gl_p", 0, 1, "L", +1),
        Channel("gr_p", 0, 1, "R", +1),
        Channel("gl_m", 1, 0, "L", -1),
        Channel("gr_m", 1, 0, "R", -1),
    ),
    3: (
        Channel("l_up_p", 0, 1, "L", +1, "up"),
        Channel("l_dn_p", 0, 2, "L", +1, "dn"),
        Channel("r_up_p", 0, 1, "R", +1, "up"),
        Channel("r_dn_p", 0, 2, "R", +1, "dn"),
        Channel("l_up_m", 1, 0, "L", -1, "up"),
        Channel("r_up_m", 1, 0, "R", -1, "up"),
        Channel("l_dn_m", 2, 0, "L", -1, "dn"),
        Channel("r_dn_m", 2, 0, "R", -1, "dn"),
    ),
}


class _ChannelTable:
    """Index arrays mapping rate rows to per-state channel lists."""

    def __init__(self, nstates, names):
        self.channels = CHANNELS[nstates]
        self.nstates = nstates
        row = {n: k for k, n in enumerate(names)}
        self.by_state = []
        for s in range(nstates):
            idx = [c for c, ch in enumerate(self.channels) if ch.source == s]
            self.by_state.append((np.array(idx), np.array([row[self.channels[c].rate] for c in idx])))
        # per-state, per-channel count increments (n_up, n_dn) or (n,)
        self.deltas = np.zeros((len(self.channels), 2), dtype=np.int64)
        for c, ch in enumerate(self.channels):
            if ch.counted:
                self.deltas[c, 1 if ch.spin == "dn" else 0] = ch.direction
        self.targets = np.array([ch.target for ch in self.channels])

    def exit_rates(self, rate_rows):
        """Exit rate of every state, shape ``(nstates, ...)``."""
        return np.stack([rate_rows[rows].sum(axis=0) for _, rows in self.by_state])


@dataclass(frozen=True)
class JumpTrajectory:
    """Accepted jumps inside ``[t_start, t_end]``."""

    t_start: float
    t_end: float
    initial_state: int
    times: np.ndarray
    from_states: np.ndarray
    to_states: np.ndarray
    channels: np.ndarray
    n_up: int
    n_dn: int = 0
    n_proposed: int = 0
    nstates: int = 2

    @property
    def n(self) -> int:
        return self.n_up + self.n_dn

    @property
    def s(self) -> int:
        return self.n_up - self.n_dn

    @property
    def final_state(self) -> int:
        return int(self.to_states[-1]) if self.to_states.size else self.initial_state

    def channel_labels(self):
        table = CHANNELS[self.nstates]
        return [table[c].label for c in self.channels]

    def occupation(self, state: int) -> float:
        """Fraction of the window spent in ``state``."""
        edges = np.concatenate([[self.t_start], self.times, [self.t_end]])
        states = np.concatenate([[self.initial_state], self.to_states])
        return float(np.sum(np.diff(edges)[states == state]) / (self.t_end - self.t_start))


def rate_bound(drive: Drive, grid: TimeGrid, margin: float = BOUND_MARGIN) -> float:
    """Largest state exit rate on the grid nodes and midpoints, times ``margin``."""
    t = np.concatenate([grid.nodes, grid.mids])
    rates = drive.rates(t)
    table = _ChannelTable(drive.nstates, rates.names)
    return float(margin * table.exit_rates(rates.as_array()).max())


def initial_distribution(drive: Drive, grid: TimeGrid) -> np.ndarray:
    """Counting-start distribution used by the ODE pipeline."""
    if isinstance(drive, ConstantDrive):
        return stationary_dist(drive.rates(0.0))
    return warmup(drive, grid).p


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def sample_trajectory(drive: Drive, grid: TimeGrid, seed: int, index: int = 0, *,
                      gamma_max: float | None = None, p0=None) -> JumpTrajectory:
    """Sample one counting period of the jump process by thinning."""
    if gamma_max is None:
        gamma_max = rate_bound(drive, grid)
    if p0 is None:
        p0 = initial_distribution(drive, grid)
    return _sample(drive, grid, trajectory_rng(seed, index), gamma_max, np.asarray(p0, float), None)


def _sample(drive, grid, rng, gamma_max, p0, table):
    period = grid.period
    t0 = grid.t0
    p0 = np.clip(p0, 0.0, None)
    state = int(rng.choice(p0.size, p=p0 / p0.sum()))
    initial = state
    k = rng.poisson(gamma_max * period) if gamma_max > 0 else 0
    phases = np.sort(rng.uniform(0.0, period, size=k))
    marks = rng.uniform(0.0, gamma_max, size=k)
    counts = np.zeros(2, dtype=np.int64)
    times, froms, tos, chans = [], [], [], []
    if k:
        rates = drive.rates(phases)
        table = table or _ChannelTable(drive.nstates, rates.names)
        rows = rates.as_array()
        for j in range(k):
            idx, rrows = table.by_state[state]
            cum = np.cumsum(rows[rrows, j])
            if cum[-1] > gamma_max:
                raise BoundViolated(
                    f"exit rate {cum[-1]:.6g} exceeds bound {gamma_max:.6g} at t = {t0 + phases[j]:.6g}"
                )
            pick = int(np.searchsorted(cum, marks[j], side="right"))
            if pick == cum.size:
                continue
            c = int(idx[pick])
            counts += table.deltas[c]
            times.append(t0 + phases[j])
            froms.append(state)
            state = int(table.targets[c])
            tos.append(state)
            chans.append(c)
    return JumpTrajectory(
        t_start=t0, t_end=t0 + period, initial_state=initial,
        times=np.array(times, dtype=float), from_states=np.array(froms, dtype=np.int64),
        to_states=np.array(tos, dtype=np.int64), channels=np.array(chans, dtype=np.int64),
        n_up=int(counts[0]), n_dn=int(counts[1]), n_proposed=int(k), nstates=drive.nstates,
    )


@dataclass(frozen=True)
class SampleStats:
    """Mean and variance of a per-cycle count with standard errors.

    ``se_variance`` is the delta-method error ``sqrt((m4 - var**2) / n)``.
    """

    name: str
    n_traj: int
    mean: float
    variance: float
    se_mean: float
    se_variance: float
    seed: int

    @classmethod
    def from_samples(cls, name, x, seed):
        x = np.asarray(x, dtype=float)
        n = x.size
        if n < 1:
            raise ValueError("need at least one trajectory")
        mean = float(np.mean(x))
        dev = x - mean
        var = float(np.sum(dev ** 2) / max(n - 1, 1))
        m4 = float(np.mean(dev ** 4))
        return cls(name, n, mean, var, float(np.sqrt(var / n)),
                   float(np.sqrt(max(m4 - var ** 2, 0.0) / n)), int(seed))

    def z_scores(self, mean, variance):
        """``(mean, variance)`` deviations from reference values in units of SE."""
        zm = (self.mean - mean) / self.se_mean if self.se_mean > 0 else np.inf * (self.mean != mean)
        zv = ((self.variance - variance) / self.se_variance
              if self.se_variance > 0 else np.inf * (self.variance != variance))
        return float(zm), float(zv)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class OracleResult:
    n: SampleStats
    s: SampleStats | None = None
    acceptance: float = 1.0
    gamma_max: float = 0.0
    n_up: np.ndarray = field(default=None, repr=False)
    n_dn: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        out = {"n": self.n.to_dict(), "acceptance": self.acceptance, "gamma_max": self.gamma_max}
        if self.s is not None:
            out["s"] = self.s.to_dict()
        return out


def _batch(args):
    drive, grid, seed, start, stop, gamma_max, p0 = args
    table = _ChannelTable(drive.nstates, rateset_class(drive.nstates).names)
    out = np.empty((stop - start, 4), dtype=np.int64)
    for i in range(start, stop):
        tr = _sample(drive, grid, trajectory_rng(seed, i), gamma_max, p0, table)
        out[i - start] = (tr.n_up, tr.n_dn, tr.channels.size, tr.n_proposed)
    return out


def estimate_moments(drive: Drive, grid: TimeGrid, n_traj: int, seed: int, *, jobs: int = 1,
                     gamma_max: float | None = None, batch_size: int = 5000) -> OracleResult:
    """Per-cycle count statistics over ``n_traj`` independent trajectories.

    Output is independent of ``jobs`` and ``batch_size``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    if gamma_max is None:
        gamma_max = rate_bound(drive, grid)
    p0 = initial_distribution(drive, grid)
    bounds = list(range(0, n_traj, batch_size)) + [n_traj]
    tasks = [(drive, grid, seed, a, b, gamma_max, p0) for a, b in zip(bounds[:-1], bounds[1:])]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_batch, tasks))
    else:
        parts = [_batch(t) for t in tasks]
    data = np.concatenate(parts)
    n_up, n_dn, accepted, proposed = data.T
    acceptance = float(accepted.sum() / proposed.sum()) if proposed.sum() else 1.0
    if drive.nstates == 2:
        return OracleResult(SampleStats.from_samples("N", n_up, seed), None, acceptance, gamma_max, n_up, n_dn)
    return OracleResult(
        SampleStats.from_samples("N", n_up + n_dn, seed),
        SampleStats.from_samples("S", n_up - n_dn, seed),
        acceptance, gamma_max, n_up, n_dn,
    )


def dump_trajectories(trajectories, path):
    """Write jumps as CSV rows ``traj, t_jump, from, to, channel``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj", "t_jump", "from", "to", "channel"])
        for k, tr in enumerate(trajectories):
            for t, a, b, lab in zip(tr.times, tr.from_states, tr.to_states, tr.channel_labels()):
                w.writerow([k, repr(float(t)), int(a), int(b), lab])
