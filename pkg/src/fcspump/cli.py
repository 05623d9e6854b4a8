"""``fcspump`` command line: run bundled or user scenarios, write CSV/JSON.

Config files are flat ``key = value`` text with dotted keys; ``#`` starts a
comment.  ``fcspump run <config> [key=value ...]`` accepts a config path, a
bundled scenario id or a previous ``summary.json`` (its config echo).

Outputs in the output directory (``output.dir``, else ``$FCSPUMP_OUTDIR``,
else ``./fcspump_out/<scenario>``):

``timeseries.csv``
    ``t_over_T``, rates, controls (if any), flows of the final cycle.
``summary.json``
    Config echo, moments, cost curve, oracle statistics.
``controls_iter<k>.csv``
    Control snapshots of optimisations with the flows of that cycle.
``sweep.csv``
    Per-frequency rows of ``sta_compare``.
``timing.json``
    Wall time; kept apart so the other files are byte-deterministic.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FcsPumpError
from .fcs import cycle_moments, flows, geometric_pump_value
from .models import (
    BareDrive, ConstantDrive, ProtocolConfig, RateSet2, SpinDrive, STADrive, TwoStateControlDrive,
    initial_spin_controls, initial_two_state_controls,
)
from .optimizer import CostWeights, Scenario, optimize
from .oracle import estimate_moments
from .propagation import TimeGrid, run_cycle

log = logging.getLogger("fcspump")

ENV_OUTDIR = "FCSPUMP_OUTDIR"
SCENARIOS = ("steady", "sta_compare", "optimize_2state", "optimize_spin", "decorrelate", "oracle_check")


# ---------------------------------------------------------------------------
# config schema


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _words(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    choices: tuple = ()


SCHEMA = {
    "scenario": Key(str, None, SCENARIOS),
    "model": Key(str, "two_state", ("two_state", "spin")),
    "drive": Key(str, "bare", ("bare", "sta", "controls")),
    "protocol.A": Key(float, 4.0),
    "protocol.R": Key(float, 1.0),
    "protocol.omega": Key(float, 10.0),
    "protocol.gamma_minus": Key(float, 1.0),
    "protocol.kbt": Key(float, 1.0),
    "protocol.zeeman_sign": Key(float, 1.0),
    "grid.M": Key(int, 4096),
    "grid.n_warmup": Key(int, 3),
    "weights.w1": Key(float, None),
    "weights.w2": Key(float, None),
    "weights.w3": Key(float, 0.0),
    "optimizer.iterations": Key(int, 100),
    "optimizer.eps0": Key(float, None),
    "optimizer.normalize": Key(_bool, True),
    "optimizer.through_warmup": Key(_bool, True),
    "optimizer.backtrack": Key(_bool, False),
    "optimizer.tol": Key(_opt_float, None),
    "optimizer.snapshot_every": Key(int, 10),
    "init.f_L": Key(float, 0.0),
    "init.f_R": Key(float, 0.0),
    "init.v_amp": Key(float, 0.1),
    "init.ez_l": Key(float, 0.05),
    "init.ez_r": Key(float, 0.05),
    "sweep.omegas": Key(_floats, (0.01, 1.0, 10.0)),
    "oracle.n_traj": Key(int, 0),
    "oracle.seed": Key(int, 12345),
    "oracle.protocols": Key(_words, ("constant", "bare", "spin")),
    "output.dir": Key(str, None),
}

REQUIRED = {
    "steady": ("model",),
    "sta_compare": ("sweep.omegas",),
    "optimize_2state": ("weights.w1", "weights.w2", "optimizer.eps0"),
    "optimize_spin": ("weights.w1", "weights.w2", "weights.w3", "optimizer.eps0"),
    "decorrelate": ("weights.w1", "weights.w2", "optimizer.eps0"),
    "oracle_check": ("oracle.n_traj", "oracle.seed"),
}

ORACLE_PROTOCOLS = ("constant", "bare", "spin")


def list_scenarios():
    """Scenario ids mapped to their required keys, in catalog order."""
    return {s: REQUIRED[s] for s in SCENARIOS}


def _parse_value(key, text, line=None):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}", key, line)
    entry = SCHEMA[key]
    try:
        value = entry.parse(text.strip())
    except ValueError:
        raise ConfigError(f"invalid value {text.strip()!r} for {key!r}", key, line) from None
    if entry.choices and value not in entry.choices:
        raise ConfigError(f"{key!r} must be one of {', '.join(entry.choices)}", key, line)
    return value


def parse_config_text(text):
    """Parse ``key = value`` lines; returns ``{key: (value, line)}``."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected key = value, got {body!r}", None, n)
        key, value = (s.strip() for s in body.split("=", 1))
        out[key] = (_parse_value(key, value, n), n)
    return out


def _to_text(value):
    if isinstance(value, (list, tuple)):
        return ",".join(_to_text(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _bundled_text(name):
    return resources.files("fcspump").joinpath("configs", f"{name}.cfg").read_text()


def load_config(source, overrides=()):
    """Resolve a config from a path, a bundled id or a summary.json echo.

    Overrides are ``key=value`` strings and take precedence.  Returns a dict
    with every schema key filled in.
    """
    path = Path(source)
    if path.suffix == ".json" and path.is_file():
        echo = json.loads(path.read_text()).get("config")
        if not isinstance(echo, dict):
            raise ConfigError(f"{source} has no config echo")
        entries = {k: (_parse_value(k, _to_text(v)), None) for k, v in echo.items() if v is not None}
    elif path.is_file():
        entries = parse_config_text(path.read_text())
    elif source in SCENARIOS:
        entries = parse_config_text(_bundled_text(source))
    else:
        raise ConfigError(f"no config file or bundled scenario named {source!r}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        entries[key] = (_parse_value(key, value), None)
    if "scenario" not in entries:
        raise ConfigError("missing required key 'scenario'", "scenario")
    scenario = entries["scenario"][0]
    for key in REQUIRED[scenario]:
        if key not in entries or entries[key][0] is None:
            raise ConfigError(f"missing required key {key!r} for {scenario}", key)
    cfg = {k: entry.default for k, entry in SCHEMA.items()}
    cfg.update({k: v for k, (v, _) in entries.items()})
    _validate(cfg, entries)
    return cfg


def _validate(cfg, entries):
    def fail(key, msg):
        raise ConfigError(msg, key, entries.get(key, (None, None))[1])

    try:
        protocol_config(cfg)
    except ValueError as exc:
        fail("protocol.A", str(exc))
    if cfg["grid.M"] < 256:
        fail("grid.M", "grid.M must be at least 256")
    if cfg["grid.n_warmup"] < 0:
        fail("grid.n_warmup", "grid.n_warmup must be >= 0")
    if cfg["optimizer.iterations"] < 0:
        fail("optimizer.iterations", "optimizer.iterations must be >= 0")
    if cfg["optimizer.snapshot_every"] < 0:
        fail("optimizer.snapshot_every", "optimizer.snapshot_every must be >= 0")
    if cfg["oracle.n_traj"] < 0:
        fail("oracle.n_traj", "oracle.n_traj must be >= 0")
    if any(not w > 0 for w in cfg["sweep.omegas"]) or not cfg["sweep.omegas"]:
        fail("sweep.omegas", "sweep.omegas must be positive")
    for p in cfg["oracle.protocols"]:
        if p not in ORACLE_PROTOCOLS:
            fail("oracle.protocols", f"unknown oracle protocol {p!r}")
    scenario = cfg["scenario"]
    if scenario in ("optimize_2state", "optimize_spin", "decorrelate"):
        try:
            weights(cfg).validate()
        except ValueError as exc:
            fail("weights.w2", str(exc))
    if scenario == "steady" and cfg["model"] == "spin" and cfg["drive"] == "sta":
        fail("drive", "the shortcut protocol exists only for the two-state model")


def echo(cfg):
    """Config as written into summary.json (output location excluded)."""
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items() if k != "output.dir"}


# ---------------------------------------------------------------------------
# builders


def protocol_config(cfg, **changes):
    base = ProtocolConfig(
        A=cfg["protocol.A"], R=cfg["protocol.R"], omega=cfg["protocol.omega"],
        gamma_minus=cfg["protocol.gamma_minus"], kbt=cfg["protocol.kbt"],
        zeeman_sign=cfg["protocol.zeeman_sign"],
    )
    return base.replace(**changes) if changes else base


def time_grid(cfg, pc: ProtocolConfig):
    return TimeGrid(pc.period, M=cfg["grid.M"], n_warmup=cfg["grid.n_warmup"])


def weights(cfg):
    scenario = {
        "optimize_2state": Scenario.TWO_STATE,
        "optimize_spin": Scenario.SPIN_PUMP,
        "decorrelate": Scenario.DECORRELATE,
    }[cfg["scenario"]]
    return CostWeights(cfg["weights.w1"], cfg["weights.w2"], cfg["weights.w3"], scenario)


def two_state_drive(cfg, pc):
    m = cfg["grid.M"]
    return TwoStateControlDrive(pc, initial_two_state_controls(pc, m, cfg["init.f_L"], cfg["init.f_R"]))


def spin_drive(cfg, pc):
    m = cfg["grid.M"]
    return SpinDrive(pc, initial_spin_controls(pc, m, cfg["init.v_amp"], cfg["init.ez_l"], cfg["init.ez_r"]))


# ---------------------------------------------------------------------------
# output


def _fmt(x):
    return "%.17g" % x


def write_csv(path, header, columns):
    cols = [np.asarray(c, dtype=float) for c in columns]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _flow_columns(traj):
    fl = flows(traj.states, traj.rates)
    if traj.nstates == 2:
        return ["i", "s"], [fl.i, fl.s]
    return ["i_delta", "i_sigma", "s_updown", "s_N"], [fl.i_delta, fl.i_sigma, fl.s_updown, fl.s_n]


def write_timeseries(path, traj):
    t = traj.grid.nodes / traj.grid.period
    header, cols = ["t_over_T"], [t]
    arr = traj.rates.as_array()
    header += list(traj.rates.names)
    cols += list(np.broadcast_to(arr, (arr.shape[0], t.size)))
    if traj.controls is not None:
        header += list(traj.drive.control_names)
        cols += list(traj.controls)
    fh, fc = _flow_columns(traj)
    write_csv(path, header + fh, cols + fc)


def write_controls(path, drive, traj):
    t = traj.grid.nodes / traj.grid.period
    fh, fc = _flow_columns(traj)
    write_csv(path, ["t_over_T", *drive.control_names, *fh], [t, *drive.controls, *fc])


def write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# scenarios


def run_steady(cfg, out, jobs):
    pc = protocol_config(cfg)
    grid = time_grid(cfg, pc)
    if cfg["model"] == "spin":
        drive = spin_drive(cfg, pc)
    elif cfg["drive"] == "sta":
        drive = STADrive(pc)
    elif cfg["drive"] == "controls":
        drive = two_state_drive(cfg, pc)
    else:
        drive = BareDrive(pc)
    traj = run_cycle(drive, grid)
    write_timeseries(out / "timeseries.csv", traj)
    summary = {"moments": cycle_moments(traj).to_dict()}
    if drive.nstates == 2 and cfg["drive"] != "controls":
        geo = geometric_pump_value(pc.A, pc.R, pc.gamma_minus)
        summary["geometric_value"] = geo
        summary["ratio_to_geometric"] = summary["moments"]["n_mean"] / geo
    if cfg["oracle.n_traj"]:
        res = estimate_moments(drive, grid, cfg["oracle.n_traj"], cfg["oracle.seed"], jobs=jobs)
        summary["oracle"] = res.to_dict()
    return summary


def _sweep_point(args):
    cfg, omega = args
    pc = protocol_config(cfg, omega=omega)
    grid = time_grid(cfg, pc)
    bare = cycle_moments(run_cycle(BareDrive(pc), grid))
    sta_traj = run_cycle(STADrive(pc), grid)
    return bare, cycle_moments(sta_traj), sta_traj


def run_sta_compare(cfg, out, jobs):
    omegas = cfg["sweep.omegas"]
    pc = protocol_config(cfg)
    geo = geometric_pump_value(pc.A, pc.R, pc.gamma_minus)
    results = _map(_sweep_point, [(cfg, w) for w in omegas], jobs)
    rows = []
    for w, (bare, sta, _) in zip(omegas, results):
        rows.append({
            "omega": w, "bare": bare.to_dict(), "sta": sta.to_dict(),
            "bare_ratio": bare.n_mean / geo, "sta_ratio": sta.n_mean / geo,
        })
    write_csv(
        out / "sweep.csv",
        ["omega", "bare_n_mean", "bare_n_var", "bare_ratio", "sta_n_mean", "sta_n_var", "sta_ratio"],
        [[r["omega"] for r in rows], [r["bare"]["n_mean"] for r in rows], [r["bare"]["n_var"] for r in rows],
         [r["bare_ratio"] for r in rows], [r["sta"]["n_mean"] for r in rows], [r["sta"]["n_var"] for r in rows],
         [r["sta_ratio"] for r in rows]],
    )
    # time series of the shortcut protocol at the fastest sweep point
    fastest = int(np.argmax(omegas))
    write_timeseries(out / "timeseries.csv", results[fastest][2])
    return {"geometric_value": geo, "sweep": rows, "timeseries_omega": omegas[fastest]}


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_optimization(cfg, out, jobs):
    w = weights(cfg)
    pc = protocol_config(cfg)
    grid = time_grid(cfg, pc)
    if w.scenario is Scenario.TWO_STATE:
        drive = two_state_drive(cfg, pc)
        eps0 = cfg["optimizer.eps0"]
    else:
        drive = spin_drive(cfg, pc)
        eps0 = cfg["optimizer.eps0"] * pc.v0
    snaps = {}

    def keep(k, ev):
        every = cfg["optimizer.snapshot_every"]
        if every and k % every == 0:
            snaps[k] = ev.traj

    report = optimize(
        drive, grid, w, eps0, cfg["optimizer.iterations"],
        normalize=cfg["optimizer.normalize"], through_warmup=cfg["optimizer.through_warmup"],
        snapshot_every=cfg["optimizer.snapshot_every"], backtrack=cfg["optimizer.backtrack"],
        tol=cfg["optimizer.tol"], callback=keep,
    )
    final = report.final.traj
    snaps[report.iterations] = final
    for k in sorted(report.snapshots):
        write_controls(out / f"controls_iter{k}.csv", snaps[k].drive, snaps[k])
    write_timeseries(out / "timeseries.csv", final)
    summary = {
        "moments_before": report.moments[0].to_dict(),
        "moments_after": report.moments[-1].to_dict(),
        "report": report.to_dict(),
        "snapshots": sorted(report.snapshots),
    }
    if w.scenario is not Scenario.TWO_STATE:
        before, after = report.moments[0], report.moments[-1]
        summary["variance_ratio_before"] = before.s_var / before.n_var
        summary["variance_ratio_after"] = after.s_var / after.n_var
    return summary


def oracle_drive(name, cfg):
    pc = protocol_config(cfg)
    if name == "constant":
        return ConstantDrive(RateSet2(1.0, 0.0, 0.0, 1.0), pc.period)
    if name == "bare":
        return BareDrive(pc)
    return spin_drive(cfg, pc)


def run_oracle_check(cfg, out, jobs):
    rows = {}
    last = None
    for name in cfg["oracle.protocols"]:
        drive = oracle_drive(name, cfg)
        grid = TimeGrid(drive.period, M=cfg["grid.M"], n_warmup=cfg["grid.n_warmup"])
        traj = run_cycle(drive, grid)
        mom = cycle_moments(traj)
        res = estimate_moments(drive, grid, cfg["oracle.n_traj"], cfg["oracle.seed"], jobs=jobs)
        zm, zv = res.n.z_scores(mom.n_mean, mom.n_var)
        row = {"ode": mom.to_dict(), "oracle": res.to_dict(), "z_n_mean": zm, "z_n_var": zv}
        zs = [zm, zv]
        if res.s is not None:
            row["z_s_mean"], row["z_s_var"] = res.s.z_scores(mom.s_mean, mom.s_var)
            zs += [row["z_s_mean"], row["z_s_var"]]
        row["within_3se"] = bool(all(abs(z) <= 3 for z in zs))
        rows[name] = row
        last = traj
    write_timeseries(out / "timeseries.csv", last)
    return {"protocols": rows, "all_within_3se": all(r["within_3se"] for r in rows.values())}


RUNNERS = {
    "steady": run_steady,
    "sta_compare": run_sta_compare,
    "optimize_2state": run_optimization,
    "optimize_spin": run_optimization,
    "decorrelate": run_optimization,
    "oracle_check": run_oracle_check,
}


def output_dir(cfg):
    if cfg.get("output.dir"):
        return Path(cfg["output.dir"])
    env = os.environ.get(ENV_OUTDIR)
    if env:
        return Path(env)
    return Path("fcspump_out") / cfg["scenario"]


def run(source, overrides=(), jobs=1):
    """Execute one scenario; returns ``(output directory, summary dict)``."""
    cfg = load_config(source, overrides)
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        body = RUNNERS[cfg["scenario"]](cfg, out, jobs)
    except Exception as exc:
        exc.scenario = cfg["scenario"]
        raise
    summary = {"tool": "fcspump", "version": __version__, "scenario": cfg["scenario"], "config": echo(cfg)}
    summary.update(body)
    write_json(out / "summary.json", summary)
    write_json(out / "timing.json", {"wall_time_s": time.perf_counter() - start})
    return out, summary


def _error_record(exc):
    rec = exc.record() if isinstance(exc, ConfigError) else {"error": type(exc).__name__, "message": str(exc)}
    scenario = getattr(exc, "scenario", None)
    if scenario:
        rec["scenario"] = scenario
    it = getattr(exc, "iteration", None)
    if it is not None:
        rec["iteration"] = it
    return rec


def build_parser():
    p = argparse.ArgumentParser(prog="fcspump", description="Counting statistics of periodically driven dot pumps.")
    p.add_argument("--version", action="version", version=f"fcspump {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario config")
    r.add_argument("config", help="config file, bundled scenario id or summary.json")
    r.add_argument("overrides", nargs="*", metavar="key=value")
    r.add_argument("--jobs", type=int, default=1, help="worker processes for oracle batches and sweeps")
    s = sub.add_parser("scenarios", help="list scenario ids")
    s.add_argument("--keys", action="store_true", help="also print required keys")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "scenarios":
        for sid, keys in list_scenarios().items():
            print(f"{sid}\t{' '.join(keys)}" if args.keys else sid)
        return 0
    try:
        out, _ = run(args.config, args.overrides, jobs=max(1, args.jobs))
    except ConfigError as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return 2
    except (FcsPumpError, ValueError, FloatingPointError) as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
