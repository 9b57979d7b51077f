"""Command-line driver.

One YAML config describes one experiment; the `kind` key selects among
simulation, dense-oracle evaluation, sampler-vs-oracle comparison, the
theorem-shaped scans, and the full acceptance suite.  Every run leaves a
manifest, CSV tables at full float precision, and an SVG in the output
directory.

Exit codes: 0 success / gates passed, 1 a statistical gate failed, 2 bad
configuration, 3 cost guard tripped, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__, oracle, sampler, stats
from .core import BoundaryCondition, TimeGrid, TiltSchedule
from .oracle import CostGuardError

__all__ = ["main", "run_experiment", "load_config", "CONFIG_SCHEMA"]

EXIT_OK = 0
EXIT_GATE = 1
EXIT_CONFIG = 2
EXIT_COST = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


_GRID = {
    "type": "object",
    "properties": {
        "left": {"type": "number"},
        "right": {"type": "number"},
        "steps": {"type": "integer", "minimum": 1},
    },
    "required": ["left", "right", "steps"],
    "additionalProperties": False,
}

_TILTS = {
    "type": "object",
    "properties": {
        "type": {"enum": ["geometric", "general"]},
        "a": {"type": "number", "minimum": 0},
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "rhos": {"type": "array"},
    },
    "required": ["type"],
    "additionalProperties": False,
}

_BOUNDARY = {
    "type": "object",
    "properties": {
        "type": {"enum": ["fixed", "zero", "free"]},
        "left": {"type": "array", "items": {"type": "number"}},
        "right": {"type": "array", "items": {"type": "number"}},
    },
    "required": ["type"],
    "additionalProperties": False,
}

_SAMPLER = {
    "type": "object",
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "grid": _GRID,
        "tilts": _TILTS,
        "boundary": _BOUNDARY,
        "floor": {"type": "array", "items": {"type": "number"}},
        "ceiling": {"type": "array", "items": {"type": "number"}},
        "block_len": {"type": "integer", "minimum": 2},
        "max_rejections": {"type": "integer", "minimum": 1},
        "sweep_schedule": {"enum": ["systematic", "random-block"]},
        "burnin": {"type": "integer", "minimum": 0},
        "thin": {"type": "integer", "minimum": 0},
    },
    "required": ["n", "grid", "tilts", "boundary"],
    "additionalProperties": False,
}

_OBSERVABLE = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["point", "curved_max", "window_max", "min_gap",
                          "modulus", "area"]},
        "t": {"type": "number"},
        "line": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number"},
        "gamma": {"type": "number"},
        "k": {"type": "integer", "minimum": 1},
        "delta": {"type": "number"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["simulate", "oracle", "compare", "tightness-scan",
                          "max-scaling", "gap-scan", "domination",
                          "gibbs-check", "monotone-scan", "accept"]},
        "seed": {"type": "integer"},
        "samples": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "sampler": _SAMPLER,
        "sampler_lo": _SAMPLER,
        "sampler_hi": _SAMPLER,
        "observables": {"type": "array", "items": _OBSERVABLE},
        "observable": _OBSERVABLE,
        "space": {
            "type": "object",
            "properties": {
                "x_max": {"type": "number", "exclusiveMinimum": 0},
                "points": {"type": "integer", "minimum": 3},
            },
            "required": ["x_max", "points"],
            "additionalProperties": False,
        },
        "cost_limit": {"type": "number", "exclusiveMinimum": 0},
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "settings": {"type": "array",
                     "items": {"type": "array", "items": {"type": "number"},
                               "minItems": 2, "maxItems": 2}},
        "alpha": {"type": "number"},
        "gamma": {"type": "number"},
        "line": {"type": "integer", "minimum": 1},
        "lines": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "m_list": {"type": "array", "items": {"type": "number"}},
        "deltas": {"type": "array", "items": {"type": "number"}},
        "interval": {"type": "array", "items": {"type": "number"},
                     "minItems": 2, "maxItems": 2},
        "event": {
            "type": "object",
            "properties": {
                "line": {"type": "integer", "minimum": 1},
                "t": {"type": "number"},
                "threshold": {"type": "number"},
            },
            "required": ["line", "t", "threshold"],
            "additionalProperties": False,
        },
        "gates": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_KIND_REQUIRES = {
    "simulate": ["sampler", "samples"],
    "oracle": ["sampler"],
    "compare": ["sampler", "samples"],
    "tightness-scan": ["sampler", "settings", "samples"],
    "max-scaling": ["sampler", "lines", "m_list", "samples"],
    "gap-scan": ["sampler", "deltas", "samples"],
    "domination": ["sampler_lo", "sampler_hi", "observable", "samples"],
    "gibbs-check": ["sampler", "interval", "samples"],
    "monotone-scan": ["sampler", "settings", "event", "samples"],
    "accept": [],
}


# ---------------------------------------------------------------------------
# config plumbing

def load_config(path) -> dict:
    with open(path) as fh:
        conf = yaml.safe_load(fh)
    if not isinstance(conf, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return conf


def apply_override(conf: dict, assignment: str) -> None:
    """Apply a dotted-path KEY=VALUE override; VALUE is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"--set needs KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    node = conf
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {key!r} crosses a non-mapping value")
    node[parts[-1]] = yaml.safe_load(raw)


def validate_config(conf: dict) -> None:
    try:
        jsonschema.validate(conf, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config key {path}: {e.message}") from None
    missing = [k for k in _KIND_REQUIRES[conf["kind"]] if k not in conf]
    if missing:
        raise ConfigError(
            f"kind {conf['kind']!r} requires keys: {', '.join(missing)}")


def _sampler_config(conf: dict, section: str = "sampler",
                    seed=None) -> sampler.SamplerConfig:
    d = dict(conf[section])
    d.setdefault("block_len", 16)
    d.setdefault("max_rejections", 64)
    d.setdefault("sweep_schedule", "systematic")
    d.setdefault("burnin", 200)
    d.setdefault("thin", 1)
    d.setdefault("floor", None)
    d.setdefault("ceiling", None)
    d["seed"] = conf.get("seed", 0) if seed is None else seed
    b = d["boundary"]
    if b["type"] == "fixed" and ("left" not in b or "right" not in b):
        raise ConfigError("fixed boundary needs 'left' and 'right' vectors")
    try:
        return sampler.config_from_dict(d)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad sampler section: {e}") from None


def _space(conf: dict):
    if "space" in conf:
        return oracle.SpaceGrid(conf["space"]["x_max"], conf["space"]["points"])
    return None


def _observables(conf: dict) -> list:
    out = []
    for od in conf.get("observables", []):
        kw = dict(od)
        kind = kw.pop("kind")
        out.append(sampler.make_observable(kind, **kw))
    return out


# ---------------------------------------------------------------------------
# artifact helpers

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_manifest(out: Path, conf: dict, seconds: float, extra=None) -> None:
    manifest = {
        "config": conf,
        "seed": conf.get("seed", 0),
        "versions": {
            "tiltedlines": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_seconds": seconds,
    }
    if "sampler" in conf:
        try:
            manifest["config_hash"] = sampler.config_hash(_sampler_config(conf))
        except ConfigError:
            pass
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plot(out: Path, name: str, draw) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(out / name)
    plt.close(fig)


def _plot_ensemble(out: Path, state: sampler.ChainState) -> None:
    def draw(ax):
        g = state.config.grid
        for i in range(state.ensemble.n):
            ax.plot(g.node_times, state.ensemble.lines[i], lw=1.0,
                    label=f"line {i + 1}")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xlabel("t")
        ax.set_ylabel("X_i(t)")
        ax.legend(loc="upper right", fontsize=8)
    _plot(out, "ensemble.svg", draw)


def _plot_scan(out: Path, xs, ests, xlabel, ylabel) -> None:
    def draw(ax):
        pts = [e.point for e in ests]
        err = [e.half_width for e in ests]
        ax.errorbar(range(len(xs)), pts, yerr=err, fmt="o-", capsize=3)
        ax.set_xticks(range(len(xs)))
        ax.set_xticklabels([str(x) for x in xs], fontsize=8)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
    _plot(out, "scan.svg", draw)


def _est_row(est: stats.EstimateCI):
    return [est.point, est.se, est.lower, est.upper, est.ess, est.widened]


_EST_COLS = ["estimate", "se", "ci_lower", "ci_upper", "ess", "widened"]


# ---------------------------------------------------------------------------
# experiment kinds

def _cmd_simulate(conf: dict, out: Path, resume=None) -> int:
    cfg = _sampler_config(conf)
    obs = _observables(conf)
    state = None
    if resume is not None:
        state = sampler.restore(Path(resume).read_bytes())
        if sampler.config_hash(state.config) != sampler.config_hash(cfg):
            raise ConfigError("checkpoint was produced by a different config")
        cfg = dataclasses.replace(cfg, burnin=0)
    res = sampler.run_chain(cfg, conf["samples"], obs, state=state)
    names = [o.name for o in obs]
    rows = ([int(res.sweeps[s])] + [res.table[nm][s] for nm in names]
            for s in range(conf["samples"]))
    write_csv(out / "samples.csv", ["sweep"] + names, rows)
    (out / "checkpoint.bin").write_bytes(sampler.checkpoint(res.state))
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(res.diagnostics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _plot_ensemble(out, res.state)
    return EXIT_OK


def _cmd_oracle(conf: dict, out: Path) -> int:
    cfg = _sampler_config(conf)
    table = oracle.transfer_marginals(
        cfg.n, cfg.grid, cfg.tilts, cfg.boundary, space=_space(conf),
        cost_limit=conf.get("cost_limit", oracle.DEFAULT_COST_LIMIT))
    write_csv(out / "marginals.csv", ["node_time", "line", "x", "density"],
              table.to_rows())

    def draw(ax):
        node = cfg.grid.n_nodes // 2
        for line in range(1, cfg.n + 1):
            ax.plot(table.space.xs, table.density(line, node),
                    label=f"line {line}, t={cfg.grid.node_times[node]:g}")
        ax.set_xlabel("x")
        ax.set_ylabel("density")
        ax.legend(fontsize=8)
    _plot(out, "marginals.svg", draw)
    write_manifest(out, conf, 0.0, {"log_z": table.log_z})
    return EXIT_OK


def _cmd_compare(conf: dict, out: Path) -> int:
    cfg = _sampler_config(conf)
    table = oracle.transfer_marginals(
        cfg.n, cfg.grid, cfg.tilts, cfg.boundary, space=_space(conf),
        cost_limit=conf.get("cost_limit", oracle.DEFAULT_COST_LIMIT))
    res = sampler.run_chain(cfg, conf["samples"], [], keep_paths=True)
    tol = conf.get("tolerance", 0.02)
    xs = table.space.xs
    rows = []
    worst = 0.0
    for line in range(1, cfg.n + 1):
        for node in range(cfg.grid.n_nodes):
            if not np.all(np.isfinite(table.densities[line - 1, node])):
                continue
            vals = np.sort(res.paths[:, line - 1, node])
            emp = np.searchsorted(vals, xs, side="right") / vals.size
            ks = float(np.max(np.abs(emp - table.cdf(line, node))))
            worst = max(worst, ks)
            rows.append([cfg.grid.node_times[node], line, ks])
    write_csv(out / "compare.csv", ["node_time", "line", "ks"], rows)

    def draw(ax):
        arr = np.asarray([[r[0], r[1], r[2]] for r in rows])
        for line in range(1, cfg.n + 1):
            sel = arr[:, 1] == line
            ax.plot(arr[sel, 0], arr[sel, 2], "o-", ms=3, label=f"line {line}")
        ax.axhline(tol, color="r", ls="--", lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel("KS distance")
        ax.legend(fontsize=8)
    _plot(out, "compare.svg", draw)
    print(f"worst KS distance {worst:.5f} (tolerance {tol})")
    return EXIT_OK if worst < tol else EXIT_GATE


def _cmd_tightness(conf: dict, out: Path) -> int:
    alpha = conf.get("alpha", 0.25)
    gamma = conf.get("gamma", 1.0)
    ests = []
    labels = []
    for idx, (n, t_half) in enumerate(conf["settings"]):
        n = int(n)
        base = _sampler_config(conf)
        steps = max(2, round(2 * t_half / base.grid.dt))
        cfg = dataclasses.replace(
            base, n=n, grid=TimeGrid(-t_half, t_half, steps),
            boundary=BoundaryCondition.zero(),
            seed=stats.derived_seed(conf.get("seed", 0), idx, "tightness"))
        obs = sampler.make_observable("curved_max", alpha=alpha, line=1,
                                      gamma=gamma)
        res = sampler.run_chain(cfg, conf["samples"], [obs])
        ests.append(stats.estimate_curved_max(res.values(obs.name), alpha))
        labels.append(f"n={n},T={t_half:g}")
    write_csv(out / "scan.csv", ["setting"] + _EST_COLS,
              ([lab] + _est_row(e) for lab, e in zip(labels, ests)))
    _plot_scan(out, labels, ests, "setting", "mean curved max")
    ok = all(e.se < 0.05 * e.point for e in ests)
    ok &= all(ests[i].overlaps(ests[j])
              for i in range(len(ests)) for j in range(i + 1, len(ests)))
    print("tightness scan:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_GATE


def _cmd_max_scaling(conf: dict, out: Path) -> int:
    cfg = _sampler_config(conf)
    if cfg.tilts.kind != "geometric":
        raise ConfigError("max-scaling needs a geometric tilt schedule")
    gamma = conf.get("gamma", 1.0)
    obs = [sampler.make_observable("window_max", line=k, gamma=gamma)
           for k in conf["lines"]]
    res = sampler.run_chain(cfg, conf["samples"], obs)
    maxima = {k: res.values(o.name) for k, o in zip(conf["lines"], obs)}
    rows, c_fit = stats.max_tail_scan(maxima, conf["m_list"], cfg.tilts.lam)
    write_csv(out / "scan.csv", ["k", "M", "threshold"] + _EST_COLS,
              ([r["k"], r["M"], r["threshold"]] + _est_row(r["estimate"])
               for r in rows))
    _plot_scan(out, [f"k={r['k']},M={r['M']:g}" for r in rows],
               [r["estimate"] for r in rows], "(k, M)", "tail probability")
    print(f"fitted constant C = {c_fit:.4g}")
    return EXIT_OK if np.isfinite(c_fit) else EXIT_GATE


def _cmd_gap_scan(conf: dict, out: Path) -> int:
    cfg = _sampler_config(conf)
    gamma = conf.get("gamma", 0.5)
    obs = sampler.make_observable("min_gap", k=conf.get("line", cfg.n),
                                  gamma=gamma)
    res = sampler.run_chain(cfg, conf["samples"], [obs])
    rows = stats.gap_tail(res.values(obs.name), conf["deltas"])
    write_csv(out / "scan.csv", ["delta"] + _EST_COLS,
              ([r["delta"]] + _est_row(r["estimate"]) for r in rows))
    _plot_scan(out, [f"{r['delta']:g}" for r in rows],
               [r["estimate"] for r in rows], "delta", "P(min gap <= delta)")
    probs = [r["estimate"].point for r in rows]
    ok = all(probs[i] >= probs[i + 1] for i in range(len(probs) - 1))
    print("gap scan:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_GATE


def _cmd_domination(conf: dict, out: Path) -> int:
    kw = dict(conf["observable"])
    obs = sampler.make_observable(kw.pop("kind"), **kw)
    tables = {}
    for section in ("sampler_lo", "sampler_hi"):
        cfg = _sampler_config(conf, section)
        res = sampler.run_chain(cfg, conf["samples"], [obs])
        tables[section] = res.values(obs.name)
    dom = stats.dominance_test(tables["sampler_lo"], tables["sampler_hi"],
                               seed=conf.get("seed", 0))
    write_csv(out / "domination.csv",
              ["statistic", "p_value", "consistent"],
              [[dom.statistic, dom.p_value, dom.consistent]])

    def draw(ax):
        for name, vals in tables.items():
            v = np.sort(vals)
            ax.plot(v, np.arange(1, v.size + 1) / v.size, label=name)
        ax.set_xlabel(obs.name)
        ax.set_ylabel("empirical CDF")
        ax.legend(fontsize=8)
    _plot(out, "domination.svg", draw)
    print(f"dominance statistic {dom.statistic:.4f}, p = {dom.p_value:.3f}")
    return EXIT_OK if dom.consistent else EXIT_GATE


def _cmd_gibbs_check(conf: dict, out: Path) -> int:
    cfg = _sampler_config(conf)
    res = sampler.run_chain(cfg, conf["samples"], [], keep_paths=True)
    g = stats.gibbs_consistency(res, tuple(conf["interval"]),
                                seed=conf.get("seed", 0) + 1)
    write_csv(out / "gibbs.csv",
              ["outside_identical", "min_p_inside", "decision"],
              [[g.outside_identical, g.min_p_inside, g.decision]])
    _plot_ensemble(out, res.state)
    print(f"gibbs check: outside identical {g.outside_identical}, "
          f"min inside KS p {g.min_p_inside:.4f}")
    return EXIT_OK if g.decision else EXIT_GATE


def _cmd_monotone_scan(conf: dict, out: Path) -> int:
    ev = conf["event"]
    event = stats.ThresholdEvent(line=ev["line"], t=ev["t"],
                                 threshold=ev["threshold"])
    base = _sampler_config(conf)
    configs = []
    for n, t_half in conf["settings"]:
        steps = max(2, round(2 * t_half / base.grid.dt))
        configs.append(dataclasses.replace(
            base, n=int(n), grid=TimeGrid(-t_half, t_half, steps),
            boundary=BoundaryCondition.zero()))
    scan = stats.monotone_scan(configs, event, n_samples=conf["samples"],
                               base_seed=conf.get("seed", 0))
    labels = [f"n={s[0]},[{s[1]:g},{s[2]:g}]" for s in scan.settings]
    write_csv(out / "scan.csv", ["setting"] + _EST_COLS,
              ([lab] + _est_row(e) for lab, e in zip(labels, scan.estimates)))
    _plot_scan(out, labels, scan.estimates, "setting", "P(event)")
    ok = scan.non_decreasing and scan.saturated
    print(f"monotone scan: non-decreasing {scan.non_decreasing}, "
          f"saturated {scan.saturated}")
    return EXIT_OK if ok else EXIT_GATE


def _cmd_accept(conf: dict, out: Path) -> int:
    from . import acceptance

    results = acceptance.run_gates(only=conf.get("gates"))
    write_csv(out / "gates.csv", ["gate", "passed", "seconds", "metrics"],
              ([r.name, r.passed, r.seconds, json.dumps(r.metrics, sort_keys=True)]
               for r in results))

    def draw(ax):
        names = [r.name for r in results]
        ax.barh(range(len(names)),
                [1.0 if r.passed else 0.0 for r in results],
                color=["tab:green" if r.passed else "tab:red" for r in results])
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names, fontsize=8)
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["fail", "pass"])
    _plot(out, "gates.svg", draw)
    return EXIT_OK if all(r.passed for r in results) else EXIT_GATE


_COMMANDS = {
    "simulate": _cmd_simulate,
    "oracle": _cmd_oracle,
    "compare": _cmd_compare,
    "tightness-scan": _cmd_tightness,
    "max-scaling": _cmd_max_scaling,
    "gap-scan": _cmd_gap_scan,
    "domination": _cmd_domination,
    "gibbs-check": _cmd_gibbs_check,
    "monotone-scan": _cmd_monotone_scan,
    "accept": _cmd_accept,
}


def run_experiment(conf: dict, out, resume=None) -> int:
    """Validate `conf`, run it, write artifacts under `out`; returns the
    process exit code."""
    validate_config(conf)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    kind = conf["kind"]
    if kind == "simulate":
        code = _cmd_simulate(conf, out, resume=resume)
    else:
        code = _COMMANDS[kind](conf, out)
    if kind != "oracle":  # oracle writes its own manifest (log_z)
        write_manifest(out, conf, time.time() - t0)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tiltedlines",
        description="Simulate and verify ordered area-tilted bridge ensembles.")
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted path, YAML value)")
    parser.add_argument("--out", default=None,
                        help="output directory (default: config 'out' or "
                             "TILTEDLINES_OUT or ./out)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the top-level seed")
    parser.add_argument("--resume", default=None,
                        help="checkpoint file to resume a simulate run from")
    args = parser.parse_args(argv)

    try:
        conf = load_config(args.config)
        for assignment in args.set:
            apply_override(conf, assignment)
        if args.seed is not None:
            conf["seed"] = args.seed
        elif "seed" not in conf and "TILTEDLINES_SEED" in os.environ:
            conf["seed"] = int(os.environ["TILTEDLINES_SEED"])
        out = args.out or conf.get("out") or os.environ.get("TILTEDLINES_OUT", "out")
        return run_experiment(conf, out, resume=args.resume)
    except (ValueError, jsonschema.ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CostGuardError as e:
        print(f"cost guard: {e}", file=sys.stderr)
        return EXIT_COST
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
