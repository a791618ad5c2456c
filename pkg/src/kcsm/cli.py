"""Command-line entry point: ``kcsm <subcommand> [--config FILE] [--seed N] [--threads N] [--out DIR]``.

Config files are plain ``key = value`` lines; ``#`` starts a comment.
Every run writes ``<subcommand>.csv``, ``<subcommand>.json`` and
``<subcommand>.manifest`` into the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .appendix import count_vs_formula, hitting_time_experiment, omega0_csv, omega0_table
from .distinguished import conditional_law_test
from .engine import InitialMeasureSpec, Observable
from .experiments import ExperimentConfig, run_nonconvergence_ad, run_quench_ad, run_quench_east
from .percolation import cluster_tail, tail_csv, tail_exponent
from .rng import Seed
from .spectral import gap_vs_q_scan

log = logging.getLogger("kcsm")

DEFAULTS = {
    "quench-east": {"size": 10, "p": 0.3, "initial": "bernoulli", "p_prime": 0.6, "config": "",
                    "support": "0", "table": "1,0", "t_grid": "0:12:1", "n_out": 2000, "n_in": 64},
    "quench-ad": {"size": 8, "p": 0.3, "initial": "bernoulli", "p_prime": 0.4, "config": "",
                  "support": "0", "table": "1,0", "t_grid": "0:12:1", "n_out": 500, "n_in": 32},
    "nonconv-ad": {"p": 0.3, "p_prime": 0.7, "depth": 6, "ell": 16, "eps": 0.03, "t_grid": "0:50:5",
                   "n_samples": 4000, "n_in": 16},
    "gap-scan": {"q": "0.5,0.25,0.125"},
    "perc": {"p": "0.3,0.5", "n": "1,2,4,8,16,32,64,128", "n_samples": 100000, "exact": 1},
    "appendix-bfs": {"n_max": 5, "ell": "1,2,4,8,16,32"},
    "hitting": {"ell": 8, "q": 0.3, "horizon": 10000000, "n_samples": 10000},
    "lemma-test": {"family": "east", "length": 4, "region": "0", "depth": 6, "p": 0.5, "t": 2.0,
                   "n_samples": 200000, "min_count": 500},
}


def parse_config(text):
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def resolve(command, overrides):
    defaults = DEFAULTS[command]
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ValueError(f"unknown keys for {command}: {sorted(unknown)}")
    return {k: _coerce(overrides.get(k, v), v) for k, v in defaults.items()}


def floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def grid(text):
    """``a:b:step`` (inclusive) or a comma list."""
    text = str(text)
    if ":" in text:
        a, b, step = (float(x) for x in text.split(":"))
        k = int(math.floor((b - a) / step + 1e-9))
        return [a + i * step for i in range(k + 1)]
    return floats(text)


def _quench_config(family, c, seed, threads):
    if c["initial"] == "delta":
        init = InitialMeasureSpec.delta([int(ch) for ch in c["config"]])
    elif c["initial"] == "equilibrium":
        init = InitialMeasureSpec.equilibrium()
    else:
        init = InitialMeasureSpec.bernoulli(c["p_prime"])
    obs = Observable(tuple(ints(c["support"])), tuple(floats(c["table"])), name="f")
    return ExperimentConfig(family, c["size"], c["p"], init, obs, tuple(grid(c["t_grid"])), c["n_out"], c["n_in"],
                            seed, threads=threads)


def cmd_quench(family):
    def run(c, seed, threads):
        cfg = _quench_config(family, c, seed, threads)
        res = run_quench_east(cfg) if family == "east" else run_quench_ad(cfg)
        return res.to_csv(), res.summary()

    return run


def cmd_nonconv(c, seed, threads):
    rep = run_nonconvergence_ad(c["p"], c["p_prime"], grid(c["t_grid"]), c["n_samples"], seed, depth=c["depth"],
                                ell=c["ell"], eps=c["eps"], n_in=c["n_in"], threads=threads)
    n_out = c["n_samples"] if rep.mode == "persistence" else max(c["n_samples"] // c["n_in"], 2)
    n_in = 1 if rep.mode == "persistence" else c["n_in"]
    return rep.to_csv(n_out, n_in), rep.summary()


def cmd_gap_scan(c, seed, threads):
    rows = gap_vs_q_scan(floats(c["q"]))
    csv = "q,ell,gap,bound_shape,ratio\n" + "".join(
        f"{r['q']:g},{r['ell']},{r['gap']:.12g},{r['bound_shape']:.12g},{r['ratio']:.12g}\n" for r in rows)
    gaps = [r["gap"] for r in rows]
    ratios = [b / a for a, b in zip(gaps, gaps[1:])]
    summary = {"rows": rows, "criteria": {
        "decreasing": all(b < a for a, b in zip(gaps, gaps[1:])),
        "ratios_decreasing": all(b < a for a, b in zip(ratios, ratios[1:])),
    }}
    return csv, summary


def cmd_perc(c, seed, threads):
    rows = []
    ns = ints(c["n"])
    for i, p in enumerate(floats(c["p"])):
        rows += cluster_tail(p, ns)
        if c["n_samples"]:
            rows += cluster_tail(p, ns, c["n_samples"], exact=False, seed=seed.spawn(i))
    exact_half = [r for r in rows if r.p == 0.5 and r.method == "exact" and 8 <= r.n <= 128]
    summary = {"exponent_p0.5": tail_exponent(exact_half) if len(exact_half) >= 2 else None}
    return tail_csv(rows), summary


def cmd_appendix(c, seed, threads):
    table = omega0_table(range(0, c["n_max"] + 1), ints(c["ell"]))
    rows = count_vs_formula(range(1, c["n_max"] + 1))
    return omega0_csv(table), {"count_vs_formula": rows}


def cmd_hitting(c, seed, threads):
    h = hitting_time_experiment(c["ell"], c["q"], c["horizon"], c["n_samples"], seed, threads)
    csv = "run,T,T0\n" + "".join(f"{i},{a},{b}\n" for i, (a, b) in enumerate(zip(h.T, h.T0)))
    summary = h.summary()
    summary["criteria"] = {"T_before_T0": summary["T0_before_T"] == 0}
    return csv, summary


def cmd_lemma(c, seed, threads):
    region = c["length"] if c["family"] == "east" else set(ints(c["region"]))
    rep = conditional_law_test(c["family"], region, c["p"], c["t"], c["n_samples"], seed=seed,
                               min_count=c["min_count"], depth=c["depth"] if c["family"] == "ad" else None,
                               threads=threads)
    summary = {"max_tv": rep.max_tv(), "bins_tested": len(rep.tested),
               "criteria": {"tv_below_0.02": rep.max_tv() < 0.02}}
    return rep.to_csv(), summary


COMMANDS = {
    "quench-east": cmd_quench("east"),
    "quench-ad": cmd_quench("ad"),
    "nonconv-ad": cmd_nonconv,
    "gap-scan": cmd_gap_scan,
    "perc": cmd_perc,
    "appendix-bfs": cmd_appendix,
    "hitting": cmd_hitting,
    "lemma-test": cmd_lemma,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(obj) else float(obj)
    return obj


def run(command, settings, seed, threads, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    csv, summary = COMMANDS[command](settings, seed, threads)
    (out / f"{command}.csv").write_text(csv)
    (out / f"{command}.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    manifest = [f"command = {command}", f"version = {__version__}", f"seed = {seed.seed}", f"stream = {seed.stream}"]
    manifest += [f"{k} = {v}" for k, v in sorted(settings.items())]
    (out / f"{command}.manifest").write_text("\n".join(manifest) + "\n")
    return summary


def build_parser():
    parser = argparse.ArgumentParser(prog="kcsm", description="East and AD model experiments")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="key = value settings file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", type=Path, default=Path("out"))
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = parse_config(args.config.read_text()) if args.config else {}
    settings = resolve(args.command, overrides)
    summary = run(args.command, settings, Seed(args.seed), args.threads, args.out)
    log.info(json.dumps(_jsonable(summary.get("criteria", {}))))
    return 0


if __name__ == "__main__":
    sys.exit(main())
