"""Command line entry point: ``ecometric {analyze,factors,simulate,jackknife}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .analysis import ALL_METHODS, SHORT_METHODS, AnalysisOptions, make_estimator, run_analysis
from .attenuation import ICC_CEILING, ICC_FLOOR, SimexConfig, write_simex_trace, zeta_factors
from .data import DatasetError, read_participants_csv, validate_dataset
from .pipeline import write_phase_trace
from .regression import MAIN_TOL, REPLICATE_TOL
from .resampling import jackknife, write_replicate_dump
from .simulation import SimulationConfig, default_toy_config, generate, write_simulation

log = logging.getLogger("ecometric")

RECORD_FIELDS = ("method", "lambda_hat", "se", "tau_q_sq", "icc", "n_bar", "v_n_sq", "m",
                 "jack_reps", "seconds")

# (icc, mean site size) rows of the published factor table
TABLE1_ROWS = ((0.02, 20), (0.05, 20), (0.08, 20), (0.02, 80), (0.05, 80), (0.08, 80),
               (0.02, 150), (0.05, 150), (0.08, 150))
TABLE1_V_N_SQ, TABLE1_TAU_Q_SQ, TABLE1_SIGMA_SQ = 0.6, 0.02, 1.0


@dataclass
class RunConfig:
    participants: Path
    sites: Path | None = None
    methods: tuple[str, ...] = ALL_METHODS
    options: AnalysisOptions = field(default_factory=AnalysisOptions)
    drop_invalid_sites: bool = False
    jackknife: bool = False
    max_reps: int | None = None
    jackknife_seed: int = 0
    output_format: str = "table"

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method must be selected")
        bad = [m for m in self.methods if m not in SHORT_METHODS]
        if bad:
            raise ValueError(f"unknown method(s): {', '.join(bad)}")


class CliError(Exception):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _num(x):
    """JSON-safe float: non-finite values become null."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _load(cfg: RunConfig):
    for p in (cfg.participants, cfg.sites):
        if p is not None and not Path(p).is_file():
            raise CliError(f"input file not found: {p}")
    raw = read_participants_csv(cfg.participants, cfg.sites)
    d = validate_dataset(raw, drop_invalid_sites=cfg.drop_invalid_sites)
    for note in d.notes:
        log.warning(note)
    if d.m < 30:
        log.warning("only %d sites; the methods are not recommended with fewer than 30", d.m)
    return d


def cmd_analyze(cfg: RunConfig, phase_trace=None, simex_trace=None, replicate_dump=None):
    """Run every selected method. Returns ``(records, provenance, errors)``."""
    d = _load(cfg)
    res = run_analysis(d, cfg.methods, cfg.options, raise_errors=False)
    records, errors = [], dict(res.errors)
    eff = res.inputs.effects if res.inputs is not None else None
    n_bar = v_n_sq = math.nan
    if eff is not None:
        n = eff.subset(res.inputs.mediator.site_ids).n_total.astype(float)
        n_bar = float(n.mean())
        v_n_sq = float(n.var(ddof=1) / n_bar**2) if len(n) > 1 else math.nan
    for name in cfg.methods:
        fit = res.fits.get(name)
        if fit is None:
            continue
        se, reps, secs = fit.lambda_se, 0, res.seconds.get(name, math.nan)
        if cfg.jackknife:
            t0 = time.perf_counter()
            try:
                jk = jackknife(make_estimator(name, cfg.options), d, max_reps=cfg.max_reps,
                               seed=cfg.jackknife_seed)
            except Exception as exc:  # noqa: BLE001 - reported per method
                errors[name] = f"jackknife: {exc}"
                continue
            se, reps = jk.se, jk.replicates_run
            secs += time.perf_counter() - t0
            if replicate_dump is not None:
                target = Path(replicate_dump)
                if len(cfg.methods) > 1:
                    target = target.with_name(f"{target.stem}.{name}{target.suffix}")
                write_replicate_dump(target, jk)
        icc = res.icc.icc if (res.icc is not None and name.startswith("zeta")) else math.nan
        records.append({
            "method": fit.method, "lambda_hat": fit.lambda_hat, "se": se,
            "tau_q_sq": fit.tau_q_sq_hat, "icc": icc, "n_bar": n_bar, "v_n_sq": v_n_sq,
            "m": int(fit.diagnostics.get("m", d.m)), "jack_reps": reps, "seconds": secs,
        })
    if phase_trace is not None and eff is not None:
        write_phase_trace(phase_trace, eff, res.inputs.blups,
                          [f for f in res.fits.values() if f.fit is not None])
    if simex_trace is not None and res.simex_trace is not None:
        write_simex_trace(simex_trace, res.simex_trace)
    o = cfg.options
    provenance = {
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in (cfg.participants, cfg.sites) if p is not None},
        "m": d.m, "n_participants": d.n_participants,
        "methods": list(cfg.methods), "sigma_mode": o.sigma_mode,
        "icc_bounds": [o.icc_floor, o.icc_ceiling],
        "tolerances": {"main": MAIN_TOL, "replicate": REPLICATE_TOL},
        "simex": {"increment": o.simex.increment, "num_points": o.simex.num_points,
                  "seed": o.simex.seed},
        "jackknife": {"enabled": cfg.jackknife, "max_reps": cfg.max_reps, "seed": cfg.jackknife_seed},
        "notes": list(d.notes),
    }
    return records, provenance, errors


def cmd_factors(icc, n_bar, v_n_sq, tau_q_sq, sigma_sq):
    z1, z2, z2a, z3 = zeta_factors(icc, n_bar, v_n_sq, tau_q_sq, sigma_sq)
    return {"icc": icc, "n_bar": n_bar, "zeta1": z1, "zeta2": z2, "zeta2a": z2a, "zeta3": z3}


def table1():
    return [cmd_factors(r, n, TABLE1_V_N_SQ, TABLE1_TAU_Q_SQ, TABLE1_SIGMA_SQ) for r, n in TABLE1_ROWS]


def cmd_simulate(cfg: SimulationConfig, out_dir):
    sim = generate(cfg)
    try:
        return write_simulation(sim, out_dir)
    except OSError as exc:
        raise CliError(f"cannot write to {out_dir}: {exc}") from exc


# ---------------------------------------------------------------------------
# formatting


def _cell(v):
    if isinstance(v, float):
        return "NaN" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def format_table(rows, fields):
    cells = [[str(f) for f in fields]] + [[_cell(r[f]) for f in fields] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(fields))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_records(records, provenance=None, errors=None):
    out = {"records": [{k: (_num(v) if isinstance(v, float) else v) for k, v in r.items()}
                       for r in records]}
    if errors:
        out["errors"] = errors
    if provenance is not None:
        out["provenance"] = provenance
    return json.dumps(out, indent=2)


# ---------------------------------------------------------------------------
# argument parsing


def _methods(text):
    items = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [m for m in items if m not in SHORT_METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {', '.join(bad)}; "
                                         f"choose from {', '.join(SHORT_METHODS)}")
    if not items:
        raise argparse.ArgumentTypeError("at least one method is required")
    return items


def _analysis_args(p):
    p.add_argument("--participants", type=Path, required=True, help="participant CSV")
    p.add_argument("--sites", type=Path, help="site CSV with moderators")
    p.add_argument("--methods", type=_methods, default=ALL_METHODS,
                   help="comma separated subset of " + ",".join(ALL_METHODS))
    p.add_argument("--sigma-mode", choices=("estimate", "fixed"), default="estimate",
                   help="level-one variance in the stabilization: residual estimate or 1")
    p.add_argument("--icc-floor", type=float, default=ICC_FLOOR)
    p.add_argument("--icc-ceiling", type=float, default=ICC_CEILING)
    p.add_argument("--simex-increment", type=float, default=0.004)
    p.add_argument("--simex-points", type=int, default=500)
    p.add_argument("--seed", type=int, default=0, help="SIMEX noise seed")
    p.add_argument("--max-reps", type=int, help="jackknife replicate cap (default: every site)")
    p.add_argument("--jackknife-seed", type=int, default=0)
    p.add_argument("--drop-invalid-sites", action="store_true",
                   help="drop sites with an empty arm instead of failing")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output", type=Path, help="write the report here instead of stdout")
    p.add_argument("--phase-trace", type=Path, help="write per-phase intermediate values")
    p.add_argument("--simex-trace", type=Path, help="write the SIMEX noise ladder")
    p.add_argument("--replicate-dump", type=Path, help="write per-replicate jackknife estimates")


def build_parser():
    ap = argparse.ArgumentParser(prog="ecometric", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="run the pipeline on participant and site CSVs")
    _analysis_args(a)
    a.add_argument("--jackknife", action="store_true", help="replace model SEs by jackknife SEs")

    j = sub.add_parser("jackknife", help="analyze with jackknife standard errors")
    _analysis_args(j)

    f = sub.add_parser("factors", help="disattenuation factors")
    f.add_argument("--table1", action="store_true", help="emit the nine-row reference grid")
    f.add_argument("--icc", type=float)
    f.add_argument("--n-bar", type=float)
    f.add_argument("--v-n-sq", type=float, default=TABLE1_V_N_SQ)
    f.add_argument("--tau-q-sq", type=float, default=TABLE1_TAU_Q_SQ)
    f.add_argument("--sigma-sq", type=float, default=TABLE1_SIGMA_SQ)
    f.add_argument("--m", type=int, help="site count (informational)")
    f.add_argument("--format", choices=("table", "json"), default="table")

    s = sub.add_parser("simulate", help="draw a toy trial and write CSVs")
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--unconfounded", action="store_true", help="set phi = 0")
    s.add_argument("--config", type=Path, help="JSON config to start from")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    return ap


def _options(ns) -> AnalysisOptions:
    return AnalysisOptions(
        sigma_mode=ns.sigma_mode, icc_floor=ns.icc_floor, icc_ceiling=ns.icc_ceiling,
        simex=SimexConfig(increment=ns.simex_increment, num_points=ns.simex_points, seed=ns.seed),
    )


def _emit(text, output):
    if output is None:
        print(text)
    else:
        Path(output).write_text(text + "\n", encoding="utf-8")


def _sim_config(ns) -> SimulationConfig:
    if ns.config is not None:
        if not ns.config.is_file():
            raise CliError(f"config file not found: {ns.config}")
        cfg = SimulationConfig.from_dict(json.loads(ns.config.read_text(encoding="utf-8")))
    else:
        cfg = default_toy_config(confounded=not ns.unconfounded)
    over = {"seed": ns.seed}
    if ns.unconfounded:
        over["phi"] = 0.0
    for item in ns.set:
        key, _, val = item.partition("=")
        key = key.strip().replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key not in SimulationConfig.__dataclass_fields__ or not _:
            raise CliError(f"bad --set {item!r}")
        over[key] = json.loads(val)
    return replace(cfg, **over)


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if ns.command in ("analyze", "jackknife"):
            cfg = RunConfig(ns.participants, ns.sites, ns.methods, _options(ns),
                            ns.drop_invalid_sites, ns.command == "jackknife" or ns.jackknife,
                            ns.max_reps, ns.jackknife_seed, ns.format)
            records, prov, errors = cmd_analyze(cfg, ns.phase_trace, ns.simex_trace,
                                                ns.replicate_dump)
            if ns.format == "json":
                _emit(format_records(records, prov, errors), ns.output)
            else:
                text = format_table(records, RECORD_FIELDS) if records else "(no estimates)"
                _emit(text, ns.output)
            for name, msg in errors.items():
                print(f"error [{name}] {msg}", file=sys.stderr)
            return 0 if not errors and len(records) == len(cfg.methods) else 1
        if ns.command == "factors":
            if ns.table1:
                rows = table1()
            elif ns.icc is None or ns.n_bar is None:
                raise CliError("factors needs --icc and --n-bar (or --table1)")
            else:
                rows = [cmd_factors(ns.icc, ns.n_bar, ns.v_n_sq, ns.tau_q_sq, ns.sigma_sq)]
            fields = ("icc", "n_bar", "zeta1", "zeta2", "zeta2a", "zeta3")
            if ns.format == "json":
                print(json.dumps({"records": rows}, indent=2))
            else:
                print(format_table(rows, fields))
            return 0
        if ns.command == "simulate":
            paths = cmd_simulate(_sim_config(ns), ns.out_dir)
            for p in paths.values():
                print(p)
            return 0
    except (CliError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
