"""Command-line front end: ``ecw run|gen|scan|validate``.

Every subcommand reads one JSON config.  Paths inside it are resolved
relative to the config file; a ``pkg:`` prefix names a file bundled in
``ecw.data`` (for example ``"pkg:h2_sto3g.fcidump"``).

Exit codes: 0 success, 1 input error, 2 solver did not converge (or, for
``validate``, a gap above threshold).
"""

import argparse
import concurrent.futures
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path

import numpy as np

from ecw import constraints as cons
from ecw import detspace, ecwcc, ecwhf
from ecw import integrals_io as iio

log = logging.getLogger("ecw")

METHODS = ("hf", "cc", "oracle")
TOP_KEYS = {"fcidump", "properties", "experiment", "method", "n_states", "scf", "cc", "lambda",
            "seed", "out", "gen", "validate"}
LAMBDA_KEYS = {"schedule", "grid"}
GEN_KEYS = {"emit", "noise", "sigma", "ortho_weight"}
CC_GAP_TOL = 1e-6


class InputError(Exception):
    """Bad config, missing file or unreadable input (exit code 1)."""


@dataclass
class RunConfig:
    base: Path
    fcidump: Path
    properties: Path
    experiment: Path = None
    method: str = "hf"
    n_states: int = 1
    scf: dict = field(default_factory=dict)
    cc: dict = field(default_factory=dict)
    schedule: tuple = (1.0,)
    grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    seed: int = 0
    out: Path = Path("out")
    gen: dict = field(default_factory=dict)
    validate: dict = field(default_factory=dict)


def _resolve(base, value, key, must_exist=True):
    if not isinstance(value, str) or not value:
        raise InputError(f"config key '{key}' must be a path string")
    if value.startswith("pkg:"):
        path = Path(str(files("ecw.data") / value[4:]))
    else:
        path = Path(value)
        if not path.is_absolute():
            path = base / path
    if must_exist and not path.is_file():
        raise InputError(f"config key '{key}': file not found: {path}")
    return path


def _float_list(value, key):
    try:
        out = tuple(float(x) for x in value)
    except (TypeError, ValueError):
        raise InputError(f"config key '{key}' must be a list of numbers") from None
    if not out or any(x < 0 or not np.isfinite(x) for x in out):
        raise InputError(f"config key '{key}' needs non-negative finite entries")
    return out


def load_config(path, out=None, seed=None, need_experiment=False) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    base = path.resolve().parent
    for key in ("fcidump", "properties"):
        if key not in doc:
            raise InputError(f"config key '{key}' is required")
    cfg = RunConfig(base=base, fcidump=_resolve(base, doc["fcidump"], "fcidump"),
                    properties=_resolve(base, doc["properties"], "properties"))
    if doc.get("experiment") is not None:
        cfg.experiment = _resolve(base, doc["experiment"], "experiment")
    elif need_experiment:
        raise InputError("config key 'experiment' is required for this command")
    cfg.method = doc.get("method", "hf")
    if cfg.method not in METHODS:
        raise InputError(f"config key 'method' must be one of {METHODS}, got {cfg.method!r}")
    try:
        cfg.n_states = int(doc.get("n_states", 1))
        cfg.seed = int(doc.get("seed", 0)) if seed is None else int(seed)
    except (TypeError, ValueError):
        raise InputError("config keys 'n_states' and 'seed' must be integers") from None
    if cfg.n_states < 1:
        raise InputError("config key 'n_states' must be at least 1")
    for key in ("scf", "cc", "gen", "validate"):
        sub = doc.get(key, {})
        if not isinstance(sub, dict):
            raise InputError(f"config key '{key}' must be an object")
        setattr(cfg, key, dict(sub))
    bad = set(cfg.scf) - set(ecwhf.ScfConfig.__dataclass_fields__) | {"schedule"} & set(cfg.scf)
    if bad:
        raise InputError(f"unknown config keys: {sorted('scf.' + k for k in bad)}")
    bad = set(cfg.cc) - set(ecwcc.CcConfig.__dataclass_fields__) | {"schedule"} & set(cfg.cc)
    if bad:
        raise InputError(f"unknown config keys: {sorted('cc.' + k for k in bad)}")
    bad = set(cfg.gen) - GEN_KEYS
    if bad:
        raise InputError(f"unknown config keys: {sorted('gen.' + k for k in bad)}")
    lam = doc.get("lambda", {})
    if not isinstance(lam, dict) or set(lam) - LAMBDA_KEYS:
        raise InputError(f"config key 'lambda' accepts only {sorted(LAMBDA_KEYS)}")
    if "schedule" in lam:
        cfg.schedule = _float_list(lam["schedule"], "lambda.schedule")
    if "grid" in lam:
        cfg.grid = _float_list(lam["grid"], "lambda.grid")
    out_value = out if out is not None else doc.get("out", "out")
    cfg.out = Path(out_value) if out is not None else _resolve(base, out_value, "out", must_exist=False)
    return cfg


# -- input loading -------------------------------------------------------------

@dataclass
class Inputs:
    ham: object
    props: list
    cs: cons.ConstraintSet


def load_inputs(cfg: RunConfig, orthonormal=False) -> Inputs:
    try:
        ham = iio.read_fcidump(cfg.fcidump)
    except (OSError, ValueError) as exc:
        raise InputError(f"fcidump {cfg.fcidump}: {exc}") from None
    try:
        props = iio.load_properties(cfg.properties, ham.n_spin_orbitals)
        s = iio.read_overlap(cfg.properties, ham.n_spin_orbitals)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"properties {cfg.properties}: {exc}") from None
    if s is not None:
        if orthonormal and np.abs(s - np.eye(len(s))).max() > 1e-10:
            raise InputError(f"properties {cfg.properties}: method {cfg.method!r} needs an orthonormal basis")
        ham = ham.with_overlap(s)
    cs = cons.ConstraintSet()
    if cfg.experiment is not None:
        try:
            cs = cons.load_experiment(cfg.experiment)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InputError(f"experiment {cfg.experiment}: {exc}") from None
    try:
        cs.validate(cfg.n_states, {p.id for p in props})
    except cons.ConstraintError as exc:
        raise InputError(f"experiment {cfg.experiment}: {exc}") from None
    return Inputs(ham, props, cs)


def _scf_config(cfg, schedule=None):
    try:
        return ecwhf.ScfConfig.from_dict(dict(cfg.scf, seed=cfg.scf.get("seed", cfg.seed)),
                                         schedule if schedule is not None else cfg.schedule)
    except (ecwhf.ScfError, TypeError) as exc:
        raise InputError(f"config key 'scf': {exc}") from None


def _cc_config(cfg, schedule=None):
    try:
        return ecwcc.CcConfig.from_dict(cfg.cc, schedule if schedule is not None else cfg.schedule)
    except (ecwcc.CcError, TypeError) as exc:
        raise InputError(f"config key 'cc': {exc}") from None


# -- solvers -------------------------------------------------------------------

def oracle_report(ham, props, cs, n_states, schedule, initial=None, start=0.0):
    """Constrained full CI packaged as a :class:`SolveReport`."""
    opts = {"schedule": list(schedule)}
    if initial is not None:
        opts.update(initial=initial, start=start)
    res = detspace.constrained_fci_minimize(ham, cs, n_states, props, opts)
    raw = detspace._Coupling(res.vectors[0].space, cs, detspace._property_mats(props), n_states).raw(
        [v.coeffs for v in res.vectors])
    calc = cons.fitted_values(cs, raw)
    rep = iio.SolveReport(method="oracle")
    rep.converged = bool(res.converged)
    rep.energies = [float(e) for e in res.energies]
    rep.q = float(res.q)
    rep.residuals = cons.residual_rows(cs, calc)
    rep.extra = {"multipliers": [float(e) for e in res.multipliers],
                 "gradient_norm": float(res.gradient_norm),
                 "overlaps": {f"{a},{b}": float(v) for (a, b), v in sorted(res.overlaps.items())},
                 "message": res.message}
    rep.densities = {f"gamma_{n}{n}": detspace.fci_tdm(v, v) for n, v in enumerate(res.vectors)}
    return res, rep


def solve(cfg: RunConfig, inp: Inputs, schedule=None, warm=None, start=0.0):
    """Run the configured method once.  Returns ``(state, report)``.

    ``warm`` is the state returned by a previous call (same method), used as
    the starting point; ``start`` is the weight scale it was converged at.
    """
    schedule = tuple(schedule if schedule is not None else cfg.schedule)
    if warm is not None and cfg.method != "oracle":
        # re-converge at the old weights first: the stored state lacks the solver's internal orbitals
        schedule = (start,) + schedule
    if cfg.method == "hf":
        scf_cfg = _scf_config(cfg, schedule)
        return ecwhf.scf_solve(inp.ham, inp.props, inp.cs, cfg.n_states, scf_cfg, initial=warm)
    if cfg.method == "cc":
        return ecwcc.outer_driver(inp.ham, inp.props, inp.cs, cfg.n_states, _cc_config(cfg, schedule),
                                  initial=warm)
    init = None if warm is None else [v.coeffs for v in warm.vectors]
    return oracle_report(inp.ham, inp.props, inp.cs, cfg.n_states, schedule, init, start)


def _write_outputs(report, out_dir, stem, title):
    out_dir.mkdir(parents=True, exist_ok=True)
    path = iio.write_report(report, out_dir / f"{stem}.json")
    from ecw import plotting

    plotting.plot_trace(report.trace, out_dir / f"{stem}.svg", title)
    return path


# -- subcommands ---------------------------------------------------------------

def cmd_run(cfg: RunConfig, quiet=False) -> int:
    inp = load_inputs(cfg, orthonormal=cfg.method != "hf")
    _, report = _guarded(solve, cfg, inp)
    report.extra["seed"] = cfg.seed
    _write_outputs(report, cfg.out, "report", f"{cfg.method} run")
    _say(quiet, f"{cfg.method}: converged={report.converged} Q={report.q:.6e} "
                f"energies={[round(e, 10) for e in report.energies]}")
    return 0 if report.converged else 2


def cmd_gen(cfg: RunConfig, quiet=False) -> int:
    try:
        ham = iio.read_fcidump(cfg.fcidump)
        props = iio.load_properties(cfg.properties, ham.n_spin_orbitals)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    emit = cfg.gen.get("emit")
    if not isinstance(emit, list) or not emit:
        raise InputError("config key 'gen.emit' must be a non-empty list of {property, bra, ket}")
    try:
        cs = cons.synthesize_experiment(ham, props, emit, noise=cfg.gen.get("noise"), seed=cfg.seed,
                                        sigma=cfg.gen.get("sigma"))
        cs = cons.ConstraintSet(cs.data, float(cfg.gen.get("ortho_weight", 0.0)))
    except (cons.ConstraintError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"config key 'gen.emit': {exc}") from None
    cfg.out.mkdir(parents=True, exist_ok=True)
    cons.dump_experiment(cs, cfg.out / "experiment.json")
    _say(quiet, f"wrote {len(cs)} data to {cfg.out / 'experiment.json'}")
    return 0


SCAN_COLUMNS = ("scale", "Q", "Q_scaled", "E0")


def _residual_name(d):
    return f"r_{d.property_id}[{d.bra},{d.ket}]"


def cmd_scan(cfg: RunConfig, quiet=False) -> int:
    """Solve along ``lambda.grid``, warm-starting each point from the previous one.

    Q is evaluated with the unscaled weights so that the column measures the
    data misfit on a common scale; ``Q_scaled`` is the objective actually
    minimized at that point.
    """
    inp = load_inputs(cfg, orthonormal=cfg.method != "hf")
    names = [_residual_name(d) for d in inp.cs.data]
    rows, warm, prev = [], None, 0.0
    all_ok = True
    for scale in cfg.grid:
        try:
            state, rep = solve(cfg, inp, schedule=(scale,), warm=warm, start=prev)
        except (ecwcc.CcError, ecwhf.ScfError, np.linalg.LinAlgError) as exc:
            log.warning("scale %g failed: %s", scale, exc)
            rows.append(_failed_row(scale, names))
            all_ok = False
            continue
        calc = {(r["property"], (r["bra"], r["ket"])): r["calc"] for r in rep.residuals}
        ov = _overlaps_of(rep)
        row = {"scale": scale, "Q": cons.eval_Q(calc, inp.cs, ov or None), "Q_scaled": rep.q,
               "E0": rep.energies[0]}
        for d, name in zip(inp.cs.data, names):
            row[name] = (calc[d.key] - d.value) / d.sigma
        row["det_sigma_01"] = rep.extra.get("overlaps", {}).get("0,1", float("nan"))
        row["iterations"] = rep.n_iter
        row["converged"] = int(bool(rep.converged))
        all_ok = all_ok and rep.converged
        rows.append(row)
        if rep.converged:
            warm, prev = state, scale
        _say(quiet, f"scale {scale:g}: Q={row['Q']:.6e} E0={row['E0']:.10f} converged={rep.converged}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    header = list(SCAN_COLUMNS) + names + ["det_sigma_01", "iterations", "converged"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[h]) for h in header])
    (cfg.out / "scan.csv").write_text(buf.getvalue(), encoding="utf-8")
    from ecw import plotting

    plotting.plot_scan([r for r in rows if r["converged"]], names, cfg.out / "scan.svg")
    return 0 if all_ok else 2


def _overlaps_of(rep):
    """Pair overlaps in the form eval_Q expects, when the solver reported them."""
    ov = rep.extra.get("overlaps") or {}
    return {tuple(int(i) for i in k.split(",")): v for k, v in ov.items()}


def _failed_row(scale, names):
    row = {"scale": scale, "Q": float("nan"), "Q_scaled": float("nan"), "E0": float("nan"),
           "det_sigma_01": float("nan"), "iterations": 0, "converged": 0}
    row.update({n: float("nan") for n in names})
    return row


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _gaps(rep, ref_energies, ref_obs, ref_q):
    calc = {f"{r['property']}[{r['bra']},{r['ket']}]": r["calc"] for r in rep.residuals}
    per_state = np.subtract(rep.energies, ref_energies)
    return {
        "energy": float(np.max(np.abs(per_state))),
        "energy_per_state": [float(x) for x in per_state],
        "observables": float(max([abs(calc[k] - ref_obs[k]) for k in calc], default=0.0)),
        "Q": float(abs(rep.q - ref_q)),
    }


def cmd_validate(cfg: RunConfig, quiet=False) -> int:
    """Compare hf and/or cc with the exact oracles on the same inputs."""
    methods = cfg.validate.get("methods", [cfg.method] if cfg.method != "oracle" else ["cc"])
    if not set(methods) <= {"hf", "cc"}:
        raise InputError("config key 'validate.methods' accepts 'hf' and 'cc'")
    inp = load_inputs(cfg, orthonormal="cc" in methods)
    try:
        fci, fci_rep = oracle_report(inp.ham, inp.props, inp.cs, cfg.n_states, cfg.schedule)
    except detspace.OracleRefusal as exc:
        raise InputError(str(exc)) from None

    def job(method):
        sub = RunConfig(**{**cfg.__dict__, "method": method})
        return method, _guarded(solve, sub, inp)[1]

    with concurrent.futures.ThreadPoolExecutor(max_workers=_workers()) as pool:
        results = dict(pool.map(job, methods))

    doc = {"n_electrons": inp.ham.n_electrons, "oracle": {"Q": fci_rep.q, "multipliers": fci_rep.extra["multipliers"],
                                                         "energies": fci_rep.energies}}
    ok = fci.converged
    for method in methods:
        rep = results[method]
        entry = {"converged": bool(rep.converged), "Q": rep.q, "energies": rep.energies}
        if method == "cc":
            # the CC energies are the multipliers E_n of the stationarity equations
            entry["gap_vs_fci"] = _gaps(rep, fci.multipliers, fci.observables, fci.q)
            if inp.ham.n_electrons == 2:
                gap = entry["gap_vs_fci"]
                ok = ok and max(gap["energy"], gap["observables"], gap["Q"]) < CC_GAP_TOL
        else:
            entry["gap_vs_fci"] = _gaps(rep, fci.energies, fci.observables, fci.q)
            try:
                det = detspace.constrained_det_minimize(inp.ham, inp.cs.scaled(cfg.schedule[-1]), cfg.n_states,
                                                        inp.props)
                entry["gap_vs_single_determinant"] = _gaps(rep, det.energies, det.observables, det.q)
            except detspace.OracleRefusal as exc:
                entry["gap_vs_single_determinant"] = str(exc)
        ok = ok and rep.converged
        doc[method] = entry
        gap = entry["gap_vs_fci"]
        _say(quiet, f"{method}: converged={rep.converged} gaps vs FCI: energy {gap['energy']:.3e} "
                    f"observables {gap['observables']:.3e} Q {gap['Q']:.3e}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "validate.json").write_text(json.dumps(iio._jsonable(doc), indent=1, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return 0 if ok else 2


# -- plumbing ------------------------------------------------------------------

def _workers():
    raw = os.environ.get("ECW_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"ECW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"ECW_THREADS must be a positive integer, got {raw!r}")
    return n


def _guarded(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (cons.ConstraintError, detspace.OracleRefusal) as exc:
        raise InputError(str(exc)) from None


def _say(quiet, msg):
    if not quiet:
        print(msg)


COMMANDS = {"run": cmd_run, "gen": cmd_gen, "scan": cmd_scan, "validate": cmd_validate}


def build_parser():
    p = argparse.ArgumentParser(prog="ecw", description="Experimentally constrained HF and CC solvers.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides the config's 'out')")
    p.add_argument("--seed", type=int, help="random seed (overrides the config's 'seed')")
    p.add_argument("--quiet", action="store_true", help="print nothing on success")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(message)s")
    try:
        _workers()
        cfg = load_config(args.config, out=args.out, seed=args.seed,
                          need_experiment=args.command == "scan")
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](cfg, args.quiet)
    except (InputError, iio.ReportWriteError) as exc:
        print(f"ecw: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
