"""Command line entry point: ``fpsi run | verify | study | probe``.

Exit codes: 0 success, 1 verification failure, 2 bad configuration or input,
3 solver failure, 4 invariant violation under ``--strict``.
"""

from __future__ import annotations

import os

_threads = os.environ.get("FPSI_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER, EXIT_STRICT = 0, 1, 2, 3, 4

log = logging.getLogger("fpsi")

ENERGY_TERMS = (
    "kin_fluid", "kin_plate", "kin_biot",
    "pot_plate_pressure", "pot_elastic", "pot_biot_pressure", "pot_bending", "pot_foundation",
    "diss_viscous", "diss_slip", "diss_plate_filtration", "diss_biot_filtration", "diss_viscoelastic",
)  # fmt: skip
RESIDUAL_TERMS = (
    "res_kinematic_trace", "res_pressure_trace", "res_no_slip",
    "res_flux", "res_filtration", "res_normal_stress", "res_bjs", "res_biot_traction",
)  # fmt: skip
ENERGY_COLUMNS = ("n", "t") + ENERGY_TERMS + ("E", "Diss", "work", "margin") + RESIDUAL_TERMS + (
    "div_residual", "iterations", "clamped",
)


class StrictViolation(RuntimeError):
    pass


class _StderrHandler(logging.Handler):
    """Writes to whatever sys.stderr is at emit time."""

    def emit(self, record: logging.LogRecord) -> None:
        print(record.getMessage(), file=sys.stderr)


def _state_norm(s) -> float:
    return math.sqrt(sum(float(np.sum(np.abs(getattr(s, n)) ** 2)) for n in ("u", "p_f", "w", "p_p", "eta", "p_b")))


def _load(path: str, args):
    from .config import ConfigError, load_config
    from .geometry import build_discretization

    cfg = load_config(path)
    run = cfg.run
    changes = {}
    if getattr(args, "steps", None) is not None:
        changes["N"] = args.steps
    if getattr(args, "dt", None) is not None:
        N = round(run.T / args.dt)
        if N < 1 or abs(N * args.dt - run.T) > 1e-9 * run.T:
            raise ConfigError(f"--dt {args.dt} does not divide T = {run.T}")
        changes["N"] = N
    if changes:
        try:
            cfg.run = replace(run, **changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if getattr(args, "modes", None) is not None:
        d = cfg.disc
        if args.modes < 0:
            raise ConfigError("--modes must be non-negative")
        cfg.disc = build_discretization(d.domain, args.modes, d.n_elems, d.degrees)
        if cfg.run.initial.kind == "state":
            raise ConfigError("--modes cannot be combined with [initial] kind = mms")
    if getattr(args, "out", None) is not None:
        cfg.output.directory = Path(args.out)
    return cfg


def _provenance(cfg, **extra):
    from .io import config_hash, provenance

    return provenance(config_hash(cfg.text), cfg.run.params.mode.value, **extra)


def cmd_run(args) -> int:
    from .config import ConfigError
    from .diagnostics import compute_energy, divergence_residual, interface_residuals, source_work
    from .io import load_snapshot, save_snapshot, write_csv
    from .linsolve import SolverError
    from .spectral import Collocation
    from .stepper import StepFailure, project_initial_data, rothe_run

    try:
        cfg = _load(args.config, args)
        run, disc = cfg.run, cfg.disc
        prior_energy = None
        if run.initial.kind == "snapshot":
            initial, header = load_snapshot(run.initial.path, disc)
            prior_energy = header.get("energy")
        else:
            initial = project_initial_data(run.initial, disc, run.params)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"fpsi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = cfg.output.directory
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg)
    colloc = Collocation(disc)
    cadence = run.snapshot_cadence
    rows = []
    prev = {"E": None}
    scale = max(_state_norm(initial), 1e-300)

    def record(n, s, report, perm):
        rep = compute_energy(s, run.params, perm if n > 0 else _initial_perm(run.params), colloc)
        row = {"n": n, "t": s.t}
        vals = rep.row()
        row.update({k: vals.get(k, 0.0) for k in ENERGY_TERMS})
        row["E"], row["Diss"] = rep.E, rep.Diss
        work = 0.0
        if n > 0 and not run.sources.is_zero:
            l2, m2 = source_work(s, run.sources, colloc)[1]
            work = l2 / 2 + m2 / 2
        row["work"] = work
        if n == 0:
            row["margin"] = 0.0 if prior_energy is None else prior_energy - rep.E
        else:
            row["margin"] = prev["E"] + run.dt * work - rep.E - run.dt * rep.Diss
        prev["E"] = rep.E
        res = interface_residuals(s, run.params, perm if n > 0 else None, run.sources)
        for key, val in {**res.essential, **res.natural}.items():
            row["res_" + key] = val
        row["div_residual"] = divergence_residual(s)
        row["iterations"] = report.iterations if report else 0
        row["clamped"] = report.clamped if report else 0
        rows.append(row)
        log.info(
            "step n=%d t=%.6g E=%.6e Diss=%.6e iterations=%d clamped=%d",
            n, s.t, row["E"], row["Diss"], row["iterations"], row["clamped"],
        )  # fmt: skip
        if cfg.output.snapshots and (n % cadence == 0 or n == run.N):
            save_snapshot(out / f"snap_{n:06d}.fpsi", s, prov, energy=rep.E)
        if args.strict:
            _strict_checks(row, rows[0]["E"], prior_energy, scale)

    try:
        rothe_run(run, disc, initial=initial, on_step=record)
    except StrictViolation as exc:
        write_csv(out / "energy.csv", ENERGY_COLUMNS, rows, prov)
        print(f"fpsi: invariant violation: {exc}", file=sys.stderr)
        return EXIT_STRICT
    except (StepFailure, SolverError) as exc:
        write_csv(out / "energy.csv", ENERGY_COLUMNS, rows, prov)
        print(f"fpsi: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"fpsi: invalid initial state: {exc}", file=sys.stderr)
        return EXIT_STRICT if args.strict else EXIT_CONFIG
    write_csv(out / "energy.csv", ENERGY_COLUMNS, rows, prov)
    return EXIT_OK


def _initial_perm(params):
    from .physics import ConstantPermeability

    return None if isinstance(params.permeability, ConstantPermeability) else 1.0


def _strict_checks(row, E0, prior_energy, scale) -> None:
    ref = prior_energy if prior_energy else E0
    ref = ref if ref and ref > 0 else 1.0
    if row["margin"] < -1e-9 * ref:
        raise StrictViolation(f"energy inequality fails at n={row['n']} (margin {row['margin']:.3e})")
    for key in ("res_kinematic_trace", "res_pressure_trace", "res_no_slip"):
        if key in row and row[key] > 1e-12 * scale:
            raise StrictViolation(f"essential condition {key} violated at n={row['n']} ({row[key]:.3e})")
    if "div_residual" in row and row["div_residual"] > 1e-10:
        raise StrictViolation(f"divergence residual {row['div_residual']:.3e} at n={row['n']}")


def _verify_oracle(args) -> dict:
    from .verify import oracle_suite

    worst = oracle_suite(n_cases=args.cases)
    return {"suite": "oracle", "tolerance": 1e-10, "max_relative_difference": worst, "pass": all(v <= 1e-10 for v in worst.values())}


def _verify_mms(args) -> dict:
    from .physics import PhysicalParams
    from .verify import TIME_STUDY_PARAMS, order_study, space_case, time_case

    report = {"suite": "mms", "refine": args.refine, "levels": args.levels, "studies": []}
    ok = True
    if args.refine == "time":
        for mode, params in TIME_STUDY_PARAMS.items():
            st = order_study(time_case(), "time", levels=args.levels, base_steps=25, params=params)
            passed = all(0.9 <= v <= 1.1 for v in st.orders.values())
            ok &= passed
            report["studies"].append({"mode": mode, "sizes": st.sizes, "orders": st.orders, "flags": st.flags, "pass": passed})
    else:
        st = order_study(space_case(), "transverse", levels=args.levels, base_elems=4, base_steps=2, params=PhysicalParams())
        passed = all(
            (v >= 1.8) if name == "u" else (1.8 <= v <= 2.2) for name, v in st.orders.items() if name != "p_f"
        )
        ok &= passed
        report["studies"].append({"mode": "dynamic-linear", "sizes": st.sizes, "orders": st.orders, "flags": st.flags, "pass": passed})
    report["pass"] = bool(ok)
    return report


def natural_residual_rates(levels: int = 4, base_elems: int = 16) -> tuple[dict[str, float], list[dict[str, float]], list[float]]:
    """Slopes of the natural interface residuals over the finest three levels of the transverse MMS sequence.

    The residuals are pointwise traces of piecewise-linear derivatives, so
    their asymptotic rate is exactly one; coarse levels are skipped.
    """
    from .physics import PhysicalParams
    from .verify import _slope, order_study, space_case

    st = order_study(
        space_case(), "transverse", levels=levels, base_elems=base_elems, base_steps=2, params=PhysicalParams(), with_residuals=True
    )
    rates = {}
    for key in st.residuals[0]:
        vals = [r[key] for r in st.residuals[-3:]]
        rates[key] = float("inf") if max(vals) < 1e-12 else _slope(st.sizes[-3:], vals)
    return rates, st.residuals, st.sizes


def _verify_interfaces(args) -> dict:
    rates, residuals, sizes = natural_residual_rates(args.levels)
    passed = all(r >= 0.9 for r in rates.values())
    return {"suite": "interfaces", "sizes": sizes, "natural_residuals": residuals, "rates": rates, "pass": passed}


def poincare_levels(d_plane: int = 1, M: int = 2, base_elems: int = 4, levels: int = 3) -> dict:
    """Poincare constants on successive transverse refinements plus the unconstrained variant."""
    from .diagnostics import poincare_probe
    from .geometry import DomainSpec, build_discretization

    rows = []
    for lev in range(levels):
        disc = build_discretization(DomainSpec(d_plane), M, base_elems * 2**lev)
        rows.append(poincare_probe(disc))
    ablated = poincare_probe(build_discretization(DomainSpec(d_plane), M, base_elems), ablate=True)
    spread = {}
    for key in ("C_eta", "C_pb"):
        vals = [r[key] for r in rows]
        spread[key] = (max(vals) - min(vals)) / max(vals) if all(map(math.isfinite, vals)) else float("inf")
    finite = all(math.isfinite(r[k]) and r[k] > 0 for r in rows for k in r)
    passed = finite and all(v <= 0.1 for v in spread.values()) and not math.isfinite(ablated["C_eta"])
    return {"levels": rows, "spread": spread, "ablated": ablated, "pass": passed}


def _verify_poincare(args) -> dict:
    return {"suite": "poincare", **poincare_levels(levels=args.levels)}


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def cmd_verify(args) -> int:
    suites = {"oracle": _verify_oracle, "mms": _verify_mms, "interfaces": _verify_interfaces, "poincare": _verify_poincare}
    if args.levels is None:
        args.levels = 3 if args.suite == "poincare" else 4
    if args.levels < 3:
        print("fpsi: --levels must be at least 3", file=sys.stderr)
        return EXIT_CONFIG
    report = suites[args.suite](args)
    print(json.dumps(_jsonable(report), sort_keys=True, indent=1))
    return EXIT_OK if report["pass"] else EXIT_FAIL


def _study_dt_refinement(cfg, levels: int = 4):
    from .diagnostics import energy_of_difference
    from .stepper import project_initial_data, rothe_run

    init = project_initial_data(cfg.run.initial, cfg.disc, cfg.run.params)
    finals, rows = [], []
    for lev in range(levels):
        run = replace(cfg.run, N=cfg.run.N * 2**lev)
        finals.append(rothe_run(run, cfg.disc, initial=init).states[-1])
        diff = math.sqrt(energy_of_difference(finals[-1], finals[-2], run.params)) if lev else float("nan")
        prev_diff = rows[-1]["difference"] if rows else float("nan")
        rows.append({"N": run.N, "dt": run.dt, "difference": diff, "ratio": prev_diff / diff if lev > 1 else float("nan")})
    return ("N", "dt", "difference", "ratio"), rows


def _study_stability(cfg, deltas=(1e-2, 5e-3)):
    from .diagnostics import stability_experiment

    rows = []
    for delta in deltas:
        res = stability_experiment(cfg.run, cfg.disc, delta)
        rows.append({"delta": delta, "ratio": res.ratio})
    return ("delta", "ratio"), rows


def dissipation_totals(run, disc, initial=None) -> tuple[float, float]:
    """max_n E^n and sum_n dt Diss^n of one run."""
    from .diagnostics import check_energy_inequality
    from .stepper import rothe_run

    traj = rothe_run(run, disc, initial=initial)
    chk = check_energy_inequality(traj, run.sources)
    return float(np.max(chk.energies)), float(run.dt * np.sum(chk.dissipation[1:]))


def _study_dissipation(cfg):
    from .stepper import project_initial_data

    init = project_initial_data(cfg.run.initial, cfg.disc, cfg.run.params)
    rows = []
    for factor in (1, 2):
        run = replace(cfg.run, N=cfg.run.N * factor)
        Emax, total = dissipation_totals(run, cfg.disc, init)
        rows.append({"N": run.N, "dt": run.dt, "max_E": Emax, "total_dissipation": total})
    for key in ("max_E", "total_dissipation"):
        a, b = rows[0][key], rows[1][key]
        rows[1][f"change_{key}"] = abs(b - a) / abs(a) if a else 0.0
        rows[0][f"change_{key}"] = 0.0
    return ("N", "dt", "max_E", "total_dissipation", "change_max_E", "change_total_dissipation"), rows


def cmd_study(args) -> int:
    from .config import ConfigError
    from .io import write_csv
    from .linsolve import SolverError
    from .stepper import StepFailure

    try:
        cfg = _load(args.config, args)
    except (ConfigError, ValueError) as exc:
        print(f"fpsi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    kinds = {"dt-refinement": _study_dt_refinement, "stability": _study_stability, "dissipation": _study_dissipation}
    try:
        columns, rows = kinds[args.kind](cfg)
    except (StepFailure, SolverError) as exc:
        print(f"fpsi: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = cfg.output.directory
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv(out / f"study_{args.kind}.csv", columns, rows, _provenance(cfg, study=args.kind))
    print(path)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .config import ConfigError
    from .diagnostics import poincare_probe

    try:
        cfg = _load(args.config, args)
        result = {"constrained": poincare_probe(cfg.disc, cfg.run.params), "ablated": poincare_probe(cfg.disc, cfg.run.params, ablate=True)}
    except (ConfigError, ValueError) as exc:
        print(f"fpsi: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(_jsonable(result), sort_keys=True, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    p = argparse.ArgumentParser(prog="fpsi", description="Layered Stokes / poroelastic plate / Biot simulator")
    p.add_argument("--version", action="version", version=f"fpsi {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress the per-step log")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="march a configuration and write energy.csv and snapshots")
    r.add_argument("config")
    r.add_argument("--dt", type=float, help="time step; must divide T")
    r.add_argument("--steps", type=int, help="number of steps N")
    r.add_argument("--modes", type=int, help="highest Fourier index M")
    r.add_argument("--out", help="output directory")
    r.add_argument("--strict", action="store_true", help="exit 4 on any energy or constraint violation")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run a built-in verification suite")
    v.add_argument("suite", choices=("oracle", "mms", "interfaces", "poincare"))
    v.add_argument("--refine", choices=("time", "transverse"), default="time")
    v.add_argument("--levels", type=int)
    v.add_argument("--cases", type=int, default=20, help="oracle cases per run mode")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("study", help="multi-run study on one configuration")
    s.add_argument("kind", choices=("dt-refinement", "stability", "dissipation"))
    s.add_argument("config")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_study)

    pr = sub.add_parser("probe", help="Poincare constants of a configuration's discretization")
    pr.add_argument("what", choices=("poincare",))
    pr.add_argument("config")
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        log.addHandler(_StderrHandler())
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
