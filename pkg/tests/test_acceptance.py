"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from fpsi.cli import dissipation_totals, natural_residual_rates, poincare_levels
from fpsi.diagnostics import check_energy_inequality, divergence_residual, interface_residuals, stability_experiment
from fpsi.expr import parse, parse_vector
from fpsi.geometry import DomainSpec, build_discretization
from fpsi.physics import NonlinearPermeability, PhysicalParams, Sources
from fpsi.state import State
from fpsi.stepper import InitialSpec, RunConfig, rothe_run
from fpsi.verify import TIME_STUDY_PARAMS, order_study, oracle_suite, space_case, time_case

MODES = ("dynamic-linear", "quasistatic-linear", "quasistatic-nonlinear")
TANH_LAW = NonlinearPermeability(parse("1 + tanh(zeta)/2", ("zeta",)), 0.5, 1.5)
BULK = ("x1", "x2", "x3", "t")


def unit_params(mode):
    if mode == "dynamic-linear":
        return PhysicalParams()
    if mode == "quasistatic-linear":
        return PhysicalParams(rho_b=0.0, mode=mode)
    return PhysicalParams(rho_b=0.0, mode=mode, permeability=TANH_LAW)


@pytest.fixture(scope="module")
def disc():
    return build_discretization(DomainSpec(1, 0.1), 8, 16)


@pytest.fixture(scope="module")
def free_decay(disc):
    """Zero-source runs from random admissible data, with wall times."""
    out = {}
    for mode in MODES:
        cfg = RunConfig(T=1.0, N=50, params=unit_params(mode), initial=InitialSpec("random", seed=2024))
        start = time.perf_counter()
        traj = rothe_run(cfg, disc)
        check = check_energy_inequality(traj, params=cfg.params)
        out[mode] = (cfg, traj, check, time.perf_counter() - start)
    return out


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")

    return emit


def test_criterion_01_energy_inequality(free_decay, report):
    parts, ok = [], True
    for mode, (_, _, check, wall) in free_decay.items():
        worst = float(check.margins.min() / check.energies[0])
        good = check.passed and worst >= -1e-9 and wall < 10.0
        ok &= good
        parts.append(f"{mode} min margin/E0={worst:.2e} {wall:.1f}s")
    report(1, ok, "; ".join(parts))
    assert ok


def test_criterion_02_oracle_equivalence(report):
    start = time.perf_counter()
    worst = oracle_suite(n_cases=20, seed=0)
    wall = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-10 and wall < 5.0
    report(2, ok, ", ".join(f"{m} {v:.1e}" for m, v in worst.items()) + f"; {wall:.1f}s")
    assert ok


def test_criterion_03_temporal_order(report):
    start = time.perf_counter()
    parts, ok = [], True
    for mode, params in TIME_STUDY_PARAMS.items():
        st = order_study(time_case(), "time", levels=4, base_steps=25, params=params)
        assert st.sizes[0] == pytest.approx(time_case().T / 25) and st.sizes[-1] == pytest.approx(time_case().T / 200)
        lo, hi = min(st.orders.values()), max(st.orders.values())
        ok &= 0.9 <= lo and hi <= 1.1
        parts.append(f"{mode} orders in [{lo:.3f}, {hi:.3f}]")
    wall = time.perf_counter() - start
    ok &= wall < 60.0
    report(3, ok, "; ".join(parts) + f"; {wall:.1f}s")
    assert ok


def test_criterion_04_spatial_order(report):
    start = time.perf_counter()
    st = order_study(space_case(), "transverse", levels=4, base_elems=4, base_steps=2, params=PhysicalParams())
    wall = time.perf_counter() - start
    o = st.orders
    ok = all(1.8 <= o[k] <= 2.2 for k in ("p_b", "p_p", "eta", "w")) and o["u"] >= 1.8 and wall < 60.0
    report(4, ok, " ".join(f"{k}={v:.2f}" for k, v in o.items()) + f"; {wall:.1f}s")
    assert ok


def _constructed_states(free_decay):
    for _, traj, _, _ in free_decay.values():
        yield from traj.states


def test_criterion_05_interface_conditions(free_decay, report):
    worst = 0.0
    for s in _constructed_states(free_decay):
        res = interface_residuals(s, PhysicalParams())
        worst = max(worst, max(res.essential.values()) / max(1.0, s.max_abs()))
    rates, _, _ = natural_residual_rates(levels=4, base_elems=16)
    ok = worst <= 1e-12 and min(rates.values()) >= 0.9
    report(5, ok, f"essential {worst:.1e}; natural rates " + " ".join(f"{k}={v:.2f}" for k, v in rates.items()))
    assert ok


def test_criterion_06_incompressibility(free_decay, report):
    worst = max(divergence_residual(s) for s in _constructed_states(free_decay))
    ok = worst <= 1e-10
    report(6, ok, f"max divergence residual / |u| = {worst:.1e}")
    assert ok


def test_criterion_07_nonlinear_mode(free_decay, disc, report):
    cfg, traj, check, _ = free_decay["quasistatic-nonlinear"]
    fields = np.stack(traj.perm_fields)
    in_bounds = bool(fields.min() >= 0.5 and fields.max() <= 1.5)
    replay = rothe_run(cfg, disc, initial=traj.states[0], perm_fields=traj.perm_fields)
    bitwise = all(
        np.array_equal(getattr(a, n), getattr(b, n)) for a, b in zip(traj.states, replay.states) for n in State.zeros(disc).fields()
    )
    ok = in_bounds and check.passed and bitwise
    report(
        7,
        ok,
        f"k in [{fields.min():.3f}, {fields.max():.3f}], energy inequality {'holds' if check.passed else 'fails'}, "
        f"replay {'bitwise identical' if bitwise else 'differs'}",
    )
    assert ok


def growing_sources():
    return Sources(
        F_b=parse_vector("0, cos(2*pi*x1)*t^3", 2, BULK),
        S=parse("sin(2*pi*x1)*x3*t^3", BULK),
        f=parse_vector("sin(2*pi*x1)*t^3, 0", 2, BULK),
    )


def test_criterion_08_uniform_bounds(disc, report):
    parts, ok = [], True
    for mode in MODES:
        runs = [
            dissipation_totals(RunConfig(T=1.0, N=n, params=unit_params(mode), sources=growing_sources()), disc)
            for n in (50, 100)
        ]
        dE = abs(runs[1][0] - runs[0][0]) / runs[0][0]
        dD = abs(runs[1][1] - runs[0][1]) / runs[0][1]
        ok &= dE < 0.05 and dD < 0.05
        parts.append(f"{mode} max E {dE:.1%}, sum dt Diss {dD:.1%}")
    report(8, ok, "; ".join(parts))
    assert ok


def test_criterion_09_stability(disc, report):
    linear = RunConfig(T=1.0, N=50, params=unit_params("dynamic-linear"), initial=InitialSpec("random", seed=2024))
    lin = stability_experiment(linear, disc, 1e-2)
    nonlin_cfg = RunConfig(T=1.0, N=50, params=unit_params("quasistatic-nonlinear"), initial=InitialSpec("random", seed=2024))
    a = stability_experiment(nonlin_cfg, disc, 1e-2)
    b = stability_experiment(nonlin_cfg, disc, 5e-3)
    change = abs(a.ratio - b.ratio) / a.ratio
    ok = lin.ratio <= 1 + 1e-8 and change < 0.1
    report(9, ok, f"linear ratio {lin.ratio:.10f}; nonlinear ratios {a.ratio:.6f} / {b.ratio:.6f} (change {change:.2%})")
    assert ok


def test_criterion_10_poincare(report):
    res = poincare_levels(d_plane=1, M=2, base_elems=4, levels=3)
    finite = all(math.isfinite(v) for row in res["levels"] for v in row.values())
    spread = max(res["spread"].values())
    diverges = all(v == math.inf for v in res["ablated"].values())
    ok = finite and spread <= 0.1 and diverges
    report(10, ok, f"C_eta, C_pb = {res['levels'][-1]}, spread {spread:.2%}, ablated {res['ablated']}")
    assert ok
