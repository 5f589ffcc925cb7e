import numpy as np
import pytest

from fpsi.diagnostics import compute_energy, energy_of_difference
from fpsi.expr import parse, parse_vector
from fpsi.geometry import DomainSpec, build_discretization
from fpsi.physics import PhysicalParams, Sources
from fpsi.state import State
from fpsi.stepper import InitialSpec, RunConfig, Stepper, project_initial_data, rothe_run, step
from fpsi.verify import relative_difference

BULK = ("x1", "x2", "x3")


def smooth_initial():
    return InitialSpec(
        "expressions",
        fields={
            "eta": parse_vector("0, sin(2*pi*x1)*(1 - x3)^2", 2, BULK),
            "w": parse("sin(2*pi*x1)", ("x1", "x2")),
            "p_b": parse("cos(2*pi*x1)*(1 + x3)", BULK),
            "p_p": parse("cos(2*pi*x1)", ("x1", "x2", "s")),
        },
    )


@pytest.fixture(scope="module")
def disc():
    return build_discretization(DomainSpec(1, 0.1), 1, 4)


def test_zero_spec_gives_zero_state(disc):
    s = project_initial_data(InitialSpec(), disc, PhysicalParams())
    assert s.max_abs() == 0.0 and s.t == 0.0


def test_compatible_expressions_accepted(disc):
    s = project_initial_data(smooth_initial(), disc, PhysicalParams())
    assert np.allclose(s.w, s.eta[:, 1, 0], atol=1e-14)
    assert s.hermitian_defect() < 1e-14


def test_plate_deflection_without_biot_displacement_rejected(disc):
    spec = InitialSpec("expressions", fields={"w": parse("sin(2*pi*x1)", ("x1", "x2"))})
    with pytest.raises(ValueError, match="kinematic trace"):
        project_initial_data(spec, disc, PhysicalParams())


def test_pressure_trace_mismatch_rejected(disc):
    spec = InitialSpec("expressions", fields={"p_p": parse("1", ("x1", "x2", "s"))})
    with pytest.raises(ValueError, match="pressure trace"):
        project_initial_data(spec, disc, PhysicalParams())


def test_biot_velocity_rejected_without_inertia(disc):
    spec = InitialSpec("expressions", fields={"etadot": parse_vector("0", 2, BULK)})
    with pytest.raises(ValueError, match="etadot"):
        project_initial_data(spec, disc, PhysicalParams(rho_b=0.0, mode="quasistatic-linear"))


def test_zero_data_stays_zero(disc):
    nxt = step(State.zeros(disc), 0.1, 0.1, PhysicalParams(), Sources(), disc)
    assert nxt.max_abs() == 0.0 and nxt.t == pytest.approx(0.1)


def test_mismatched_target_time_rejected(disc):
    with pytest.raises(ValueError):
        step(State.zeros(disc), 0.1, 0.3, PhysicalParams(), Sources(), disc)


@pytest.mark.parametrize("params", [PhysicalParams(), PhysicalParams(rho_b=0.0, mode="quasistatic-linear")])
def test_energy_does_not_grow_without_sources(disc, params):
    cfg = RunConfig(T=0.5, N=10, params=params, initial=InitialSpec("random", seed=7))
    traj = rothe_run(cfg, disc)
    E = [compute_energy(s, params).E for s in traj.states]
    assert all(b <= a * (1 + 1e-10) for a, b in zip(E, E[1:]))
    assert E[-1] < E[0]


def test_two_half_steps_differ_from_one_full_step_at_second_order(disc):
    params = PhysicalParams()
    s0 = project_initial_data(smooth_initial(), disc, params)
    gaps = []
    for dt in (4e-3, 2e-3, 1e-3):
        half = Stepper(disc, params, dt / 2)
        a = half.advance(half.advance(s0)[0])[0]
        b = Stepper(disc, params, dt).advance(s0)[0]
        gaps.append(np.sqrt(energy_of_difference(a, b, params)))
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    assert np.all(ratios > 3.5)


def test_single_step_run_equals_step(disc):
    params = PhysicalParams()
    s0 = project_initial_data(smooth_initial(), disc, params)
    traj = rothe_run(RunConfig(T=0.2, N=1, params=params), disc, initial=s0)
    one = step(s0, 0.2, 0.2, params, Sources(), disc)
    assert relative_difference(traj.states[-1], one) == 0.0


def test_restart_continues_the_same_trajectory(disc):
    params = PhysicalParams()
    s0 = project_initial_data(smooth_initial(), disc, params)
    full = rothe_run(RunConfig(T=0.4, N=8, params=params), disc, initial=s0)
    first = rothe_run(RunConfig(T=0.2, N=4, params=params), disc, initial=s0)
    rest = rothe_run(RunConfig(T=0.2, N=4, params=params), disc, initial=first.states[-1])
    assert rest.states[-1].t == pytest.approx(0.4)
    assert relative_difference(full.states[-1], rest.states[-1]) < 1e-12


def test_doubling_steps_halves_successive_differences(disc):
    params = PhysicalParams(D=0.01)
    s0 = project_initial_data(smooth_initial(), disc, params)
    finals = [rothe_run(RunConfig(T=0.1, N=n, params=params), disc, initial=s0).states[-1] for n in (10, 20, 40, 80)]
    diffs = [np.sqrt(energy_of_difference(a, b, params)) for a, b in zip(finals, finals[1:])]
    ratios = np.array(diffs[:-1]) / np.array(diffs[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3))


def test_invalid_run_length_rejected():
    with pytest.raises(ValueError):
        RunConfig(T=1.0, N=0)
    with pytest.raises(ValueError):
        RunConfig(T=0.0, N=5)
    assert RunConfig(T=1.0, N=200).snapshot_cadence == 4
    assert RunConfig(T=1.0, N=20).snapshot_cadence == 1
