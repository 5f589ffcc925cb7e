import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpsi.diagnostics import (
    check_energy_inequality,
    compute_energy,
    divergence_residual,
    interface_residuals,
    poincare_probe,
    stability_experiment,
)
from fpsi.geometry import DomainSpec, build_discretization
from fpsi.physics import PhysicalParams
from fpsi.state import State, Trajectory
from fpsi.stepper import InitialSpec, RunConfig, project_initial_data, rothe_run


@pytest.fixture(scope="module")
def decay_run():
    disc = build_discretization(DomainSpec(1, 0.1), 2, 3)
    params = PhysicalParams()
    cfg = RunConfig(T=0.2, N=5, params=params, initial=InitialSpec("random", seed=11))
    return disc, params, rothe_run(cfg, disc)


def test_zero_state_has_no_energy(small_disc):
    rep = compute_energy(State.zeros(small_disc), PhysicalParams())
    assert rep.E == 0.0 and rep.Diss == 0.0
    assert "diss_viscoelastic" not in rep.row()
    assert "diss_viscoelastic" in compute_energy(State.zeros(small_disc), PhysicalParams(mu_v=0.1)).row()


def test_uniform_fluid_velocity_kinetic_energy(small_disc):
    u = np.zeros_like(State.zeros(small_disc).u)
    u[small_disc.zero_mode, 0, :] = 1.0
    rep = compute_energy(State.zeros(small_disc).replace(u=u), PhysicalParams())
    assert rep.kinetic["fluid"] == pytest.approx(0.5, rel=1e-14)
    assert rep.kinetic["plate"] == 0.0 and rep.kinetic["biot"] == 0.0


@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_energy_invariant_under_in_plane_shift(shift, seed):
    disc = build_discretization(DomainSpec(1, 0.1), 2, 2)
    s = project_initial_data(InitialSpec("random", seed=seed), disc, PhysicalParams())
    phase = np.exp(2j * np.pi * disc.modes[:, 0] * shift)

    def rot(a):
        return a * phase.reshape((-1,) + (1,) * (a.ndim - 1))

    moved = s.replace(**{name: rot(arr) for name, arr in s.fields().items()})
    a, b = compute_energy(s, PhysicalParams()), compute_energy(moved, PhysicalParams())
    assert b.E == pytest.approx(a.E, rel=1e-12)
    assert b.Diss == pytest.approx(a.Diss, rel=1e-12)


def test_computed_run_satisfies_energy_inequality(decay_run):
    _, params, traj = decay_run
    check = check_energy_inequality(traj, params=params)
    assert check.passed
    assert np.all(check.margins >= -1e-9 * check.energies[0])


def test_time_reversed_run_violates_energy_inequality(decay_run):
    _, params, traj = decay_run
    backwards = Trajectory(states=traj.states[::-1], dt=traj.dt, params=params)
    check = check_energy_inequality(backwards, params=params)
    assert not check.passed
    assert check.margins.min() < 0


def test_restart_link_margin_checked(decay_run):
    _, params, traj = decay_run
    E0 = compute_energy(traj.states[0], params).E
    linked = Trajectory(states=traj.states, dt=traj.dt, params=params, prior_energy=0.5 * E0)
    check = check_energy_inequality(linked, params=params)
    assert check.link_margin == pytest.approx(-0.5 * E0)
    assert not check.passed


def test_zero_state_residuals_vanish(small_disc):
    res = interface_residuals(State.zeros(small_disc), PhysicalParams())
    assert all(v == 0.0 for v in res.essential.values())
    assert all(v == 0.0 for v in res.natural.values())


def test_computed_states_meet_essential_conditions(decay_run):
    _, params, traj = decay_run
    for s in traj.states:
        res = interface_residuals(s, params)
        assert max(res.essential.values()) <= 1e-12 * max(1.0, s.max_abs())


def test_constrained_mismatch_is_reported(small_disc):
    s = State.zeros(small_disc)
    w = np.zeros_like(s.w)
    w[small_disc.zero_mode] = 2.0
    res = interface_residuals(s.replace(w=w), PhysicalParams())
    assert res.essential["kinematic_trace"] == pytest.approx(2.0)


def test_projected_velocity_is_discretely_divergence_free(decay_run):
    _, _, traj = decay_run
    for s in traj.states:
        assert divergence_residual(s) < 1e-10


def test_poincare_constants_are_finite(small_disc):
    c = poincare_probe(small_disc)
    assert all(math.isfinite(v) and v > 0 for v in c.values())


def test_dropping_interface_constraints_frees_rigid_modes(small_disc):
    c = poincare_probe(small_disc, ablate=True)
    assert c["C_eta"] == math.inf and c["C_pb"] == math.inf


def test_zero_perturbation_flagged(small_disc):
    cfg = RunConfig(T=0.1, N=2)
    res = stability_experiment(cfg, small_disc, 0.0)
    assert res.flagged and math.isnan(res.ratio)


def test_linear_perturbation_does_not_grow(small_disc):
    cfg = RunConfig(T=0.2, N=4, initial=InitialSpec("random", seed=2))
    res = stability_experiment(cfg, small_disc, 1e-2)
    assert not res.flagged
    assert res.ratio <= 1 + 1e-8
    assert res.energies[0] == pytest.approx(1e-4, rel=1e-10)
