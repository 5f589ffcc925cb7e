import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpsi.geometry import DomainSpec, build_discretization
from fpsi.state import (
    FieldLayout,
    State,
    Trajectory,
    apply_constraints,
    difference_quotient,
    energy_norm_E,
    fluid_content,
    sd_norm,
)

from conftest import synthesize


def _linear_eta(disc):
    """eta = (0, x3) on the zero mode."""
    eta = np.zeros((disc.n_modes, disc.ncomp, disc.biot_mesh.n_nodes))
    eta[disc.zero_mode, -1] = disc.biot_mesh.nodes
    return eta


def test_zero_vector_gives_zero_state(small_disc):
    layout = FieldLayout(small_disc)
    s = apply_constraints(np.zeros((small_disc.n_modes, layout.n_full)), layout)
    assert s.max_abs() == 0.0


def test_w_drives_normal_displacement_trace(small_disc):
    layout = FieldLayout(small_disc)
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(small_disc.n_modes, layout.n_full))
    i = small_disc.zero_mode + 1
    raw[i, layout.slices["w"].start] = 1.0
    s = apply_constraints(raw, layout)
    assert s.eta[i, -1, 0] == 1.0
    assert np.all(s.eta[:, :-1, 0] == 0)
    assert np.all(s.u[:, :, 0] == 0)
    assert np.array_equal(s.p_p[:, -1], s.p_b[:, 0])


@given(st.integers(0, 2**31 - 1))
def test_constraints_are_idempotent(seed):
    disc = build_discretization(DomainSpec(1), 1, 2)
    layout = FieldLayout(disc)
    raw = np.random.default_rng(seed).normal(size=(disc.n_modes, layout.n_full))
    once = layout.constrain(raw)
    assert np.array_equal(layout.constrain(once), once)


def test_free_indexing_covers_each_unconstrained_dof_once(small_disc):
    layout = FieldLayout(small_disc)
    free = set(layout.free.tolist())
    assert len(free) == layout.n_free
    assert free.isdisjoint(layout.slaves)
    assert free | set(layout.slaves) == set(range(layout.n_full))


def test_energy_norm_of_zero_and_rigid_translation(small_disc):
    eta = np.zeros((small_disc.n_modes, 2, small_disc.biot_mesh.n_nodes))
    assert energy_norm_E(eta, small_disc) == 0.0
    eta[small_disc.zero_mode] = 1.0
    assert energy_norm_E(eta, small_disc, squared=True) == pytest.approx(0.0, abs=1e-28)


def test_energy_norm_of_linear_displacement(small_disc):
    assert energy_norm_E(_linear_eta(small_disc), small_disc, squared=True) == pytest.approx(3.0, rel=1e-13)


def test_sd_norm_of_zero_state(small_disc):
    assert sd_norm(State.zeros(small_disc)) == 0.0


def _w_only(disc, xi):
    layout = FieldLayout(disc)
    raw = np.zeros((disc.n_modes, layout.n_full))
    z = disc.zero_mode
    for i in {z + xi, z - xi}:
        raw[i, layout.slices["w"].start] = 1.0
    return apply_constraints(raw, layout)


@pytest.mark.parametrize("xi", [0, 1, 2])
def test_sd_norm_of_plate_mode(xi):
    # eta_3 becomes the hat function of the x3 = 0 node; per mode its energy is
    # k^2 int phi^2 + 3 int phi'^2 = k^2 he/3 + 3/he
    n_el = 5
    disc = build_discretization(DomainSpec(1), 2, n_el)
    he = 1.0 / n_el
    k = 2 * np.pi * xi
    per_mode = k**4 + 1 + k**2 * he / 3 + 3 / he
    copies = 1 if xi == 0 else 2
    assert sd_norm(_w_only(disc, xi), squared=True) == pytest.approx(copies * per_mode, rel=1e-12)


@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_sd_norm_is_homogeneous(c):
    disc = build_discretization(DomainSpec(1), 1, 2)
    layout = FieldLayout(disc)
    raw = np.random.default_rng(1).normal(size=(disc.n_modes, layout.n_full))
    s = apply_constraints(raw, layout)
    assert sd_norm(s.scaled(c)) == pytest.approx(abs(c) * sd_norm(s), rel=1e-12)


def test_fluid_content_of_constant_pressure_and_linear_displacement(small_disc):
    s = State.zeros(small_disc)
    p_b = np.zeros_like(s.p_b)
    p_b[small_disc.zero_mode] = 2.0
    s = s.replace(p_b=p_b, eta=_linear_eta(small_disc))
    zeta = fluid_content(s, "biot")
    assert np.allclose(zeta[small_disc.zero_mode], 3.0, atol=1e-13)
    assert np.allclose(np.delete(zeta, small_disc.zero_mode, axis=0), 0.0)


def test_fluid_content_of_zero_state(small_disc):
    assert np.all(fluid_content(State.zeros(small_disc), "biot") == 0)
    assert np.all(fluid_content(State.zeros(small_disc), "plate") == 0)


def test_fluid_content_matches_finite_differences():
    disc = build_discretization(DomainSpec(1), 2, 4)
    rng = np.random.default_rng(3)
    eta = rng.normal(size=(disc.n_modes, 2, disc.biot_mesh.n_nodes)) + 1j * rng.normal(size=(disc.n_modes, 2, disc.biot_mesh.n_nodes))
    eta = 0.5 * (eta + np.conj(eta[::-1]))
    s = State.zeros(disc).replace(eta=eta)
    zeta = fluid_content(s, "biot", c=0.0, alpha=1.0)
    mesh = disc.biot_mesh
    x1 = 0.3
    phase = np.exp(2j * np.pi * disc.modes[:, 0] * x1)
    for q, z in enumerate(mesh.quad_points[:8]):
        exact = float(np.real(np.sum(zeta[:, q] * phase)))
        dx = 1e-5
        d1 = (synthesize(eta[:, 0], mesh, disc, x1 + dx, z)[0] - synthesize(eta[:, 0], mesh, disc, x1 - dx, z)[0]) / (2 * dx)
        # eta_3 is linear inside the element, so a one-sided pair inside it is exact up to rounding
        e = mesh.locate(np.array([z]))[0]
        lo, hi = mesh.vertices[e], mesh.vertices[e + 1]
        dz = 0.25 * (hi - lo)
        zp, zm = min(z + dz, hi - 1e-12), max(z - dz, lo + 1e-12)
        d3 = (synthesize(eta[:, 1], mesh, disc, x1, zp)[0] - synthesize(eta[:, 1], mesh, disc, x1, zm)[0]) / (zp - zm)
        assert d1 + d3 == pytest.approx(exact, rel=1e-6, abs=1e-8)


def _scalar_traj(disc, values, dt):
    states = []
    for n, v in enumerate(values):
        w = np.zeros(disc.n_modes)
        w[disc.zero_mode] = v
        states.append(State.zeros(disc, t=n * dt).replace(w=w))
    return Trajectory(states=states, dt=dt)


def test_difference_quotient_examples(small_disc):
    dt = 0.1
    z = small_disc.zero_mode
    assert all(np.all(q == 0) for q in difference_quotient(_scalar_traj(small_disc, [2.0] * 4, dt), "w"))
    lin = difference_quotient(_scalar_traj(small_disc, [n * dt for n in range(5)], dt), "w")
    assert all(q[z] == pytest.approx(1.0) for q in lin)
    quad = difference_quotient(_scalar_traj(small_disc, [(n * dt) ** 2 for n in range(6)], dt), "w")
    for n, q in enumerate(quad, start=1):
        assert q[z].real == pytest.approx((2 * n - 1) * dt, rel=1e-12)


def test_state_is_immutable(small_disc):
    s = State.zeros(small_disc)
    with pytest.raises(ValueError):
        s.u[0, 0, 0] = 1.0
