import numpy as np
import pytest

from fpsi.assembly import StepOperator, assemble_step
from fpsi.geometry import DomainSpec, build_discretization
from fpsi.linsolve import SolverError, solve_direct, solve_iterative
from fpsi.physics import PhysicalParams, Sources
from fpsi.spectral import Collocation
from fpsi.state import State
from fpsi.stepper import InitialSpec, project_initial_data
from fpsi.verify import dense_reference_step, relative_difference

DT = 0.05


def _varying_k(disc, colloc, amp=0.1):
    x1 = colloc.points[:, 0]
    zq = disc.biot_mesh.quad_points
    return 1 + amp * np.sin(2 * np.pi * x1)[:, None] * zq[None, :]


def _system(disc, perm=1.0, seed=3):
    params = PhysicalParams()
    prev = project_initial_data(InitialSpec("random", seed=seed), disc, params)
    return assemble_step(prev, DT, prev.t + DT, params, perm, Sources(), disc), prev, params


def test_zero_rhs_gives_zero_solution(small_disc):
    sys = assemble_step(State.zeros(small_disc), DT, DT, PhysicalParams(), 1.0, Sources(), small_disc)
    for solver in (solve_direct, solve_iterative):
        s, rep = solver(sys)
        assert s.max_abs() == 0.0 and rep.residual == 0.0


@pytest.mark.parametrize("solver", [solve_direct, solve_iterative])
def test_manufactured_rhs_is_recovered(small_disc, solver):
    sys, _, _ = _system(small_disc)
    op = sys.operator
    rng = np.random.default_rng(0)
    x = rng.normal(size=sys.rhs.shape) + 1j * rng.normal(size=sys.rhs.shape)
    x = 0.5 * (x + np.conj(x[::-1]))
    sys.rhs = op.apply(x)
    s, _ = solver(sys)
    expected = sys.to_state(x)
    assert relative_difference(s, expected) < 1e-10


def test_constant_permeability_converges_in_one_iteration(small_disc):
    sys, _, _ = _system(small_disc)
    _, rep = solve_iterative(sys, tol=1e-10)
    assert rep.iterations == 1 and rep.converged


def test_direct_refuses_coupled_operator(small_disc):
    sys, _, _ = _system(small_disc, perm=_varying_k(small_disc, Collocation(small_disc)))
    with pytest.raises(SolverError):
        solve_direct(sys)


@pytest.mark.parametrize("d_plane", [1, 2])
def test_varying_permeability_matches_dense_oracle(d_plane):
    disc = build_discretization(DomainSpec(d_plane, 0.1), 1, 1)
    perm = _varying_k(disc, Collocation(disc))
    sys, prev, params = _system(disc, perm)
    s, rep = solve_iterative(sys, tol=1e-13)
    ref = dense_reference_step(prev, DT, params, perm, disc)
    assert rep.iterations > 1
    assert relative_difference(s, ref) < 1e-8


def test_tighter_tolerance_lowers_residual(small_disc):
    perm = _varying_k(small_disc, Collocation(small_disc), amp=0.3)
    sys, _, _ = _system(small_disc, perm)
    res = [solve_iterative(sys, tol=tol)[1] for tol in (1e-4, 1e-8, 1e-12)]
    assert all(r.converged for r in res)
    assert res[0].residual >= res[1].residual >= res[2].residual
    assert res[0].iterations <= res[1].iterations <= res[2].iterations


def test_iteration_cap_raises(small_disc):
    perm = _varying_k(small_disc, Collocation(small_disc), amp=0.5)
    sys, _, _ = _system(small_disc, perm)
    with pytest.raises(SolverError):
        solve_iterative(sys, tol=1e-14, max_iter=1, restart=1)


def test_operator_reuse_matches_fresh_assembly(small_disc):
    sys, prev, params = _system(small_disc)
    op = StepOperator(small_disc, params, DT, 1.0)
    again = assemble_step(prev, DT, prev.t + DT, params, 1.0, Sources(), small_disc, operator=op)
    a, _ = solve_direct(sys)
    b, _ = solve_direct(again)
    assert relative_difference(a, b) < 1e-14


def test_each_mode_is_solved_independently(small_disc):
    sys, _, _ = _system(small_disc)
    op = sys.operator
    together = op.solve_blocks(sys.rhs)
    for i in np.random.default_rng(1).permutation(small_disc.n_modes):
        alone = np.zeros_like(sys.rhs)
        alone[i] = sys.rhs[i]
        assert np.array_equal(op.solve_blocks(alone)[i], together[i])
