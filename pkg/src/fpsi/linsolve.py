"""Direct and Krylov solvers for a StepSystem."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import StepSystem
from .state import State


class SolverError(RuntimeError):
    pass


@dataclass
class SolveReport:
    method: str
    iterations: int
    residual: float
    wall_time: float
    converged: bool = True
    clamped: int = 0
    warnings: list[str] = field(default_factory=list)


def _symmetrize(x: np.ndarray) -> np.ndarray:
    """Enforce coefficient(-xi) = conj(coefficient(xi))."""
    return 0.5 * (x + np.conj(x[::-1]))


def solve_direct(system: StepSystem, refine_tol: float = 1e-12, max_refine: int = 2) -> tuple[State, SolveReport]:
    """Per-mode sparse LU; the conjugate half of the spectrum is filled by symmetry."""
    op = system.operator
    if not op.block_diagonal:
        raise SolverError("direct solve needs a block-diagonal operator; use solve_iterative")
    start = time.perf_counter()
    x = op.solve_blocks(system.rhs)
    res = system.residual(x)
    refinements = 0
    while res > refine_tol and refinements < max_refine:
        x = x + op.solve_blocks(system.rhs - op.apply(x))
        res = system.residual(x)
        refinements += 1
    report = SolveReport("direct", 0, res, time.perf_counter() - start, clamped=system.clamped)
    if res > refine_tol:
        report.warnings.append(f"direct residual {res:.2e} above {refine_tol:.0e}")
    return system.to_state(x), report


def solve_iterative(
    system: StepSystem, tol: float = 1e-10, max_iter: int = 500, restart: int = 50
) -> tuple[State, SolveReport]:
    """Restarted GMRES, right-preconditioned by the mean-permeability block solve.

    Right preconditioning keeps the monitored residual equal to the true one.
    """
    op = system.operator
    shape = system.rhs.shape
    n = system.rhs.size
    start = time.perf_counter()
    b = system.rhs.ravel()
    if np.linalg.norm(b) == 0:
        x = np.zeros(shape, dtype=complex)
        return system.to_state(x), SolveReport("gmres", 0, 0.0, time.perf_counter() - start, clamped=system.clamped)

    def precond(v):
        return op.solve_blocks(v.reshape(shape))

    def matvec(v):
        return op.apply(precond(v)).ravel()

    A = spla.LinearOperator((n, n), matvec=matvec, dtype=complex)
    count = [0]

    def callback(_):
        count[0] += 1

    restart = min(restart, n)
    cycles = max(1, -(-max_iter // restart))
    y, info = spla.gmres(
        A, b, rtol=tol, atol=0.0, restart=restart, maxiter=cycles, callback=callback, callback_type="pr_norm"
    )
    x = _symmetrize(precond(y))
    res = system.residual(x)
    converged = res <= tol
    report = SolveReport("gmres", count[0], res, time.perf_counter() - start, converged, system.clamped)
    if not converged:
        raise SolverError(f"GMRES did not reach tol {tol:.1e} in {count[0]} iterations (residual {res:.2e}, info {info})")
    return system.to_state(x), report


def solve(system: StepSystem, tol: float = 1e-10, max_iter: int = 500, restart: int = 50) -> tuple[State, SolveReport]:
    if system.operator.block_diagonal:
        return solve_direct(system)
    return solve_iterative(system, tol=tol, max_iter=max_iter, restart=restart)
