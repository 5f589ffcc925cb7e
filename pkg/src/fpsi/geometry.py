"""Layered periodic domain and its tensor-product discretization.

In-plane directions are periodic with period 1 and discretized by Fourier
modes; the transverse direction of each layer carries a 1D Lagrange mesh.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

FLUID_INTERVAL = (-1.0, 0.0)
BIOT_INTERVAL = (0.0, 1.0)


@dataclass(frozen=True)
class DomainSpec:
    """Fluid layer [-1, 0], plate surface at x3 = 0, Biot layer [0, 1].

    The plate pressure lives on s in [-h/2, h/2].
    """

    d_plane: int = 1
    h: float = 0.1

    def __post_init__(self) -> None:
        if self.d_plane not in (1, 2):
            raise ValueError(f"d_plane must be 1 or 2, got {self.d_plane}")
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ValueError(f"plate thickness h must be positive, got {self.h}")

    @property
    def plate_interval(self) -> tuple[float, float]:
        return (-self.h / 2, self.h / 2)


def _reference_basis(degree: int, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange basis on [0, 1] with equispaced nodes; returns values and d/dxi."""
    xi = np.asarray(xi, dtype=float)
    if degree == 1:
        val = np.stack([1 - xi, xi], axis=-1)
        der = np.stack([-np.ones_like(xi), np.ones_like(xi)], axis=-1)
    elif degree == 2:
        val = np.stack([2 * (xi - 0.5) * (xi - 1), -4 * xi * (xi - 1), 2 * xi * (xi - 0.5)], axis=-1)
        der = np.stack([4 * xi - 3, -8 * xi + 4, 4 * xi - 1], axis=-1)
    else:
        raise ValueError(f"element degree must be 1 or 2, got {degree}")
    return val, der


class TransverseMesh:
    """Uniform 1D Lagrange mesh of degree 1 or 2 with Gauss quadrature.

    Treat instances as immutable; arrays are flagged read-only.
    """

    def __init__(self, a: float, b: float, n_elems: int, degree: int, n_quad: int | None = None):
        if not b > a:
            raise ValueError("mesh interval must satisfy a < b")
        if int(n_elems) < 1:
            raise ValueError("a transverse mesh needs at least one element")
        if degree not in (1, 2):
            raise ValueError(f"element degree must be 1 or 2, got {degree}")
        self.a = float(a)
        self.b = float(b)
        self.n_elems = int(n_elems)
        self.degree = int(degree)
        self.n_quad = int(n_quad) if n_quad is not None else self.degree + 2
        if 2 * self.n_quad - 1 < 2 * self.degree:
            raise ValueError("quadrature too weak for the mass matrix")

        self.vertices = np.linspace(self.a, self.b, self.n_elems + 1)
        self.n_nodes = self.n_elems * self.degree + 1
        sub = np.linspace(0.0, 1.0, self.degree + 1)[:-1]
        lengths = np.diff(self.vertices)
        nodes = (self.vertices[:-1, None] + lengths[:, None] * sub[None, :]).ravel()
        self.nodes = np.append(nodes, self.b)
        self.elem_dofs = self.degree * np.arange(self.n_elems)[:, None] + np.arange(self.degree + 1)[None, :]

        gx, gw = np.polynomial.legendre.leggauss(self.n_quad)
        ref = 0.5 * (gx + 1.0)
        self.quad_points = (self.vertices[:-1, None] + lengths[:, None] * ref[None, :]).ravel()
        self.quad_weights = (0.5 * lengths[:, None] * gw[None, :]).ravel()
        self.quad_elem = np.repeat(np.arange(self.n_elems), self.n_quad)
        for arr in (self.vertices, self.nodes, self.elem_dofs, self.quad_points, self.quad_weights, self.quad_elem):
            arr.setflags(write=False)
        self._quad_basis = self._eval(self.quad_points, self.quad_elem)

    def __repr__(self) -> str:
        return f"TransverseMesh([{self.a}, {self.b}], n_elems={self.n_elems}, degree={self.degree})"

    @property
    def h_max(self) -> float:
        return float(np.max(np.diff(self.vertices)))

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Element index of each point; endpoints go to the first/last element."""
        pts = np.asarray(points, dtype=float)
        if np.any(pts < self.a - 1e-12) or np.any(pts > self.b + 1e-12):
            raise ValueError("points outside the mesh interval")
        idx = np.searchsorted(self.vertices, pts, side="right") - 1
        return np.clip(idx, 0, self.n_elems - 1)

    def _eval(self, points: np.ndarray, elems: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        pts = np.asarray(points, dtype=float)
        left = self.vertices[elems]
        length = self.vertices[elems + 1] - left
        val, der = _reference_basis(self.degree, (pts - left) / length)
        der = der / length[:, None]
        rows = np.repeat(np.arange(pts.size), self.degree + 1)
        cols = self.elem_dofs[elems].ravel()
        shape = (pts.size, self.n_nodes)
        V = sp.csr_matrix((val.ravel(), (rows, cols)), shape=shape)
        D = sp.csr_matrix((der.ravel(), (rows, cols)), shape=shape)
        return V, D

    def basis(self, points: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Values and derivatives of every nodal basis function at ``points``."""
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        return self._eval(pts, self.locate(pts))

    @property
    def quad_basis(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        return self._quad_basis

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of a callable of the transverse coordinate."""
        return np.asarray(fn(self.nodes), dtype=float)

    def trace_left(self) -> np.ndarray:
        e = np.zeros(self.n_nodes)
        e[0] = 1.0
        return e

    def trace_right(self) -> np.ndarray:
        e = np.zeros(self.n_nodes)
        e[-1] = 1.0
        return e


def transverse_matrices(mesh: TransverseMesh, coefficient=1.0) -> dict[str, sp.csr_matrix | np.ndarray]:
    """Weighted mass, stiffness and first-derivative matrices plus endpoint traces.

    ``coefficient`` is a constant or a nodal field; it weights every bilinear
    form. ``derivative[i, j]`` is the integral of phi_i * phi_j'.
    """
    V, D = mesh.quad_basis
    if np.ndim(coefficient) == 0:
        cq = np.full(mesh.quad_points.size, float(coefficient))
    else:
        coeff = np.asarray(coefficient, dtype=float)
        if coeff.shape != (mesh.n_nodes,):
            raise ValueError(f"nodal coefficient must have shape ({mesh.n_nodes},)")
        cq = V @ coeff
    if np.any(cq <= 0):
        raise ValueError("diffusion coefficient must be positive")
    W = sp.diags(mesh.quad_weights * cq)
    return {
        "mass": (V.T @ W @ V).tocsr(),
        "stiffness": (D.T @ W @ D).tocsr(),
        "derivative": (V.T @ W @ D).tocsr(),
        "trace_left": mesh.trace_left(),
        "trace_right": mesh.trace_right(),
    }


def enumerate_modes(M: int, d_plane: int) -> np.ndarray:
    """Integer mode vectors in [-M, M]^d, lexicographic order.

    Negation reverses this order, so mode ``i`` and mode ``n - 1 - i`` are
    conjugate partners and the zero mode sits in the middle.
    """
    rng = range(-M, M + 1)
    return np.array(list(itertools.product(rng, repeat=d_plane)), dtype=int).reshape(-1, d_plane)


@dataclass(frozen=True, eq=False)
class Discretization:
    domain: DomainSpec
    M: int
    velocity_mesh: TransverseMesh
    fluid_mesh: TransverseMesh
    plate_mesh: TransverseMesh
    biot_mesh: TransverseMesh
    modes: np.ndarray = field(repr=False)
    wavenumbers: np.ndarray = field(repr=False)
    n_colloc: int = 0

    @property
    def d(self) -> int:
        return self.domain.d_plane

    @property
    def ncomp(self) -> int:
        return self.domain.d_plane + 1

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    @property
    def zero_mode(self) -> int:
        return (self.n_modes - 1) // 2

    def conj_index(self, i: int) -> int:
        return self.n_modes - 1 - i

    @property
    def n_elems(self) -> tuple[int, int, int]:
        return (self.fluid_mesh.n_elems, self.plate_mesh.n_elems, self.biot_mesh.n_elems)

    @property
    def degrees(self) -> tuple[int, int, int, int]:
        return (self.velocity_mesh.degree, self.fluid_mesh.degree, self.plate_mesh.degree, self.biot_mesh.degree)

    def refined(self, factor: int = 2) -> "Discretization":
        """Same modes, every transverse mesh refined by ``factor``."""
        n = tuple(factor * k for k in self.n_elems)
        return build_discretization(self.domain, self.M, n, self.degrees)


def build_discretization(
    domain: DomainSpec,
    M: int,
    n_elems: int | Sequence[int] = 1,
    degrees: Sequence[int] = (2, 1, 1, 1),
) -> Discretization:
    """Build modes and transverse meshes.

    Args:
        domain: layered domain.
        M: highest in-plane mode index per direction.
        n_elems: element counts for (fluid, plate, biot), or one count for all.
        degrees: element degrees for (velocity, fluid pressure, plate, biot).
    """
    if int(M) < 0:
        raise ValueError("M must be non-negative")
    if np.ndim(n_elems) == 0:
        n_elems = (int(n_elems),) * 3
    n_f, n_p, n_b = (int(n) for n in n_elems)
    if min(n_f, n_p, n_b) < 1:
        raise ValueError("every region needs at least one element")
    deg_u, deg_pf, deg_p, deg_b = (int(g) for g in degrees)
    if deg_u <= deg_pf:
        raise ValueError("velocity degree must exceed fluid pressure degree")
    modes = enumerate_modes(int(M), domain.d_plane)
    modes.setflags(write=False)
    wavenumbers = 2 * np.pi * modes.astype(float)
    wavenumbers.setflags(write=False)
    velocity = TransverseMesh(*FLUID_INTERVAL, n_f, deg_u)
    pressure = TransverseMesh(*FLUID_INTERVAL, n_f, deg_pf, n_quad=velocity.n_quad)
    plate = TransverseMesh(*domain.plate_interval, n_p, deg_p)
    biot = TransverseMesh(*BIOT_INTERVAL, n_b, deg_b)
    return Discretization(
        domain=domain,
        M=int(M),
        velocity_mesh=velocity,
        fluid_mesh=pressure,
        plate_mesh=plate,
        biot_mesh=biot,
        modes=modes,
        wavenumbers=wavenumbers,
        n_colloc=2 * (2 * int(M) + 1),
    )


def mode_set(disc: Discretization) -> list[tuple[int, ...]]:
    return [tuple(int(v) for v in row) for row in disc.modes]
