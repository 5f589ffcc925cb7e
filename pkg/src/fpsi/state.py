"""Coefficient layout, constraint elimination and the State value type."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import Discretization, TransverseMesh

ALL_FIELDS = ("u", "p_f", "w", "wdot", "p_p", "eta", "etadot", "p_b")
STEP_FIELDS = ("u", "p_f", "w", "p_p", "eta", "p_b")
VECTOR_FIELDS = ("u", "eta", "etadot")


class FieldLayout:
    """Per-mode packing of fields and the master-slave constraint map.

    The map is identical for every mode. Slaves: all velocity components at
    x3 = -1 (zero); tangential displacement at x3 = 0 (zero); normal
    displacement at x3 = 0 (equal to w); plate pressure at s = h/2 (equal to
    the Biot pressure at x3 = 0). The same holds for the displacement
    velocity and wdot when both are in the layout.
    """

    def __init__(self, disc: Discretization, fields: Sequence[str] = ALL_FIELDS):
        self.disc = disc
        self.fields = tuple(fields)
        nc = disc.ncomp
        sizes = {
            "u": nc * disc.velocity_mesh.n_nodes,
            "p_f": disc.fluid_mesh.n_nodes,
            "w": 1,
            "wdot": 1,
            "p_p": disc.plate_mesh.n_nodes,
            "eta": nc * disc.biot_mesh.n_nodes,
            "etadot": nc * disc.biot_mesh.n_nodes,
            "p_b": disc.biot_mesh.n_nodes,
        }
        self.slices: dict[str, slice] = {}
        off = 0
        for name in self.fields:
            self.slices[name] = slice(off, off + sizes[name])
            off += sizes[name]
        self.n_full = off

        nu, nb = disc.velocity_mesh.n_nodes, disc.biot_mesh.n_nodes
        slaves: dict[int, int | None] = {}
        if "u" in self.slices:
            for c in range(nc):
                slaves[self.slices["u"].start + c * nu] = None
        for disp, vel in (("eta", "w"), ("etadot", "wdot")):
            if disp not in self.slices:
                continue
            base = self.slices[disp].start
            for c in range(nc - 1):
                slaves[base + c * nb] = None
            slaves[base + (nc - 1) * nb] = self.slices[vel].start
        if "p_p" in self.slices:
            slaves[self.slices["p_p"].stop - 1] = self.slices["p_b"].start
        self.slaves = slaves
        self.free = np.array([i for i in range(self.n_full) if i not in slaves], dtype=int)
        self.n_free = self.free.size

        col_of = {int(j): k for k, j in enumerate(self.free)}
        rows, cols = [], []
        for k, j in enumerate(self.free):
            rows.append(int(j))
            cols.append(k)
        for s, m in slaves.items():
            if m is not None:
                rows.append(s)
                cols.append(col_of[m])
        self.prolongation = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.n_full, self.n_free)
        )

    def expand(self, free: np.ndarray) -> np.ndarray:
        """Free vectors (n_modes, n_free) to full vectors (n_modes, n_full)."""
        return np.asarray(self.prolongation @ np.asarray(free).T).T

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[..., self.free]

    def reduce(self, full_rows: np.ndarray) -> np.ndarray:
        """Transpose of ``expand``: accumulate full-layout residuals onto free DOFs."""
        return np.asarray(self.prolongation.T @ np.asarray(full_rows).T).T

    def constrain(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw)
        if raw.shape[-1] != self.n_full:
            raise ValueError(f"expected {self.n_full} entries per mode, got {raw.shape[-1]}")
        return self.expand(self.restrict(raw))

    def pack(self, state: "State") -> np.ndarray:
        out = np.zeros((self.disc.n_modes, self.n_full), dtype=complex)
        for name in self.fields:
            out[:, self.slices[name]] = getattr(state, name).reshape(self.disc.n_modes, -1)
        return out

    def unpack(self, full: np.ndarray) -> dict[str, np.ndarray]:
        nm, nc = self.disc.n_modes, self.disc.ncomp
        out = {}
        for name in self.fields:
            block = np.array(full[:, self.slices[name]])
            if name in VECTOR_FIELDS:
                block = block.reshape(nm, nc, -1)
            elif name in ("w", "wdot"):
                block = block[:, 0]
            out[name] = block
        return out


@dataclass(frozen=True, eq=False)
class State:
    """All unknowns at one time level, as complex mode coefficients.

    Scalars on a mesh have shape (n_modes, n_nodes); vectors
    (n_modes, ncomp, n_nodes); w and wdot (n_modes,).
    """

    disc: Discretization = field(repr=False)
    t: float
    u: np.ndarray
    p_f: np.ndarray
    w: np.ndarray
    wdot: np.ndarray
    p_p: np.ndarray
    eta: np.ndarray
    etadot: np.ndarray
    p_b: np.ndarray

    def __post_init__(self) -> None:
        for name in ALL_FIELDS:
            arr = np.array(getattr(self, name), dtype=complex)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, disc: Discretization, t: float = 0.0) -> "State":
        nm, nc = disc.n_modes, disc.ncomp
        return cls(
            disc=disc,
            t=t,
            u=np.zeros((nm, nc, disc.velocity_mesh.n_nodes)),
            p_f=np.zeros((nm, disc.fluid_mesh.n_nodes)),
            w=np.zeros(nm),
            wdot=np.zeros(nm),
            p_p=np.zeros((nm, disc.plate_mesh.n_nodes)),
            eta=np.zeros((nm, nc, disc.biot_mesh.n_nodes)),
            etadot=np.zeros((nm, nc, disc.biot_mesh.n_nodes)),
            p_b=np.zeros((nm, disc.biot_mesh.n_nodes)),
        )

    def fields(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ALL_FIELDS}

    def replace(self, **changes: Any) -> "State":
        return dataclasses.replace(self, **changes)

    def scaled(self, c: complex) -> "State":
        return self.replace(**{k: c * v for k, v in self.fields().items()})

    def combine(self, a: float, other: "State", b: float) -> "State":
        """a*self + b*other, keeping this state's time."""
        return self.replace(**{k: a * v + b * getattr(other, k) for k, v in self.fields().items()})

    def hermitian_defect(self) -> float:
        worst = 0.0
        for arr in self.fields().values():
            worst = max(worst, float(np.max(np.abs(arr - np.conj(arr[::-1])), initial=0.0)))
        return worst

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(v), initial=0.0)) for v in self.fields().values())


@dataclass
class Trajectory:
    """States at uniform time levels plus the data needed to audit them.

    ``perm_fields[n]`` is the Biot permeability used to produce ``states[n+1]``
    (None when the permeability is a plain constant).
    """

    states: list[State]
    dt: float
    params: Any = None
    perm_fields: list[np.ndarray | None] = field(default_factory=list)
    reports: list[Any] = field(default_factory=list)
    prior_energy: float | None = None

    @property
    def disc(self) -> Discretization:
        return self.states[0].disc

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def __len__(self) -> int:
        return len(self.states)


def apply_constraints(raw: np.ndarray, layout: FieldLayout, t: float = 0.0) -> State:
    """Overwrite slave DOFs from their masters and wrap the result as a State."""
    if set(layout.fields) != set(ALL_FIELDS):
        raise ValueError("apply_constraints needs a layout with every field")
    raw = np.asarray(raw, dtype=complex)
    if raw.ndim == 1:
        raw = raw.reshape(layout.disc.n_modes, -1)
    if raw.shape != (layout.disc.n_modes, layout.n_full):
        raise ValueError(f"raw vector has shape {raw.shape}, expected ({layout.disc.n_modes}, {layout.n_full})")
    return State(disc=layout.disc, t=t, **layout.unpack(layout.constrain(raw)))


# quadrature-point evaluation, vectorised over modes


def scalar_at_quad(coeffs: np.ndarray, mesh: TransverseMesh, wavenumbers: np.ndarray):
    """Values (n_modes, nq) and gradients (n_modes, d+1, nq) at mesh quadrature points."""
    V, D = mesh.quad_basis
    val = np.asarray(V @ np.asarray(coeffs).T).T
    d = wavenumbers.shape[1]
    grad = np.empty((val.shape[0], d + 1, val.shape[1]), dtype=complex)
    for j in range(d):
        grad[:, j] = 1j * wavenumbers[:, j, None] * val
    grad[:, d] = np.asarray(D @ np.asarray(coeffs).T).T
    return val, grad


def vector_at_quad(coeffs: np.ndarray, mesh: TransverseMesh, wavenumbers: np.ndarray):
    """Values (n_modes, ncomp, nq) and gradients (n_modes, ncomp, d+1, nq)."""
    nm, nc, nn = coeffs.shape
    val, grad = scalar_at_quad(coeffs.reshape(nm * nc, nn), mesh, np.repeat(wavenumbers, nc, axis=0))
    return val.reshape(nm, nc, -1), grad.reshape(nm, nc, nc, -1)


def sym_grad(grad: np.ndarray) -> np.ndarray:
    return 0.5 * (grad + np.swapaxes(grad, 1, 2))


def divergence(grad: np.ndarray) -> np.ndarray:
    return np.einsum("mccq->mq", grad)


def quad_sq(values: np.ndarray, weights: np.ndarray) -> float:
    """Sum over modes (Parseval) and quadrature of |values|^2."""
    return float(np.sum(weights * np.abs(values) ** 2))


def energy_norm_E(
    eta: np.ndarray, disc: Discretization, mu_b: float = 1.0, lambda_b: float = 1.0, squared: bool = False
) -> float:
    """Elastic energy norm: 2 mu_b |D(eta)|^2 + lambda_b |div eta|^2 over the Biot layer."""
    _, g = vector_at_quad(np.asarray(eta), disc.biot_mesh, disc.wavenumbers)
    wq = disc.biot_mesh.quad_weights
    val = 2 * mu_b * quad_sq(sym_grad(g), wq) + lambda_b * quad_sq(divergence(g), wq)
    return val if squared else float(np.sqrt(val))


def sd_norm(s: State, mu_b: float = 1.0, lambda_b: float = 1.0, squared: bool = False) -> float:
    """Norm of the constrained solution space.

    Sums |u|^2 + |D(u)|^2, |lap w|^2 + |w|^2, |p_p|^2 + |d_s p_p|^2, the
    elastic energy norm of eta and |grad p_b|^2.
    """
    disc = s.disc
    k = disc.wavenumbers
    uv, ug = vector_at_quad(s.u, disc.velocity_mesh, k)
    wf = disc.velocity_mesh.quad_weights
    total = quad_sq(uv, wf) + quad_sq(sym_grad(ug), wf)
    kk = np.sum(k**2, axis=1)
    total += float(np.sum((kk**2 + 1.0) * np.abs(s.w) ** 2))
    pv, pg = scalar_at_quad(s.p_p, disc.plate_mesh, k)
    wp = disc.plate_mesh.quad_weights
    total += quad_sq(pv, wp) + quad_sq(pg[:, -1], wp)
    total += energy_norm_E(s.eta, disc, mu_b, lambda_b, squared=True)
    _, bg = scalar_at_quad(s.p_b, disc.biot_mesh, k)
    total += quad_sq(bg, disc.biot_mesh.quad_weights)
    return total if squared else float(np.sqrt(total))


def fluid_content(s: State, layer: str, c: float = 1.0, alpha: float = 1.0) -> np.ndarray:
    """Fluid content at the layer's quadrature points, shape (n_modes, nq).

    Biot: c_b p_b + alpha_b div(eta). Plate: c_p p_p - alpha_p s lap(w).
    Values sit at quadrature points because the divergence of a continuous
    piecewise-linear field is discontinuous at nodes.
    """
    disc = s.disc
    k = disc.wavenumbers
    if layer == "biot":
        pv, _ = scalar_at_quad(s.p_b, disc.biot_mesh, k)
        _, g = vector_at_quad(s.eta, disc.biot_mesh, k)
        return c * pv + alpha * divergence(g)
    if layer == "plate":
        pv, _ = scalar_at_quad(s.p_p, disc.plate_mesh, k)
        kk = np.sum(k**2, axis=1)
        svals = disc.plate_mesh.quad_points
        return c * pv + alpha * (kk * s.w)[:, None] * svals[None, :]
    raise ValueError(f"unknown layer {layer!r}; expected 'biot' or 'plate'")


def difference_quotient(traj: Trajectory, name: str) -> list[np.ndarray]:
    """Backward differences (f^n - f^{n-1}) / dt for n = 1..N."""
    if len(traj.states) < 2:
        raise ValueError("difference quotient needs at least two states")
    vals = [getattr(s, name) for s in traj.states]
    return [(b - a) / traj.dt for a, b in zip(vals[:-1], vals[1:])]
