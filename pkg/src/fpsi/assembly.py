"""Per-mode assembly of one implicit Euler step on the constrained space.

Unknowns per mode: fluid velocity and pressure multiplier, plate deflection
w, plate pressure, Biot displacement and Biot pressure. Every equation is the
time-integrated balance over one step, so the system reads

    rho_f (u - u^n) + dt [2 mu_f D(u):D(v) + beta u_t.v_t - p_f div v + p_p(-h/2) v_3(0)] = dt <loads, v>
    -dt (div u, q_f) = 0
    rho_p (w - w^n)/dt - rho_p wdot^n + dt [D |k|^4 w + gamma w - alpha_p |k|^2 int s p_p - p_p(-h/2)] = dt F_p
    c_p (p_p - p_p^n) + alpha_p |k|^2 s (w - w^n) + dt k_p d_s p_p d_s q
        + (w - w^n - dt u_3(0)) q(-h/2) = dt <loads, q>
    rho_b (eta - eta^n)/dt - rho_b etadot^n + dt sigma_b(eta, p_b):grad psi
        + sigma_visc(eta - eta^n):grad psi = dt <loads, psi>
    c_b (p_b - p_b^n) + alpha_b div(eta - eta^n) + dt k grad p_b.grad q = dt <loads, q>

with in-plane derivatives replaced by i k for each Fourier mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Discretization, TransverseMesh
from .physics import PhysicalParams, Sources
from .spectral import Collocation
from .state import STEP_FIELDS, FieldLayout, State, divergence, scalar_at_quad, sym_grad, vector_at_quad


class SingularBlockError(RuntimeError):
    def __init__(self, mode: tuple[int, ...], cond: float):
        super().__init__(f"singular step block for mode {mode} (condition estimate {cond:.3e})")
        self.mode = mode
        self.cond = cond


def _form(test: sp.spmatrix, trial: sp.spmatrix, weights: np.ndarray) -> sp.csr_matrix:
    """Sesquilinear quadrature form: test^H diag(weights) trial."""
    return (test.conj().T @ sp.diags(weights) @ trial).tocsr()


def _selectors(n: int, nc: int) -> list[sp.csr_matrix]:
    eye = sp.identity(n, format="csr")
    zero = sp.csr_matrix((n, n))
    return [sp.hstack([eye if cc == c else zero for cc in range(nc)], format="csr") for c in range(nc)]


def _scalar_grad_ops(V, D, kvec) -> list[sp.csr_matrix]:
    return [(1j * kj) * V for kj in kvec] + [D.astype(complex)]


def _vector_grad_ops(V, D, kvec, nc) -> list[list[sp.csr_matrix]]:
    """ops[c][j] maps a stacked vector field to d_j of its component c."""
    sel = _selectors(V.shape[1], nc)
    s_ops = _scalar_grad_ops(V, D, kvec)
    return [[(s_ops[j] @ sel[c]).tocsr() for j in range(nc)] for c in range(nc)]


def _strain_form(ops, weights) -> sp.csr_matrix:
    nc = len(ops)
    out = None
    for c in range(nc):
        for j in range(nc):
            e = 0.5 * (ops[c][j] + ops[j][c])
            term = _form(e, e, weights)
            out = term if out is None else out + term
    return out


def _div_op(ops) -> sp.csr_matrix:
    return sum(ops[c][c] for c in range(len(ops))).tocsr()


def plate_moment_vector(disc: Discretization) -> np.ndarray:
    """m[i] = integral of s * phi_i(s) over the plate thickness."""
    mesh = disc.plate_mesh
    V, _ = mesh.quad_basis
    return np.asarray(V.T @ (mesh.quad_weights * mesh.quad_points)).ravel()


def plate_moment(p_p: np.ndarray, disc: Discretization) -> np.ndarray:
    """Transverse moment of the plate pressure per mode (the last axis is nodal)."""
    return np.asarray(p_p) @ plate_moment_vector(disc)


def bjs_block(disc: Discretization, params: PhysicalParams) -> sp.csr_matrix:
    """beta times the tangential velocity trace product at x3 = 0, on the stacked velocity."""
    nu, nc = disc.velocity_mesh.n_nodes, disc.ncomp
    idx = [c * nu + nu - 1 for c in range(nc - 1)]
    return sp.csr_matrix((np.full(len(idx), float(params.beta)), (idx, idx)), shape=(nc * nu, nc * nu))


@lru_cache(maxsize=16)
def _transverse_forms(disc: Discretization) -> dict[str, np.ndarray]:
    """Dense mode-independent transverse matrices; every per-mode form combines these.

    For a mesh X: X_M = (phi, phi), X_G = (phi, phi'), X_K = (phi', phi').
    Cross terms pair the velocity basis with the fluid pressure basis.
    """
    out = {}
    for key, mesh in (("u", disc.velocity_mesh), ("p", disc.plate_mesh), ("b", disc.biot_mesh)):
        V, D = (X.toarray() for X in mesh.quad_basis)
        wV, wD = mesh.quad_weights[:, None] * V, mesh.quad_weights[:, None] * D
        out[key + "_M"] = V.T @ wV
        out[key + "_G"] = wV.T @ D
        out[key + "_K"] = D.T @ wD
    Vu, Du = (X.toarray() for X in disc.velocity_mesh.quad_basis)
    Vq = disc.fluid_mesh.quad_basis[0].toarray()
    wq = disc.velocity_mesh.quad_weights[:, None] * Vq
    out["uq_M"] = Vu.T @ wq
    out["uq_D"] = Du.T @ wq
    return out


def _grad_pair(T: dict, key: str, kvec: np.ndarray, p: int, q: int) -> np.ndarray:
    """(d_p phi e^{ikx}, d_q phi e^{ikx}) for gradient indices p, q (the last is transverse)."""
    d = len(kvec)
    if p < d and q < d:
        return kvec[p] * kvec[q] * T[key + "_M"]
    if p < d:
        return -1j * kvec[p] * T[key + "_G"]
    if q < d:
        return 1j * kvec[q] * T[key + "_G"].T
    return T[key + "_K"]


def _elastic_blocks(T: dict, key: str, kvec: np.ndarray, strain: float, div: float) -> list[list[np.ndarray]]:
    """strain * 2(D(u), D(v)) + div * (div u, div v), split into component blocks."""
    nc = len(kvec) + 1
    F = [[_grad_pair(T, key, kvec, p, q) for q in range(nc)] for p in range(nc)]
    trace = sum(F[j][j] for j in range(nc))
    return [[strain * ((trace if a == b else 0) + F[b][a]) + div * F[a][b] for b in range(nc)] for a in range(nc)]


def mode_matrix(
    disc: Discretization, params: PhysicalParams, dt: float, kvec: np.ndarray, kbar: np.ndarray | None
) -> sp.csr_matrix:
    """Step matrix of one mode on the full (unconstrained) step layout.

    ``kbar`` is the Biot permeability at the Biot quadrature points; pass
    None to leave out the Biot diffusion term.
    """
    T = _transverse_forms(disc)
    kvec = np.asarray(kvec, dtype=float)
    nc, d = disc.ncomp, disc.d
    kk = float(kvec @ kvec)
    P = params
    nu, nb = disc.velocity_mesh.n_nodes, disc.biot_mesh.n_nodes
    sizes = {
        "u": nc * nu,
        "p_f": disc.fluid_mesh.n_nodes,
        "w": 1,
        "p_p": disc.plate_mesh.n_nodes,
        "eta": nc * nb,
        "p_b": nb,
    }
    off, pos = {}, 0
    for name in STEP_FIELDS:
        off[name] = pos
        pos += sizes[name]
    A = np.zeros((pos, pos), dtype=complex)

    def put(r, c, block, ri=0, ci=0):
        block = np.atleast_2d(block)
        r0, c0 = off[r] + ri, off[c] + ci
        A[r0 : r0 + block.shape[0], c0 : c0 + block.shape[1]] += block

    # Stokes
    visc = _elastic_blocks(T, "u", kvec, dt * P.mu_f, 0.0)
    for a in range(nc):
        for b in range(nc):
            put("u", "u", visc[a][b], a * nu, b * nu)
        put("u", "u", P.rho_f * T["u_M"], a * nu, a * nu)
        cross = -1j * kvec[a] * T["uq_M"] if a < d else T["uq_D"]
        put("u", "p_f", -dt * cross, a * nu, 0)
        put("p_f", "u", -dt * cross.conj().T, 0, a * nu)
    for a in range(nc - 1):
        put("u", "u", dt * P.beta, a * nu + nu - 1, a * nu + nu - 1)
    u3_top = (nc - 1) * nu + nu - 1
    put("u", "p_p", dt, u3_top, 0)
    put("p_p", "u", -dt, 0, u3_top)

    # plate
    mom = plate_moment_vector(disc)
    put("w", "w", P.rho_p / dt + dt * (P.D * kk**2 + P.gamma))
    put("w", "p_p", (-dt * P.alpha_p * kk * mom)[None, :])
    put("w", "p_p", -dt, 0, 0)
    put("p_p", "p_p", P.c_p * T["p_M"] + dt * P.k_p * T["p_K"])
    put("p_p", "w", (P.alpha_p * kk * mom)[:, None])
    put("p_p", "w", 1.0, 0, 0)

    # Biot
    elastic = _elastic_blocks(T, "b", kvec, dt * P.mu_b + P.mu_v, dt * P.lambda_b + P.lambda_v)
    for a in range(nc):
        for b in range(nc):
            put("eta", "eta", elastic[a][b], a * nb, b * nb)
        put("eta", "eta", (P.rho_b / dt) * T["b_M"], a * nb, a * nb)
        couple = -1j * kvec[a] * T["b_M"] if a < d else T["b_G"].T
        put("eta", "p_b", -dt * P.alpha_b * couple, a * nb, 0)
        put("p_b", "eta", P.alpha_b * couple.conj().T, 0, a * nb)
    put("p_b", "p_b", P.c_b * T["b_M"])
    if kbar is not None:
        Vb, Db = disc.biot_mesh.quad_basis
        wk = disc.biot_mesh.quad_weights * kbar
        diff = kk * _form(Vb, Vb, wk) + _form(Db, Db, wk)
        put("p_b", "p_b", dt * diff.toarray())
    return sp.csr_matrix(A)


@lru_cache(maxsize=8)
def _base_blocks(disc: Discretization, params: PhysicalParams, dt: float) -> tuple[sp.csr_matrix, ...]:
    """Reduced per-mode blocks without Biot diffusion, for the non-negative half of the modes."""
    P = FieldLayout(disc, STEP_FIELDS).prolongation
    return tuple(
        (P.T @ mode_matrix(disc, params, dt, disc.wavenumbers[i], None) @ P).tocsr()
        for i in range(disc.zero_mode + 1)
    )


class StepOperator:
    """Step operator on constrained free vectors of shape (n_modes, n_free).

    Per-mode blocks use the in-plane mean of the permeability; if the
    permeability varies in-plane, the remainder is applied matrix-free on the
    collocation grid and the operator couples modes.
    """

    def __init__(
        self,
        disc: Discretization,
        params: PhysicalParams,
        dt: float,
        perm_field: np.ndarray,
        colloc: Optional[Collocation] = None,
    ):
        if not dt > 0:
            raise ValueError("time step must be positive")
        self.disc = disc
        self.params = params
        self.dt = float(dt)
        self.colloc = colloc or Collocation(disc)
        self.layout = FieldLayout(disc, STEP_FIELDS)
        perm = np.asarray(perm_field, dtype=float)
        nq = disc.biot_mesh.quad_points.size
        if perm.ndim == 0:
            perm = np.full((self.colloc.size, nq), float(perm))
        if perm.shape != (self.colloc.size, nq):
            raise ValueError(f"permeability field must have shape {(self.colloc.size, nq)}")
        if np.any(perm <= 0):
            raise ValueError("permeability must be positive")
        self.kbar = perm.mean(axis=0)
        delta = perm - self.kbar[None, :]
        self.kdelta = delta if np.max(np.abs(delta)) > 1e-14 * np.max(self.kbar) else None
        P = self.layout.prolongation
        sl = self.layout.slices["p_b"]
        self._pb_prolong = P[sl.start : sl.stop, :].tocsr()
        R = self._pb_prolong
        bm = disc.biot_mesh
        Vb, Db = bm.quad_basis
        wk = bm.quad_weights * self.kbar
        mass_k = (R.T @ _form(Vb, Vb, wk) @ R).astype(complex)
        stiff_k = (R.T @ _form(Db, Db, wk) @ R).astype(complex)
        kk = np.sum(disc.wavenumbers**2, axis=1)
        base = _base_blocks(disc, params, self.dt)
        self.blocks = [
            (base[i] + self.dt * (kk[i] * mass_k + stiff_k)).tocsc() for i in range(disc.zero_mode + 1)
        ]
        self._lu: list | None = None

    @property
    def n_free(self) -> int:
        return self.layout.n_free

    @property
    def block_diagonal(self) -> bool:
        return self.kdelta is None

    def block(self, i: int) -> sp.csc_matrix:
        half = len(self.blocks)
        return self.blocks[i] if i < half else self.blocks[self.disc.conj_index(i)].conj()

    def apply_blocks(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x, dtype=complex)
        half = len(self.blocks)
        for i in range(x.shape[0]):
            if i < half:
                out[i] = self.blocks[i] @ x[i]
            else:
                out[i] = np.conj(self.blocks[self.disc.conj_index(i)] @ np.conj(x[i]))
        return out

    def correction(self, x: np.ndarray) -> np.ndarray:
        """dt * ((k - mean k) grad p_b, grad q) evaluated on the collocation grid."""
        disc = self.disc
        mesh = disc.biot_mesh
        pb = np.asarray(self._pb_prolong @ x.T).T
        _, grad = scalar_at_quad(pb, mesh, disc.wavenumbers)
        phys = self.colloc.to_physical(grad, real=False)
        phys *= self.kdelta[:, None, :]
        rows = _grad_test(self.colloc.to_modes(phys), mesh, disc.wavenumbers)
        return self.dt * np.asarray(self._pb_prolong.T @ rows.T).T

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=complex).reshape(self.disc.n_modes, self.n_free)
        y = self.apply_blocks(x)
        if self.kdelta is not None:
            y = y + self.correction(x)
        return y

    def factorize(self) -> list:
        """Per-mode LU of the row/column equilibrated blocks (half spectrum)."""
        if self._lu is None:
            lus = []
            for i, blk in enumerate(self.blocks):
                r = 1.0 / abs(blk).max(axis=1).toarray().ravel()
                scaled = sp.diags(r) @ blk
                c = 1.0 / abs(scaled).max(axis=0).toarray().ravel()
                scaled = (scaled @ sp.diags(c)).tocsc()
                try:
                    lus.append((spla.splu(scaled), r, c))
                except RuntimeError:
                    dense = blk.toarray()
                    cond = float(np.linalg.cond(dense)) if dense.shape[0] <= 3000 else float("inf")
                    raise SingularBlockError(tuple(int(v) for v in self.disc.modes[i]), cond) from None
            self._lu = lus
        return self._lu

    def solve_blocks(self, b: np.ndarray) -> np.ndarray:
        lus = self.factorize()
        half = len(lus)
        out = np.empty_like(b, dtype=complex)
        for i in range(b.shape[0]):
            if i < half:
                lu, r, c = lus[i]
                out[i] = c * lu.solve(np.ascontiguousarray(r * b[i], dtype=complex))
            else:
                lu, r, c = lus[self.disc.conj_index(i)]
                out[i] = np.conj(c * lu.solve(np.ascontiguousarray(r * np.conj(b[i]), dtype=complex)))
        return out


def _grid_coords(colloc: Collocation):
    x1, x2 = colloc.coords()
    return x1[:, None], x2[:, None]


def _bulk_load(fn, mesh: TransverseMesh, colloc: Collocation, t: float, coord: str = "x3") -> np.ndarray:
    """(fn, phi_i e^{ikx}) per mode, shape (n_modes, n_nodes)."""
    x1, x2 = _grid_coords(colloc)
    vals = np.broadcast_to(fn(x1=x1, x2=x2, t=t, **{coord: mesh.quad_points[None, :]}), (colloc.size, mesh.quad_points.size))
    modal = colloc.to_modes(vals) * mesh.quad_weights
    V, _ = mesh.quad_basis
    return np.asarray(V.T @ modal.T).T


def _surface_load(fn, colloc: Collocation, t: float) -> np.ndarray:
    x1, x2 = colloc.coords()
    vals = np.broadcast_to(fn(x1=x1, x2=x2, t=t), (colloc.size,))
    return colloc.to_modes(vals)


def load_vector(sources: Sources, t: float, disc: Discretization, colloc: Optional[Collocation] = None) -> np.ndarray:
    """Source functional on the full step layout, not yet scaled by dt."""
    colloc = colloc or Collocation(disc)
    layout = FieldLayout(disc, STEP_FIELDS)
    out = np.zeros((disc.n_modes, layout.n_full), dtype=complex)
    nc = disc.ncomp
    um, plm, bm = disc.velocity_mesh, disc.plate_mesh, disc.biot_mesh
    nu, nb = um.n_nodes, bm.n_nodes
    su, sw, spp, se, spb = (layout.slices[n].start for n in ("u", "w", "p_p", "eta", "p_b"))
    if sources.f is not None:
        for c in range(nc):
            out[:, su + c * nu : su + (c + 1) * nu] += _bulk_load(sources.f[c], um, colloc, t)
    if sources.g_f is not None:
        for c in range(nc):
            out[:, su + c * nu + nu - 1] += _surface_load(sources.g_f[c], colloc, t)
    if sources.F_p is not None:
        out[:, sw] += _surface_load(sources.F_p, colloc, t)
    if sources.S_p is not None:
        out[:, layout.slices["p_p"]] += _bulk_load(sources.S_p, plm, colloc, t, coord="s")
    if sources.g_filt is not None:
        out[:, spp] += _surface_load(sources.g_filt, colloc, t)
    if sources.F_b is not None:
        for c in range(nc):
            out[:, se + c * nb : se + (c + 1) * nb] += _bulk_load(sources.F_b[c], bm, colloc, t)
    if sources.g_b is not None:
        for c in range(nc):
            out[:, se + c * nb + nb - 1] += _surface_load(sources.g_b[c], colloc, t)
    if sources.S is not None:
        out[:, layout.slices["p_b"]] += _bulk_load(sources.S, bm, colloc, t)
    if sources.g_pb is not None:
        out[:, spb + nb - 1] += _surface_load(sources.g_pb, colloc, t)
    if sources.g_flux is not None:
        out[:, spb] += _surface_load(sources.g_flux, colloc, t)
    return out


def _grad_test(flux: np.ndarray, mesh: TransverseMesh, wavenumbers: np.ndarray) -> np.ndarray:
    """Rows sum_j (flux_j, d_j phi_i) for a flux (n_modes, d+1, nq)."""
    d = wavenumbers.shape[1]
    h = flux * mesh.quad_weights
    V, D = mesh.quad_basis
    test = sum(-1j * wavenumbers[:, j, None] * h[:, j] for j in range(d))
    return np.asarray(V.T @ test.T).T + np.asarray(D.T @ h[:, d].T).T


def _mass_apply(coeffs: np.ndarray, mesh: TransverseMesh) -> np.ndarray:
    V, _ = mesh.quad_basis
    vals = np.asarray(V @ coeffs.T).T * mesh.quad_weights
    return np.asarray(V.T @ vals.T).T


def history_vector(prev: State, dt: float, params: PhysicalParams) -> np.ndarray:
    """Terms of the step right-hand side that carry the previous state."""
    disc = prev.disc
    layout = FieldLayout(disc, STEP_FIELDS)
    P = params
    nm, nc = disc.n_modes, disc.ncomp
    k = disc.wavenumbers
    kk = np.sum(k**2, axis=1)
    out = np.zeros((nm, layout.n_full), dtype=complex)

    um = disc.velocity_mesh
    u_rows = np.stack([_mass_apply(prev.u[:, c], um) for c in range(nc)], axis=1)
    out[:, layout.slices["u"]] = P.rho_f * u_rows.reshape(nm, -1)

    out[:, layout.slices["w"].start] = (P.rho_p / dt) * prev.w + P.rho_p * prev.wdot

    mom = plate_moment_vector(disc)
    pp = P.c_p * _mass_apply(prev.p_p, disc.plate_mesh) + P.alpha_p * (kk * prev.w)[:, None] * mom[None, :]
    pp[:, 0] += prev.w
    out[:, layout.slices["p_p"]] = pp

    bm = disc.biot_mesh
    eta_rows = np.stack(
        [(P.rho_b / dt) * _mass_apply(prev.eta[:, c], bm) + P.rho_b * _mass_apply(prev.etadot[:, c], bm) for c in range(nc)],
        axis=1,
    )
    _, g = vector_at_quad(prev.eta, bm, k)
    div = divergence(g)
    if P.mu_v or P.lambda_v:
        sig = 2 * P.mu_v * sym_grad(g) + P.lambda_v * div[:, None, None, :] * np.eye(nc)[None, :, :, None]
        eta_rows = eta_rows + np.stack([_grad_test(sig[:, c], bm, k) for c in range(nc)], axis=1)
    out[:, layout.slices["eta"]] = eta_rows.reshape(nm, -1)

    Vb, _ = bm.quad_basis
    pb = P.c_b * _mass_apply(prev.p_b, bm) + P.alpha_b * np.asarray(Vb.T @ (div * bm.quad_weights).T).T
    out[:, layout.slices["p_b"]] = pb
    return out


@dataclass
class StepSystem:
    """Operator, right-hand side and bookkeeping for one step."""

    operator: StepOperator
    rhs: np.ndarray
    prev: State
    t_next: float
    clamped: int = 0
    perm_field: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dt(self) -> float:
        return self.operator.dt

    @property
    def disc(self) -> Discretization:
        return self.operator.disc

    def to_state(self, x_free: np.ndarray) -> State:
        layout = self.operator.layout
        f = layout.unpack(layout.expand(x_free))
        prev = self.prev
        return State(
            disc=self.disc,
            t=self.t_next,
            wdot=(f["w"] - prev.w) / self.dt,
            etadot=(f["eta"] - prev.eta) / self.dt,
            **f,
        )

    def residual(self, x_free: np.ndarray) -> float:
        """Relative residual |A x - b| / |b| (absolute when b = 0)."""
        r = self.operator.apply(x_free) - self.rhs
        nb = np.linalg.norm(self.rhs)
        return float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r))


def check_constraints(s: State, tol: float = 1e-12) -> None:
    """Raise if a state violates the essential couplings beyond ``tol`` (relative)."""
    scale = max(s.max_abs(), 1.0)
    nc = s.disc.ncomp
    checks = {
        "no-slip at x3=-1": np.abs(s.u[:, :, 0]).max(initial=0.0),
        "tangential displacement at x3=0": np.abs(s.eta[:, : nc - 1, 0]).max(initial=0.0),
        "eta_3(x3=0) = w": np.abs(s.eta[:, nc - 1, 0] - s.w).max(initial=0.0),
        "p_p(h/2) = p_b(0)": np.abs(s.p_p[:, -1] - s.p_b[:, 0]).max(initial=0.0),
    }
    for name, val in checks.items():
        if val > tol * scale:
            raise ValueError(f"state violates the essential condition {name} (defect {val:.3e})")


def assemble_step(
    prev: State,
    dt: float,
    t_next: float,
    params: PhysicalParams,
    perm_field,
    sources: Sources,
    disc: Discretization,
    operator: Optional[StepOperator] = None,
    colloc: Optional[Collocation] = None,
) -> StepSystem:
    """Operator and right-hand side for the step prev -> t_next.

    Pass ``operator`` to reuse a previously assembled (and factorized) one.
    """
    check_constraints(prev, tol=1e-10)
    colloc = colloc or (operator.colloc if operator is not None else Collocation(disc))
    if operator is None:
        operator = StepOperator(disc, params, dt, perm_field, colloc)
    full = history_vector(prev, dt, params)
    if not sources.is_zero:
        full = full + dt * load_vector(sources, t_next, disc, colloc)
    rhs = operator.layout.reduce(full)
    return StepSystem(operator=operator, rhs=rhs, prev=prev, t_next=t_next, perm_field=perm_field)


def divergence_free_projection(u: np.ndarray, disc: Discretization) -> tuple[np.ndarray, np.ndarray]:
    """L2 projection of a velocity onto discretely divergence-free fields with no-slip at x3=-1.

    Returns the projected velocity and the divergence residual per mode.
    """
    T = _transverse_forms(disc)
    nc, d = disc.ncomp, disc.d
    nu = disc.velocity_mesh.n_nodes
    mass = np.kron(np.eye(nc), T["u_M"])
    free = np.array([i for i in range(nc * nu) if i % nu != 0])
    Mf = mass[np.ix_(free, free)]
    nq = T["uq_M"].shape[1]
    out = np.zeros_like(u, dtype=complex)
    flat = u.reshape(disc.n_modes, -1)
    for i in range(disc.n_modes):
        kvec = disc.wavenumbers[i]
        B = np.hstack([1j * kvec[a] * T["uq_M"].T if a < d else T["uq_D"].T for a in range(nc)])[:, free]
        K = np.block([[Mf, B.conj().T], [B, np.zeros((nq, nq))]])
        rhs = np.concatenate([(mass @ flat[i])[free], np.zeros(nq)])
        sol = np.linalg.solve(K, rhs)
        vec = np.zeros(nc * nu, dtype=complex)
        vec[free] = sol[: free.size]
        out[i] = vec.reshape(nc, nu)
    return out, discrete_divergence(out, disc)


def discrete_divergence(u: np.ndarray, disc: Discretization) -> np.ndarray:
    """(div u, q_j) for every fluid pressure basis function, shape (n_modes, n_pf)."""
    um, pm = disc.velocity_mesh, disc.fluid_mesh
    _, g = vector_at_quad(np.asarray(u), um, disc.wavenumbers)
    Vq, _ = pm.quad_basis
    return np.asarray(Vq.T @ (divergence(g) * um.quad_weights).T).T
