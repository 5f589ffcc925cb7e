"""Energy balance, interface residuals, Poincare constants and stability runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import (
    _div_op,
    _form,
    _scalar_grad_ops,
    _selectors,
    _strain_form,
    _vector_grad_ops,
    discrete_divergence,
    load_vector,
)
from .geometry import Discretization
from .physics import ConstantPermeability, PhysicalParams, Sources
from .spectral import Collocation
from .state import STEP_FIELDS, FieldLayout, State, Trajectory, divergence, quad_sq, scalar_at_quad, sym_grad, vector_at_quad


@dataclass
class EnergyReport:
    kinetic: dict[str, float]
    potential: dict[str, float]
    dissipation: dict[str, float]

    @property
    def E(self) -> float:
        return sum(self.kinetic.values()) + sum(self.potential.values())

    @property
    def Diss(self) -> float:
        return sum(self.dissipation.values())

    def row(self) -> dict[str, float]:
        out = {f"kin_{k}": v for k, v in self.kinetic.items()}
        out.update({f"pot_{k}": v for k, v in self.potential.items()})
        out.update({f"diss_{k}": v for k, v in self.dissipation.items()})
        out["E"] = self.E
        out["Diss"] = self.Diss
        return out


def _biot_diffusion(s: State, perm_field, params: PhysicalParams, colloc: Collocation | None) -> float:
    disc = s.disc
    mesh = disc.biot_mesh
    _, grad = scalar_at_quad(s.p_b, mesh, disc.wavenumbers)
    if perm_field is None:
        if not isinstance(params.permeability, ConstantPermeability):
            raise ValueError("a permeability field is needed for a non-constant permeability law")
        return params.permeability.k * quad_sq(grad, mesh.quad_weights)
    perm = np.asarray(perm_field, dtype=float)
    if perm.ndim == 0:
        return float(perm) * quad_sq(grad, mesh.quad_weights)
    colloc = colloc or Collocation(disc)
    phys = colloc.to_physical(grad, real=False)
    dens = np.sum(np.abs(phys) ** 2, axis=1) * perm
    return float(np.sum(dens * mesh.quad_weights) / colloc.size)


def compute_energy(
    s: State, params: PhysicalParams, perm_field=None, colloc: Collocation | None = None
) -> EnergyReport:
    """Every stored-energy and dissipation-rate term, integrated with Parseval."""
    disc = s.disc
    k = disc.wavenumbers
    kk = np.sum(k**2, axis=1)
    P = params
    um, plm, bm = disc.velocity_mesh, disc.plate_mesh, disc.biot_mesh
    uv, ug = vector_at_quad(s.u, um, k)
    pv, pg = scalar_at_quad(s.p_p, plm, k)
    bv, _ = scalar_at_quad(s.p_b, bm, k)
    ev, eg = vector_at_quad(s.eta, bm, k)
    dv, dg = vector_at_quad(s.etadot, bm, k)
    w2 = np.abs(s.w) ** 2
    kinetic = {
        "fluid": 0.5 * P.rho_f * quad_sq(uv, um.quad_weights),
        "plate": 0.5 * P.rho_p * float(np.sum(np.abs(s.wdot) ** 2)),
        "biot": 0.5 * P.rho_b * quad_sq(dv, bm.quad_weights),
    }
    elastic = 2 * P.mu_b * quad_sq(sym_grad(eg), bm.quad_weights) + P.lambda_b * quad_sq(divergence(eg), bm.quad_weights)
    potential = {
        "plate_pressure": 0.5 * P.c_p * quad_sq(pv, plm.quad_weights),
        "elastic": 0.5 * elastic,
        "biot_pressure": 0.5 * P.c_b * quad_sq(bv, bm.quad_weights),
        "bending": 0.5 * P.D * float(np.sum(kk**2 * w2)),
        "foundation": 0.5 * P.gamma * float(np.sum(w2)),
    }
    nc = disc.ncomp
    dissipation = {
        "viscous": 2 * P.mu_f * quad_sq(sym_grad(ug), um.quad_weights),
        "slip": P.beta * float(np.sum(np.abs(s.u[:, : nc - 1, -1]) ** 2)),
        "plate_filtration": P.k_p * quad_sq(pg[:, -1], plm.quad_weights),
        "biot_filtration": _biot_diffusion(s, perm_field, P, colloc),
    }
    if P.mu_v or P.lambda_v:
        dissipation["viscoelastic"] = 2 * P.mu_v * quad_sq(sym_grad(dg), bm.quad_weights) + P.lambda_v * quad_sq(
            divergence(dg), bm.quad_weights
        )
    return EnergyReport(kinetic, potential, dissipation)


@dataclass
class EnergyCheck:
    margins: np.ndarray
    energies: np.ndarray
    dissipation: np.ndarray
    work: np.ndarray
    passed: bool
    tol_rel: float
    epsilon: Optional[float]
    link_margin: Optional[float] = None


def source_work(s: State, sources: Sources, colloc: Collocation | None = None) -> tuple[float, float]:
    """Work of the loads at s.t against (u, wdot, p_p, etadot, p_b).

    Returns the exact pairing and its Young bound sum |l|^2/2 + |m|^2/2
    (the caller rescales for a different split constant).
    """
    if sources is None or sources.is_zero:
        return 0.0, 0.0
    disc = s.disc
    layout = FieldLayout(disc, STEP_FIELDS)
    loads = load_vector(sources, s.t, disc, colloc)
    test = layout.pack(s.replace(w=s.wdot, eta=s.etadot, p_f=np.zeros_like(s.p_f)))
    exact = float(np.real(np.sum(loads * np.conj(test))))
    return exact, (float(np.sum(np.abs(loads) ** 2)), float(np.sum(np.abs(test) ** 2)))


def check_energy_inequality(
    traj: Trajectory,
    sources: Sources | None = None,
    tol_rel: float = 1e-9,
    epsilon: float | None = 1.0,
    params: PhysicalParams | None = None,
) -> EnergyCheck:
    """Per-step margins E^n + dt W^{n+1} - E^{n+1} - dt Diss^{n+1}.

    With ``epsilon`` set, the work is replaced by its Young bound
    |l|^2/(2 eps) + eps |m|^2/2; with ``epsilon=None`` the exact pairing is used.
    """
    params = params or traj.params
    disc = traj.disc
    colloc = Collocation(disc)
    n = len(traj.states)
    E = np.zeros(n)
    Diss = np.zeros(n)
    W = np.zeros(n)
    for i, s in enumerate(traj.states):
        perm = traj.perm_fields[i - 1] if i > 0 and traj.perm_fields else None
        if i == 0 and not isinstance(params.permeability, ConstantPermeability):
            perm = 1.0  # the initial dissipation never enters a margin
        rep = compute_energy(s, params, perm, colloc)
        E[i], Diss[i] = rep.E, rep.Diss
        if i > 0 and sources is not None and not sources.is_zero:
            exact, parts = source_work(s, sources, colloc)
            W[i] = exact if epsilon is None else parts[0] / (2 * epsilon) + epsilon * parts[1] / 2
    margins = E[:-1] + traj.dt * W[1:] - E[1:] - traj.dt * Diss[1:]
    scale = E[0] if E[0] > 0 else 1.0
    passed = bool(np.all(margins >= -tol_rel * scale))
    link = None
    if traj.prior_energy is not None:
        link = traj.prior_energy - E[0]
        passed = passed and link >= -tol_rel * max(traj.prior_energy, 1e-300)
    return EnergyCheck(margins, E, Diss, W, passed, tol_rel, epsilon, link)


@dataclass
class InterfaceResiduals:
    essential: dict[str, float]
    natural: dict[str, float]


def _trace_rows(mesh, where: float):
    V, D = mesh.basis(np.array([where]))
    return V.toarray()[0], D.toarray()[0]


def _surface(fn, s: State, colloc: Collocation) -> np.ndarray:
    if fn is None:
        return np.zeros(s.disc.n_modes, dtype=complex)
    x1, x2 = colloc.coords()
    return colloc.to_modes(np.broadcast_to(fn(x1=x1, x2=x2, t=s.t), (colloc.size,)))


def interface_residuals(
    s: State, params: PhysicalParams, perm_field=None, sources: Sources | None = None
) -> InterfaceResiduals:
    """L2(omega) norms of the essential and natural interface and boundary conditions.

    Boundary data of manufactured solutions, when present in ``sources``, is
    subtracted. The Biot permeability at x3 = 0 is taken from the first
    quadrature layer of ``perm_field``.
    """
    disc = s.disc
    P = params
    nc = disc.ncomp
    colloc = Collocation(disc)
    src = sources or Sources()
    k = disc.wavenumbers

    def nrm(x):
        return float(np.sqrt(np.sum(np.abs(x) ** 2)))

    kin = np.array(s.eta[:, :, 0])
    kin[:, nc - 1] -= s.w
    essential = {
        "kinematic_trace": nrm(kin),
        "pressure_trace": nrm(s.p_p[:, -1] - s.p_b[:, 0]),
        "no_slip": nrm(s.u[:, :, 0]),
    }

    h2 = disc.domain.h / 2
    _, dtop = _trace_rows(disc.plate_mesh, h2)
    _, dbot = _trace_rows(disc.plate_mesh, -h2)
    dpp_top = s.p_p @ dtop
    dpp_bot = s.p_p @ dbot
    _, db0 = _trace_rows(disc.biot_mesh, 0.0)
    dpb0 = s.p_b @ db0
    if perm_field is None or np.ndim(perm_field) == 0:
        kb0 = P.permeability.k if perm_field is None else float(perm_field)
        kflux = kb0 * dpb0
    else:
        kflux = colloc.to_modes(np.asarray(perm_field)[:, 0] * colloc.to_physical(dpb0))

    _, du0 = _trace_rows(disc.velocity_mesh, 0.0)
    vq0, _ = _trace_rows(disc.fluid_mesh, 0.0)
    pf0 = s.p_f @ vq0
    du = s.u @ du0  # (n_modes, nc): d_3 u_c at x3 = 0
    u0 = s.u[:, :, -1]
    sigma33 = 2 * P.mu_f * du[:, nc - 1] - pf0
    g_f = src.g_f or (None,) * nc
    normal = sigma33 + s.p_p[:, 0] - _surface(g_f[nc - 1], s, colloc)
    bjs = np.stack(
        [
            P.mu_f * (du[:, c] + 1j * k[:, c] * u0[:, nc - 1]) + P.beta * u0[:, c] - _surface(g_f[c], s, colloc)
            for c in range(nc - 1)
        ],
        axis=1,
    )

    # extrapolate the stress to x3 = 1 from the nodal values of its ingredients
    Vb1, Db1 = _trace_rows(disc.biot_mesh, 1.0)

    def top_strain(field):
        grad1 = np.empty((disc.n_modes, nc, nc), dtype=complex)
        for j in range(nc - 1):
            grad1[:, :, j] = 1j * k[:, j, None] * (field @ Vb1)
        grad1[:, :, nc - 1] = field @ Db1
        return 0.5 * (grad1 + np.swapaxes(grad1, 1, 2)), np.trace(grad1, axis1=1, axis2=2)

    strain1, div1 = top_strain(s.eta)
    traction = 2 * P.mu_b * strain1[:, :, nc - 1]
    traction[:, nc - 1] += P.lambda_b * div1 - P.alpha_b * s.p_b[:, -1]
    if P.mu_v or P.lambda_v:
        rate1, rdiv1 = top_strain(s.etadot)
        traction += 2 * P.mu_v * rate1[:, :, nc - 1]
        traction[:, nc - 1] += P.lambda_v * rdiv1
    g_b = src.g_b or (None,) * nc
    traction = traction - np.stack([_surface(g_b[c], s, colloc) for c in range(nc)], axis=1)

    natural = {
        "flux": nrm(P.k_p * dpp_top - kflux - _surface(src.g_flux, s, colloc)),
        "filtration": nrm(s.wdot - u0[:, nc - 1] - P.k_p * dpp_bot - _surface(src.g_filt, s, colloc)),
        "normal_stress": nrm(normal),
        "bjs": nrm(bjs),
        "biot_traction": nrm(traction),
    }
    return InterfaceResiduals(essential, natural)


def divergence_residual(s: State) -> float:
    """|(div u, q)| over all pressure test functions, relative to |u|."""
    r = discrete_divergence(s.u, s.disc)
    un = float(np.sqrt(np.sum(np.abs(s.u) ** 2)))
    rn = float(np.sqrt(np.sum(np.abs(r) ** 2)))
    return rn / un if un > 0 else rn


def _constrained_basis(n: int, slaves: dict[int, Optional[int]]) -> sp.csr_matrix:
    free = [i for i in range(n) if i not in slaves]
    col = {j: c for c, j in enumerate(free)}
    rows, cols = list(free), list(range(len(free)))
    for s_, m in slaves.items():
        if m is not None:
            rows.append(s_)
            cols.append(col[m])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, len(free)))


def _max_ratio(M: np.ndarray, S: np.ndarray) -> float:
    """Largest nu with M y = nu S y; infinite when S is singular on the space."""
    S = 0.5 * (S + S.conj().T)
    M = 0.5 * (M + M.conj().T)
    smin = float(np.min(np.linalg.eigvalsh(S)))
    smax = float(np.max(np.linalg.eigvalsh(S)))
    if smin <= 1e-11 * max(smax, 1e-300):
        return float("inf")
    return float(np.max(sla.eigh(M, S, eigvals_only=True)))


def poincare_probe(
    disc: Discretization, params: PhysicalParams | None = None, ablate: bool = False, cap: int = 4000
) -> dict[str, float]:
    """Largest ratios |eta|^2 / |.|_sd^2 and |p_b|^2 / |.|_sd^2 on the constrained space.

    ``ablate`` drops the interface constraints (eta(0) = w e3 and
    p_p(h/2) = p_b(0)), which lets rigid modes of the Biot layer through.
    """
    P = params or PhysicalParams()
    nc = disc.ncomp
    bm, plm = disc.biot_mesh, disc.plate_mesh
    nb, npp = bm.n_nodes, plm.n_nodes
    if 1 + nc * nb + npp + nb > cap:
        raise ValueError(f"grid too large for the dense probe (cap {cap})")
    Vb, Db = bm.quad_basis
    Vp, Dp = plm.quad_basis
    wb, wp = bm.quad_weights, plm.quad_weights
    sel = _selectors(nb, nc)
    mass_vec = sum(_form(Vb @ s, Vb @ s, wb) for s in sel).toarray()
    mass_b = _form(Vb, Vb, wb).toarray()
    pp_form = (_form(Vp, Vp, wp) + _form(Dp, Dp, wp)).toarray()
    C_eta = 0.0
    C_pb = 0.0
    for i in range(disc.zero_mode + 1):
        kvec = disc.wavenumbers[i]
        kk = float(kvec @ kvec)
        ops = _vector_grad_ops(Vb, Db, kvec, nc)
        E = (2 * P.mu_b * _strain_form(ops, wb) + P.lambda_b * _form(_div_op(ops), _div_op(ops), wb)).toarray()
        n1 = 1 + nc * nb
        S1 = np.zeros((n1, n1), dtype=complex)
        M1 = np.zeros((n1, n1), dtype=complex)
        S1[0, 0] = kk**2 + 1.0
        S1[1:, 1:] = E
        M1[1:, 1:] = mass_vec
        if ablate:
            B1 = np.eye(n1)[:, 1:]
        else:
            slaves = {1 + c * nb: None for c in range(nc - 1)}
            slaves[1 + (nc - 1) * nb] = 0
            B1 = _constrained_basis(n1, slaves).toarray()
        C_eta = max(C_eta, _max_ratio(B1.T @ M1 @ B1, B1.T @ S1 @ B1))

        grads = _scalar_grad_ops(Vb, Db, kvec)
        Kb = sum(_form(g, g, wb) for g in grads).toarray()
        n2 = npp + nb
        S2 = np.zeros((n2, n2), dtype=complex)
        M2 = np.zeros((n2, n2), dtype=complex)
        S2[:npp, :npp] = pp_form
        S2[npp:, npp:] = Kb
        M2[npp:, npp:] = mass_b
        if ablate:
            B2 = np.eye(n2)[:, npp:]
        else:
            B2 = _constrained_basis(n2, {npp - 1: npp}).toarray()
        C_pb = max(C_pb, _max_ratio(B2.T @ M2 @ B2, B2.T @ S2 @ B2))
    return {"C_eta": C_eta, "C_pb": C_pb}


def energy_of_difference(a: State, b: State, params: PhysicalParams) -> float:
    """Stored energy of a - b (kinetic plus potential)."""
    return compute_energy(a.combine(1.0, b, -1.0), params, perm_field=1.0).E


@dataclass
class StabilityResult:
    delta: float
    ratio: float
    energies: np.ndarray = field(repr=False)
    flagged: bool = False


def stability_experiment(cfg, disc: Discretization, delta: float, seed: int = 12345) -> StabilityResult:
    """Two runs whose initial data differ by delta times a random admissible state.

    Returns max_n E(diff^n) / E(diff^0). Runs are linear in the data for
    linear modes, so the ratio is then independent of delta.
    """
    from .stepper import InitialSpec, project_initial_data, rothe_run

    base0 = project_initial_data(cfg.initial, disc, cfg.params)
    if delta == 0:
        return StabilityResult(0.0, float("nan"), np.zeros(0), flagged=True)
    pert = project_initial_data(InitialSpec("random", seed=seed), disc, cfg.params)
    norm = np.sqrt(energy_of_difference(pert, State.zeros(disc), cfg.params))
    other0 = base0.combine(1.0, pert.replace(t=base0.t), delta / norm)
    t1 = rothe_run(cfg, disc, initial=base0)
    t2 = rothe_run(cfg, disc, initial=other0)
    ed = np.array([energy_of_difference(a, b, cfg.params) for a, b in zip(t1.states, t2.states)])
    return StabilityResult(delta, float(np.max(ed) / ed[0]), ed)
