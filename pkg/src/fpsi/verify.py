"""Independent oracles: a dense real-basis assembler and manufactured solutions.

The dense oracle never uses the per-mode structure of the solver: it expands
every field in real trigonometric functions times its own Lagrange basis,
integrates each bilinear form by brute force on the physical grid, and
imposes the interface couplings through an orthonormal basis of the
constraint null space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import sympy

from .expr import SYMBOLS, Expression
from .geometry import Discretization, DomainSpec, build_discretization
from .physics import ConstantPermeability, PhysicalParams, Sources, SpaceTimePermeability
from .state import ALL_FIELDS, State

DENSE_CAP = 2000


# ---------------------------------------------------------------- dense oracle


def _lagrange_eval(nodes_all: np.ndarray, degree: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global Lagrange basis values/derivatives at pts from the product formula."""
    n = nodes_all.size
    n_el = (n - 1) // degree
    verts = nodes_all[::degree]
    V = np.zeros((pts.size, n))
    D = np.zeros((pts.size, n))
    for p_i, x in enumerate(pts):
        e = min(max(int(np.searchsorted(verts, x, side="right")) - 1, 0), n_el - 1)
        loc = list(range(e * degree, e * degree + degree + 1))
        xs = nodes_all[loc]
        for a, ga in enumerate(loc):
            others = [xs[b] for b in range(len(loc)) if b != a]
            denom = np.prod([xs[a] - o for o in others])
            V[p_i, ga] = np.prod([x - o for o in others]) / denom
            der = 0.0
            for skip in range(len(others)):
                der += np.prod([x - o for m, o in enumerate(others) if m != skip])
            D[p_i, ga] = der / denom
    return V, D


def _gauss(nodes_all: np.ndarray, degree: int, n_quad: int) -> tuple[np.ndarray, np.ndarray]:
    verts = nodes_all[::degree]
    gx, gw = np.polynomial.legendre.leggauss(n_quad)
    pts, wts = [], []
    for a, b in zip(verts[:-1], verts[1:]):
        pts.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        wts.append(0.5 * (b - a) * gw)
    return np.concatenate(pts), np.concatenate(wts)


class _TrigBasis:
    """1, cos(2 pi xi.x), sin(2 pi xi.x) for xi in the positive half of the mode set."""

    def __init__(self, disc: Discretization, n_grid: int):
        self.disc = disc
        d = disc.d
        axis = np.arange(n_grid) / n_grid
        grid = np.stack([g.ravel() for g in np.meshgrid(*([axis] * d), indexing="ij")], axis=-1)
        self.x = grid
        self.positive = list(range(disc.zero_mode + 1, disc.n_modes))
        cols = [np.ones(len(grid))]
        dcols = [[np.zeros(len(grid))] for _ in range(d)]
        lap = [np.zeros(len(grid))]
        for i in self.positive:
            xi = disc.modes[i].astype(float)
            ph = 2 * np.pi * grid @ xi
            kv = 2 * np.pi * xi
            cols += [np.cos(ph), np.sin(ph)]
            for j in range(d):
                dcols[j] += [-kv[j] * np.sin(ph), kv[j] * np.cos(ph)]
            kk = float(kv @ kv)
            lap += [-kk * np.cos(ph), -kk * np.sin(ph)]
        self.T = np.stack(cols, axis=1)
        self.dT = [np.stack(c, axis=1) for c in dcols]
        self.lapT = np.stack(lap, axis=1)
        self.n = self.T.shape[1]
        self.weight = 1.0 / len(grid)

    def to_real(self, coeffs: np.ndarray) -> np.ndarray:
        """Complex mode coefficients (mode axis first) to real trig coefficients."""
        z = self.disc.zero_mode
        parts = [np.real(coeffs[z])[None]]
        for i in self.positive:
            parts += [2 * np.real(coeffs[i])[None], -2 * np.imag(coeffs[i])[None]]
        return np.concatenate(parts, axis=0)

    def to_complex(self, real: np.ndarray) -> np.ndarray:
        out = np.zeros((self.disc.n_modes,) + real.shape[1:], dtype=complex)
        out[self.disc.zero_mode] = real[0]
        for m, i in enumerate(self.positive):
            c = 0.5 * (real[1 + 2 * m] - 1j * real[2 + 2 * m])
            out[i] = c
            out[self.disc.conj_index(i)] = np.conj(c)
        return out


class _DenseSpace:
    """Global real unknown vector for all fields, with field operators on physical points."""

    def __init__(self, disc: Discretization, n_grid: int):
        self.disc = disc
        self.trig = tb = _TrigBasis(disc, n_grid)
        nc = disc.ncomp
        um, pm, plm, bm = disc.velocity_mesh, disc.fluid_mesh, disc.plate_mesh, disc.biot_mesh
        self.fz, self.fw = _gauss(um.nodes, um.degree, um.n_quad)
        self.pz, self.pw = _gauss(plm.nodes, plm.degree, plm.n_quad)
        self.bz, self.bw = _gauss(bm.nodes, bm.degree, bm.n_quad)
        self.basis = {
            "u": _lagrange_eval(um.nodes, um.degree, self.fz),
            "p_f": _lagrange_eval(pm.nodes, pm.degree, self.fz),
            "p_p": _lagrange_eval(plm.nodes, plm.degree, self.pz),
            "p_b": _lagrange_eval(bm.nodes, bm.degree, self.bz),
        }
        self.basis["eta"] = self.basis["etadot"] = self.basis["p_b"]
        ends = {
            "u": (um, (-1.0, 0.0)),
            "p_f": (pm, (-1.0, 0.0)),
            "p_p": (plm, (-disc.domain.h / 2, disc.domain.h / 2)),
            "p_b": (bm, (0.0, 1.0)),
        }
        self.ends = {}
        for name, (mesh, pts) in ends.items():
            V, Dv = _lagrange_eval(mesh.nodes, mesh.degree, np.array(pts))
            self.ends[name] = (V, Dv)
        self.ends["eta"] = self.ends["etadot"] = self.ends["p_b"]
        nodes = {"u": um.n_nodes, "p_f": pm.n_nodes, "p_p": plm.n_nodes, "p_b": bm.n_nodes}
        nodes["eta"] = nodes["etadot"] = bm.n_nodes
        self.ncomp = {"u": nc, "eta": nc, "etadot": nc}
        self.offsets = {}
        off = 0
        for name in ALL_FIELDS:
            if name in ("w", "wdot"):
                size = tb.n
            else:
                size = self.ncomp.get(name, 1) * tb.n * nodes[name]
            self.offsets[name] = (off, size, nodes.get(name, 1))
            off += size
        self.n = off

    def _embed(self, name: str, comp: int, local: np.ndarray) -> np.ndarray:
        off, size, nn = self.offsets[name]
        out = np.zeros((local.shape[0], self.n))
        start = off + comp * self.trig.n * nn
        out[:, start : start + self.trig.n * nn] = local
        return out

    def value(self, name: str, comp: int = 0) -> np.ndarray:
        if name in ("w", "wdot"):
            off, size, _ = self.offsets[name]
            out = np.zeros((self.trig.T.shape[0], self.n))
            out[:, off : off + size] = self.trig.T
            return out
        V, _ = self.basis[name]
        return self._embed(name, comp, np.kron(self.trig.T, V))

    def deriv(self, name: str, comp: int, j: int) -> np.ndarray:
        V, D = self.basis[name]
        if j < self.disc.d:
            return self._embed(name, comp, np.kron(self.trig.dT[j], V))
        return self._embed(name, comp, np.kron(self.trig.T, D))

    def lap_w(self) -> np.ndarray:
        off, size, _ = self.offsets["w"]
        out = np.zeros((self.trig.T.shape[0], self.n))
        out[:, off : off + size] = self.trig.lapT
        return out

    def trace(self, name: str, comp: int, end: int, derivative: bool = False) -> np.ndarray:
        V, D = self.ends[name]
        row = (D if derivative else V)[end : end + 1]
        return self._embed(name, comp, np.kron(self.trig.T, row))

    def weights(self, zw: np.ndarray) -> np.ndarray:
        return np.kron(np.full(self.trig.T.shape[0], self.trig.weight), zw)

    def pack(self, s: State) -> np.ndarray:
        x = np.zeros(self.n)
        for name in ALL_FIELDS:
            off, size, _ = self.offsets[name]
            arr = self.trig.to_real(np.asarray(getattr(s, name)))
            if name in self.ncomp:
                arr = np.moveaxis(arr, 1, 0)  # (comp, trig, node)
            x[off : off + size] = arr.ravel()
        return x

    def unpack(self, x: np.ndarray, t: float) -> State:
        nc = self.disc.ncomp
        f = {}
        for name in ALL_FIELDS:
            off, size, nn = self.offsets[name]
            seg = x[off : off + size]
            if name in ("w", "wdot"):
                f[name] = self.trig.to_complex(seg)
            elif name in self.ncomp:
                arr = seg.reshape(nc, self.trig.n, nn)
                f[name] = self.trig.to_complex(np.moveaxis(arr, 1, 0))
            else:
                f[name] = self.trig.to_complex(seg.reshape(self.trig.n, nn))
        return State(disc=self.disc, t=t, **f)


@dataclass
class DenseResult:
    state: State
    matrix: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)
    condition: float = float("nan")
    scaled_condition: float = float("nan")
    rhs: np.ndarray = field(default=None, repr=False)
    space: object = field(default=None, repr=False)
    step_index: np.ndarray = field(default=None, repr=False)


def _gram(A: np.ndarray, w: np.ndarray, B: np.ndarray) -> np.ndarray:
    return A.T @ (w[:, None] * B)


def _gram_sum(As, w: np.ndarray, Bs=None) -> np.ndarray:
    """Sum of _gram(A_i, w, B_i) as one stacked product."""
    A = np.vstack(As)
    B = A if Bs is None else np.vstack(Bs)
    return A.T @ (np.tile(w, len(As))[:, None] * B)


def dense_reference_step(
    prev: State,
    dt: float,
    params: PhysicalParams,
    perm_field=None,
    disc: Discretization | None = None,
    sources: Sources | None = None,
    t_next: float | None = None,
    return_details: bool = False,
):
    """Dense real-arithmetic solve of one implicit Euler step.

    ``perm_field`` holds Biot permeability samples on the collocation grid
    times the Biot Gauss points (or a constant); None means the constant of
    ``params.permeability``.
    """
    disc = disc or prev.disc
    P = params
    t_next = prev.t + dt if t_next is None else t_next
    sp_ = _DenseSpace(disc, disc.n_colloc)
    nc, d = disc.ncomp, disc.d
    step_fields = ("u", "p_f", "w", "p_p", "eta", "p_b")
    step_idx = np.concatenate(
        [np.arange(sp_.offsets[f][0], sp_.offsets[f][0] + sp_.offsets[f][1]) for f in step_fields]
    )
    if step_idx.size > DENSE_CAP:
        raise ValueError(f"dense oracle limited to {DENSE_CAP} unknowns, got {step_idx.size}")

    Wf = sp_.weights(sp_.fw)
    Wp = sp_.weights(sp_.pw)
    Wb = sp_.weights(sp_.bw)
    Ws = np.full(sp_.trig.T.shape[0], sp_.trig.weight)
    if perm_field is None:
        if not isinstance(P.permeability, ConstantPermeability):
            raise ValueError("perm_field is required for non-constant permeability")
        kq = np.full(Wb.size, P.permeability.k)
    else:
        kq = np.broadcast_to(np.asarray(perm_field, dtype=float), (sp_.trig.T.shape[0], sp_.bz.size)).ravel()

    U = [sp_.value("u", c) for c in range(nc)]
    dU = [[sp_.deriv("u", c, j) for j in range(nc)] for c in range(nc)]
    divU = sum(dU[c][c] for c in range(nc))
    Pf = sp_.value("p_f")
    U0 = [sp_.trace("u", c, 1) for c in range(nc)]
    Wv = sp_.value("w")
    Wd = sp_.value("wdot")
    LapW = sp_.lap_w()
    Pp = sp_.value("p_p")
    dPp = sp_.deriv("p_p", 0, d)
    Pbot = sp_.trace("p_p", 0, 0)
    n_s = sp_.pz.size
    svals = np.tile(sp_.pz, sp_.trig.T.shape[0])
    # plate moment int s p_p ds on the grid, and lap w spread over the thickness
    Mom = (Pp * (svals * np.tile(sp_.pw, sp_.trig.T.shape[0]))[:, None]).reshape(-1, n_s, sp_.n).sum(axis=1)
    LapW_s = np.repeat(LapW, n_s, axis=0)
    E = [sp_.value("eta", c) for c in range(nc)]
    Ed = [sp_.value("etadot", c) for c in range(nc)]
    dE = [[sp_.deriv("eta", c, j) for j in range(nc)] for c in range(nc)]
    divE = sum(dE[c][c] for c in range(nc))
    strainE = [[0.5 * (dE[c][j] + dE[j][c]) for j in range(nc)] for c in range(nc)]
    strainU = [[0.5 * (dU[c][j] + dU[j][c]) for j in range(nc)] for c in range(nc)]
    Pb = sp_.value("p_b")
    gPb = [sp_.deriv("p_b", 0, j) for j in range(nc)]

    def strain_gram(S, w):
        return _gram_sum([S[c][j] for c in range(nc) for j in range(nc)], w)

    K = (
        P.rho_f * _gram_sum(U, Wf)
        + dt * 2 * P.mu_f * strain_gram(strainU, Wf)
        + dt * P.beta * sum(_gram(U0[c], Ws, U0[c]) for c in range(nc - 1))
        - dt * _gram(divU, Wf, Pf)
        - dt * _gram(Pf, Wf, divU)
        + dt * _gram(U0[nc - 1], Ws, Pbot)
        + (P.rho_p / dt + dt * P.gamma) * _gram(Wv, Ws, Wv)
        + dt * P.D * _gram(LapW, Ws, LapW)
        + dt * P.alpha_p * _gram(LapW, Ws, Mom)
        - dt * _gram(Wv, Ws, Pbot)
        + P.c_p * _gram(Pp, Wp, Pp)
        - P.alpha_p * _gram(Pp, Wp * svals, LapW_s)
        + dt * P.k_p * _gram(dPp, Wp, dPp)
        + _gram(Pbot, Ws, Wv)
        - dt * _gram(Pbot, Ws, U0[nc - 1])
        + (P.rho_b / dt) * _gram_sum(E, Wb)
        + (dt * 2 * P.mu_b + 2 * P.mu_v) * strain_gram(strainE, Wb)
        + (dt * P.lambda_b + P.lambda_v) * _gram(divE, Wb, divE)
        - dt * P.alpha_b * _gram(divE, Wb, Pb)
        + P.c_b * _gram(Pb, Wb, Pb)
        + P.alpha_b * _gram(Pb, Wb, divE)
        + dt * _gram_sum(gPb, Wb * kq)
    )
    H = (
        P.rho_f * _gram_sum(U, Wf)
        + (P.rho_p / dt) * _gram(Wv, Ws, Wv)
        + P.rho_p * _gram(Wv, Ws, Wd)
        + P.c_p * _gram(Pp, Wp, Pp)
        - P.alpha_p * _gram(Pp, Wp * svals, LapW_s)
        + _gram(Pbot, Ws, Wv)
        + (P.rho_b / dt) * _gram_sum(E, Wb)
        + P.rho_b * _gram_sum(E, Wb, Ed)
        + 2 * P.mu_v * strain_gram(strainE, Wb)
        + P.lambda_v * _gram(divE, Wb, divE)
        + P.c_b * _gram(Pb, Wb, Pb)
        + P.alpha_b * _gram(Pb, Wb, divE)
    )
    x_prev = sp_.pack(prev)
    b = H @ x_prev
    if sources is not None and not sources.is_zero:
        b = b + dt * _dense_loads(sp_, sources, t_next)

    # constraint rows C x = 0 over the step unknowns, as grid values
    rows = [sp_.trace("u", c, 0) for c in range(nc)]
    rows += [sp_.trace("eta", c, 0) for c in range(nc - 1)]
    rows.append(sp_.trace("eta", nc - 1, 0) - sp_.value("w"))
    rows.append(sp_.trace("p_p", 0, 1) - sp_.trace("p_b", 0, 0))
    C = np.vstack(rows)
    C = C[:, step_idx]
    Z = _constrained_subspace(C)
    Ks = K[np.ix_(step_idx, step_idx)]
    Ared = Z.T @ Ks @ Z
    rhs = Z.T @ b[step_idx]
    # equilibrate: the fluid pressure only enters through dt-scaled rows
    r = 1.0 / np.max(np.abs(Ared), axis=1)
    c = 1.0 / np.max(np.abs(Ared * r[:, None]), axis=0)
    As = Ared * r[:, None] * c[None, :]
    lu = sla.lu_factor(As)
    ys = sla.lu_solve(lu, rhs * r)
    ys += sla.lu_solve(lu, rhs * r - As @ ys)
    y = c * ys
    x = x_prev.copy()
    x[step_idx] = Z @ y
    # velocities by backward differences
    for disp, vel in (("w", "wdot"), ("eta", "etadot")):
        o1, s1, _ = sp_.offsets[disp]
        o2, _, _ = sp_.offsets[vel]
        x[o2 : o2 + s1] = (x[o1 : o1 + s1] - x_prev[o1 : o1 + s1]) / dt
    state = sp_.unpack(x, t_next)
    if return_details:
        return DenseResult(state, Ks, Z, float(np.linalg.cond(Ared)), float(np.linalg.cond(As)), rhs, sp_, step_idx)
    return state


def _constrained_subspace(C: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ker C; coordinates C never touches keep unit vectors.

    An unrestricted SVD basis would blend every coordinate, mixing rows of
    very different scale and spoiling componentwise accuracy.
    """
    n = C.shape[1]
    touched = np.flatnonzero(np.any(C != 0, axis=0))
    free = np.setdiff1d(np.arange(n), touched)
    local = sla.null_space(C[:, touched])
    Z = np.zeros((n, free.size + local.shape[1]))
    Z[free, np.arange(free.size)] = 1.0
    Z[np.ix_(touched, free.size + np.arange(local.shape[1]))] = local
    return Z


def _dense_loads(sp_: _DenseSpace, src: Sources, t: float) -> np.ndarray:
    disc = sp_.disc
    nc = disc.ncomp
    x = sp_.trig.x
    x1 = x[:, 0]
    x2 = x[:, 1] if disc.d == 2 else np.zeros_like(x1)
    Ws = np.full(len(x1), sp_.trig.weight)
    out = np.zeros(sp_.n)

    def bulk(fn, z, zw, test, coord="x3"):
        vals = fn(x1=x1[:, None], x2=x2[:, None], t=t, **{coord: z[None, :]})
        vals = np.broadcast_to(vals, (len(x1), z.size)).ravel()
        return test.T @ (sp_.weights(zw) * vals)

    def surf(fn, test):
        vals = np.broadcast_to(fn(x1=x1, x2=x2, t=t), x1.shape)
        return test.T @ (Ws * vals)

    if src.f is not None:
        for c in range(nc):
            out += bulk(src.f[c], sp_.fz, sp_.fw, sp_.value("u", c))
    if src.g_f is not None:
        for c in range(nc):
            out += surf(src.g_f[c], sp_.trace("u", c, 1))
    if src.F_p is not None:
        out += surf(src.F_p, sp_.value("w"))
    if src.S_p is not None:
        out += bulk(src.S_p, sp_.pz, sp_.pw, sp_.value("p_p"), coord="s")
    if src.g_filt is not None:
        out += surf(src.g_filt, sp_.trace("p_p", 0, 0))
    if src.F_b is not None:
        for c in range(nc):
            out += bulk(src.F_b[c], sp_.bz, sp_.bw, sp_.value("eta", c))
    if src.g_b is not None:
        for c in range(nc):
            out += surf(src.g_b[c], sp_.trace("eta", c, 1))
    if src.S is not None:
        out += bulk(src.S, sp_.bz, sp_.bw, sp_.value("p_b"))
    if src.g_pb is not None:
        out += surf(src.g_pb, sp_.trace("p_b", 0, 1))
    if src.g_flux is not None:
        out += surf(src.g_flux, sp_.trace("p_b", 0, 0))
    return out


def relative_difference(a: State, b: State) -> float:
    num = 0.0
    den = 0.0
    for name in ALL_FIELDS:
        x, y = getattr(a, name), getattr(b, name)
        num += float(np.sum(np.abs(x - y) ** 2))
        den += float(np.sum(np.abs(y) ** 2))
    return math.sqrt(num / den) if den > 0 else math.sqrt(num)


# ------------------------------------------------------- manufactured solutions

X1, X2, X3, S, T = (SYMBOLS[n] for n in ("x1", "x2", "x3", "s", "t"))


@dataclass
class MmsCase:
    """Exact fields as sympy expressions (bulk in x1, x2, x3, t; plate pressure in s)."""

    name: str
    d_plane: int
    h: float
    u: tuple
    p_f: sympy.Expr
    w: sympy.Expr
    p_p: sympy.Expr
    eta: tuple
    p_b: sympy.Expr
    T: float = 0.5

    def __post_init__(self) -> None:
        self.u = tuple(sympy.sympify(c) for c in self.u)
        self.eta = tuple(sympy.sympify(c) for c in self.eta)
        self.p_f, self.w, self.p_p, self.p_b = (sympy.sympify(v) for v in (self.p_f, self.w, self.p_p, self.p_b))
        nc = self.d_plane + 1
        if len(self.u) != nc or len(self.eta) != nc:
            raise ValueError(f"vector fields need {nc} components")
        checks = {
            "divergence-free velocity": sum(sympy.diff(self.u[c], self._x[c]) for c in range(nc)),
            "no-slip at x3=-1": sympy.Matrix([c.subs(X3, -1) for c in self.u]),
            "kinematic trace eta(0) = w e3": sympy.Matrix(
                [self.eta[c].subs(X3, 0) for c in range(nc - 1)] + [self.eta[-1].subs(X3, 0) - self.w]
            ),
            "pressure trace p_p(h/2) = p_b(0)": self.p_p.subs(S, sympy.nsimplify(self.h) / 2) - self.p_b.subs(X3, 0),
        }
        for label, expr in checks.items():
            parts = list(expr) if isinstance(expr, sympy.MatrixBase) else [expr]
            if any(sympy.simplify(e) != 0 for e in parts):
                raise ValueError(f"manufactured fields violate {label}")

    @property
    def _x(self):
        return [X1, X2][: self.d_plane] + [X3]

    def domain(self) -> DomainSpec:
        return DomainSpec(self.d_plane, self.h)

    def exact(self) -> dict:
        """Callables for every State field."""
        wt = sympy.diff(self.w, T)
        etat = tuple(sympy.diff(c, T) for c in self.eta)
        return {
            "u": tuple(Expression(c) for c in self.u),
            "p_f": Expression(self.p_f),
            "w": Expression(self.w),
            "wdot": Expression(wt),
            "p_p": Expression(self.p_p),
            "eta": tuple(Expression(c) for c in self.eta),
            "etadot": tuple(Expression(c) for c in etat),
            "p_b": Expression(self.p_b),
        }


def _grad(f, xs):
    return [sympy.diff(f, v) for v in xs]


def mms_sources(case: MmsCase, params: PhysicalParams) -> Sources:
    """Sources and boundary data under which the exact fields solve the coupled system."""
    P = params
    nc = case.d_plane + 1
    xs = case._x
    plane = xs[:-1]
    h = sympy.nsimplify(case.h)
    perm = P.permeability
    if isinstance(perm, ConstantPermeability):
        kb = sympy.nsimplify(perm.k)
    elif isinstance(perm, SpaceTimePermeability) and isinstance(perm.fn, Expression):
        kb = perm.fn.expr
    else:
        raise ValueError("manufactured solutions need a constant or expression-valued permeability")

    def c(v):
        return sympy.nsimplify(v)

    u, eta = case.u, case.eta
    gu = [_grad(uc, xs) for uc in u]
    ge = [_grad(ec, xs) for ec in eta]
    getat = [_grad(sympy.diff(ec, T), xs) for ec in eta]
    div_e = sum(ge[i][i] for i in range(nc))
    div_et = sum(getat[i][i] for i in range(nc))
    sig_b = [
        [
            c(P.mu_b) * (ge[i][j] + ge[j][i])
            + c(P.mu_v) * (getat[i][j] + getat[j][i])
            + (c(P.lambda_b) * div_e + c(P.lambda_v) * div_et - c(P.alpha_b) * case.p_b) * (1 if i == j else 0)
            for j in range(nc)
        ]
        for i in range(nc)
    ]
    sig_f = [
        [c(P.mu_f) * (gu[i][j] + gu[j][i]) - case.p_f * (1 if i == j else 0) for j in range(nc)] for i in range(nc)
    ]
    F_b = [c(P.rho_b) * sympy.diff(eta[i], T, 2) - sum(sympy.diff(sig_b[i][j], xs[j]) for j in range(nc)) for i in range(nc)]
    zeta = c(P.c_b) * case.p_b + c(P.alpha_b) * div_e
    gp = _grad(case.p_b, xs)
    S_b = sympy.diff(zeta, T) - sum(sympy.diff(kb * gp[j], xs[j]) for j in range(nc))
    f = [c(P.rho_f) * sympy.diff(u[i], T) - sum(sympy.diff(sig_f[i][j], xs[j]) for j in range(nc)) for i in range(nc)]

    def lap(e):
        return sum(sympy.diff(e, v, 2) for v in plane)

    moment = sympy.integrate(S * case.p_p, (S, -h / 2, h / 2))
    pp_bot = case.p_p.subs(S, -h / 2)
    dpp = sympy.diff(case.p_p, S)
    F_p = (
        c(P.rho_p) * sympy.diff(case.w, T, 2)
        + c(P.D) * lap(lap(case.w))
        + c(P.gamma) * case.w
        + c(P.alpha_p) * lap(moment)
        - pp_bot
        - sig_b[nc - 1][nc - 1].subs(X3, 0)
    )
    S_p = c(P.c_p) * sympy.diff(case.p_p, T) - c(P.alpha_p) * S * lap(sympy.diff(case.w, T)) - c(P.k_p) * sympy.diff(case.p_p, S, 2)
    g_b = [sig_b[i][nc - 1].subs(X3, 1) for i in range(nc)]
    g_pb = (kb * gp[-1]).subs(X3, 1)
    g_flux = c(P.k_p) * dpp.subs(S, h / 2) - (kb * gp[-1]).subs(X3, 0)
    g_filt = sympy.diff(case.w, T) - u[-1].subs(X3, 0) - c(P.k_p) * dpp.subs(S, -h / 2)
    g_f = [(sig_f[i][nc - 1] + c(P.beta) * u[i]).subs(X3, 0) for i in range(nc - 1)]
    g_f.append((sig_f[nc - 1][nc - 1]).subs(X3, 0) + pp_bot)

    def E(e):
        return Expression(e)

    return Sources(
        F_b=tuple(E(v) for v in F_b),
        S=E(S_b),
        f=tuple(E(v) for v in f),
        F_p=E(F_p),
        S_p=E(S_p),
        g_b=tuple(E(v) for v in g_b),
        g_pb=E(g_pb),
        g_flux=E(g_flux),
        g_filt=E(g_filt),
        g_f=tuple(E(v) for v in g_f),
        verification=True,
    )


def _pressure_trace_profile(profile_s, h):
    return profile_s.subs(S, sympy.nsimplify(h) / 2)


def time_case(d_plane: int = 1, h: float = 0.1) -> MmsCase:
    """Fields that the base meshes represent exactly, growing like exp(t)."""
    g = sympy.exp(T)
    cx, sx = sympy.cos(2 * sympy.pi * X1), sympy.sin(2 * sympy.pi * X1)
    psi = sx * (X3 + 1) ** 2 * g
    u = [sympy.diff(psi, X3)] + [0] * (d_plane - 1) + [-sympy.diff(psi, X1)]
    w = cx * g
    eta = [sympy.Rational(3, 10) * sx * X3 * g] + [0] * (d_plane - 1) + [cx * (1 + sympy.Rational(1, 5) * X3) * g]
    pp_profile = (1 + 2 * S) * g
    top = _pressure_trace_profile(pp_profile, h)
    p_p = cx * pp_profile
    p_b = cx * (top + sympy.Rational(1, 2) * X3 * g)
    p_f = cx * (1 + X3) * g
    return MmsCase("time", d_plane, h, tuple(u), p_f, w, p_p, tuple(eta), p_b, T=0.5)


def space_case(d_plane: int = 1, h: float = 0.1) -> MmsCase:
    """Smooth non-polynomial profiles, affine in time (backward Euler is exact in time)."""
    a = 1 + T
    cx, sx = sympy.cos(2 * sympy.pi * X1), sympy.sin(2 * sympy.pi * X1)
    psi = sx * (X3 + 1) ** 2 * sympy.exp(X3) * a
    u = [sympy.diff(psi, X3)] + [0] * (d_plane - 1) + [-sympy.diff(psi, X1)]
    w = sympy.Rational(1, 2) * cx * a
    eta = (
        [sympy.Rational(2, 5) * sx * sympy.sin(2 * X3) * a]
        + [0] * (d_plane - 1)
        + [cx * (sympy.Rational(1, 2) * sympy.cos(2 * X3) + sympy.Rational(3, 10) * sympy.sin(3 * X3)) * a]
    )
    hh = sympy.nsimplify(h)
    pp_profile = sympy.cos(30 * S / (10 * hh) + 1)
    top = _pressure_trace_profile(pp_profile, h)
    p_p = cx * pp_profile * a
    p_b = cx * (top * sympy.cos(2 * X3) + sympy.sin(2 * X3)) * a
    p_f = cx * sympy.cos(X3) * a
    return MmsCase("space", d_plane, h, tuple(u), p_f, w, p_p, tuple(eta), p_b, T=0.5)


MMS_CASES = {"time": time_case, "space": space_case}


def mms_case_by_name(name: str, d_plane: int = 1, h: float = 0.1) -> MmsCase:
    try:
        return MMS_CASES[name](d_plane, h)
    except KeyError:
        raise ValueError(f"unknown manufactured case {name!r} (choose from {', '.join(MMS_CASES)})") from None


def exact_state(case: MmsCase, disc: Discretization, t: float) -> State:
    """Interpolated exact fields (velocity projected to be discretely divergence-free)."""
    from .stepper import InitialSpec, project_initial_data

    fields = {k: _at_time(v, t) for k, v in case.exact().items()}
    state = project_initial_data(InitialSpec("expressions", fields=fields), disc, PhysicalParams())
    return state.replace(t=t)


def _at_time(fn, t):
    if isinstance(fn, tuple):
        return tuple(_at_time(c, t) for c in fn)

    def g(**kw):
        kw["t"] = t
        return fn(**kw)

    return g


FIELD_MESH = {"u": "velocity_mesh", "p_f": "fluid_mesh", "p_p": "plate_mesh", "eta": "biot_mesh", "p_b": "biot_mesh"}


def field_errors(s: State, case: MmsCase) -> dict[str, float]:
    """L2 errors at s.t on the collocation grid times each layer's Gauss points."""
    from .spectral import Collocation
    from .state import scalar_at_quad

    disc = s.disc
    colloc = Collocation(disc)
    x1, x2 = colloc.coords()
    ex = case.exact()
    out = {}
    for name, mesh_name in FIELD_MESH.items():
        mesh = getattr(disc, mesh_name)
        coord = "s" if name == "p_p" else "x3"
        zq = mesh.quad_points
        comps = ex[name] if isinstance(ex[name], tuple) else (ex[name],)
        coeffs = getattr(s, name)
        if coeffs.ndim == 2:
            coeffs = coeffs[:, None, :]
        err2 = 0.0
        for cidx, fn in enumerate(comps):
            vals, _ = scalar_at_quad(coeffs[:, cidx], mesh, disc.wavenumbers)
            num = colloc.to_physical(vals)
            exact = np.broadcast_to(fn(x1=x1[:, None], x2=x2[:, None], t=s.t, **{coord: zq[None, :]}), num.shape)
            err2 += float(np.sum((num - exact) ** 2 * mesh.quad_weights) / colloc.size)
        out[name] = math.sqrt(err2)
    wnum = colloc.to_physical(s.w)
    wex = np.broadcast_to(ex["w"](x1=x1, x2=x2, t=s.t), wnum.shape)
    out["w"] = math.sqrt(float(np.mean((wnum - wex) ** 2)))
    return out


@dataclass
class OrderStudy:
    refinement: str
    sizes: list[float]
    errors: list[dict[str, float]]
    orders: dict[str, float]
    flags: dict[str, str] = field(default_factory=dict)
    residuals: list[dict[str, float]] = field(default_factory=list)

    def rows(self) -> list[dict[str, float]]:
        return [{"level": i, "size": h, **e} for i, (h, e) in enumerate(zip(self.sizes, self.errors))]


def _slope(sizes: Sequence[float], errs: Sequence[float]) -> float:
    return float(np.polyfit(np.log(sizes), np.log(errs), 1)[0])


def run_mms(
    case: MmsCase, disc: Discretization, N: int, params: PhysicalParams | None = None, sources: Sources | None = None
):
    """March the manufactured problem to case.T with N steps; returns the trajectory and sources."""
    from .stepper import InitialSpec, RunConfig, rothe_run

    params = params or PhysicalParams()
    src = sources or mms_sources(case, params)
    init = exact_state(case, disc, 0.0)
    cfg = RunConfig(T=case.T, N=N, params=params, sources=src, initial=InitialSpec("state", state=init), tol=1e-13)
    return rothe_run(cfg, disc), src


def order_study(
    case: MmsCase,
    refinement: str,
    levels: int = 4,
    M: int = 1,
    base_elems: int = 4,
    base_steps: int = 25,
    params: PhysicalParams | None = None,
    with_residuals: bool = False,
) -> OrderStudy:
    """Observed convergence orders (least-squares log-log slopes) of the final-time L2 errors."""
    from .diagnostics import interface_residuals

    if levels < 3:
        raise ValueError("an order study needs at least 3 levels")
    params = params or PhysicalParams()
    src = mms_sources(case, params)
    sizes, errors, residuals = [], [], []
    for lev in range(levels):
        if refinement == "time":
            disc = build_discretization(case.domain(), M, 1)
            N = base_steps * 2**lev
            sizes.append(case.T / N)
        elif refinement == "transverse":
            n = base_elems * 2**lev
            disc = build_discretization(case.domain(), M, n)
            N = base_steps
            sizes.append(1.0 / n)
        else:
            raise ValueError(f"unknown refinement {refinement!r}")
        traj, _ = run_mms(case, disc, N, params, src)
        errors.append(field_errors(traj.states[-1], case))
        if with_residuals:
            residuals.append(interface_residuals(traj.states[-1], params, None, src).natural)
    orders, flags = {}, {}
    for name in errors[0]:
        errs = [e[name] for e in errors]
        if max(errs) < 1e-11:
            orders[name] = float("nan")
            flags[name] = "exact"
            continue
        orders[name] = _slope(sizes, errs)
        if any(b > a for a, b in zip(errs[:-1], errs[1:])):
            flags[name] = "non-monotone"
    return OrderStudy(refinement, sizes, errors, orders, flags, residuals)


# dynamic runs use a softer plate: with D = 1 the lowest flexural frequency
# is ~40, and dt in [T/200, T/25] leaves the w error pre-asymptotic
TIME_STUDY_PARAMS = {
    "dynamic-linear": PhysicalParams(D=0.01),
    "quasistatic-linear": PhysicalParams(rho_b=0.0, rho_p=0.0, mode="quasistatic-linear"),
}


def oracle_cases(mode: str, n_cases: int = 20, seed: int = 0):
    """Random (disc, params, prev, dt, perm_field) tuples on minimal meshes."""
    from .physics import RunMode, permeability_for_step
    from .spectral import Collocation
    from .stepper import InitialSpec, project_initial_data

    rng = np.random.default_rng(seed)
    mode = RunMode(mode)
    for i in range(n_cases):
        d = 1 + i % 2
        M = int(rng.integers(0, 2))
        disc = build_discretization(DomainSpec(d, float(rng.uniform(0.05, 0.2))), M, 1)
        vals = {n: float(rng.uniform(0.5, 2.0)) for n in PhysicalParams.POSITIVE + ("rho_f", "beta", "rho_p", "rho_b", "c_b")}
        vals["mu_v"] = float(rng.uniform(0.0, 0.5))
        vals["lambda_v"] = float(rng.uniform(0.0, 0.5))
        if mode is RunMode.DYNAMIC_LINEAR:
            perm = ConstantPermeability(float(rng.uniform(0.5, 2.0)))
            if i % 3 == 2:
                amp = float(rng.uniform(0.1, 0.4))
                perm = SpaceTimePermeability(
                    Expression(f"1 + {amp}*sin(2*pi*x1)*cos(pi*x3) + 0.2*t"), 1 - amp, 1.5 + amp
                )
        else:
            vals["rho_b"] = 0.0
            perm = ConstantPermeability(float(rng.uniform(0.5, 2.0)))
            if mode is RunMode.QUASISTATIC_NONLINEAR:
                from .physics import NonlinearPermeability

                perm = NonlinearPermeability(Expression("1 + tanh(zeta)/2"), 0.5, 1.5)
        params = PhysicalParams(**vals, permeability=perm, mode=mode)
        prev = project_initial_data(InitialSpec("random", seed=int(rng.integers(1 << 30))), disc, params)
        prev = prev.replace(t=float(rng.uniform(0, 1)))
        dt = float(10 ** rng.uniform(-3, 0))
        perm_field, _ = permeability_for_step(prev, params, Collocation(disc))
        yield disc, params, prev, dt, perm_field


def oracle_suite(n_cases: int = 20, seed: int = 0) -> dict[str, float]:
    """Largest relative difference between the stepper and the dense oracle, per run mode."""
    from .physics import RunMode
    from .stepper import Stepper

    out = {}
    for mode in RunMode:
        worst = 0.0
        for disc, params, prev, dt, perm_field in oracle_cases(mode.value, n_cases, seed):
            fast, _, _ = Stepper(disc, params, dt, tol=1e-14).advance(prev, perm_field)
            ref = dense_reference_step(prev, dt, params, perm_field, disc)
            worst = max(worst, relative_difference(fast, ref))
        out[mode.value] = worst
    return out
