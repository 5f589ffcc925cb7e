"""Coefficients, permeability laws, source terms and constitutive fields."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Union

import numpy as np

from .spectral import Collocation
from .state import State, divergence, fluid_content, scalar_at_quad, sym_grad, vector_at_quad


class RunMode(str, enum.Enum):
    DYNAMIC_LINEAR = "dynamic-linear"
    QUASISTATIC_LINEAR = "quasistatic-linear"
    QUASISTATIC_NONLINEAR = "quasistatic-nonlinear"


@dataclass(frozen=True)
class ConstantPermeability:
    k: float = 1.0

    def __post_init__(self) -> None:
        if not self.k > 0:
            raise ValueError("constant permeability must be positive")

    @property
    def k_min(self) -> float:
        return self.k

    @property
    def k_max(self) -> float:
        return self.k


@dataclass(frozen=True)
class SpaceTimePermeability:
    """k(x, t), called with keywords x1, x2, x3, t."""

    fn: Callable[..., np.ndarray]
    k_min: float
    k_max: float

    def __post_init__(self) -> None:
        if not (0 < self.k_min <= self.k_max):
            raise ValueError("need 0 < k_min <= k_max")


@dataclass(frozen=True)
class NonlinearPermeability:
    """k = f(zeta) with zeta the Biot fluid content of the previous step."""

    f: Callable[[np.ndarray], np.ndarray]
    k_min: float
    k_max: float
    lipschitz: Optional[float] = None

    def __post_init__(self) -> None:
        if not (0 < self.k_min <= self.k_max):
            raise ValueError("need 0 < k_min <= k_max")

    def __call__(self, zeta: np.ndarray) -> np.ndarray:
        from .expr import Expression

        if isinstance(self.f, Expression):
            return self.f(zeta=zeta)
        return np.asarray(self.f(zeta), dtype=float)


PermeabilityModel = Union[ConstantPermeability, SpaceTimePermeability, NonlinearPermeability]


def exponential_permeability(k0: float = 1.0, rate: float = 1.0, k_min: float = 0.1, k_max: float = 10.0):
    """Example porosity law k = k0 exp(rate * zeta)."""
    return NonlinearPermeability(lambda z: k0 * np.exp(rate * z), k_min, k_max, lipschitz=rate * k_max)


def quadratic_permeability(k0: float = 1.0, a: float = 1.0, k_min: float = 0.1, k_max: float = 10.0):
    """Example porosity law k = k0 (1 + a zeta^2)."""
    return NonlinearPermeability(lambda z: k0 * (1.0 + a * z * z), k_min, k_max)


@dataclass(frozen=True)
class PhysicalParams:
    rho_f: float = 1.0
    mu_f: float = 1.0
    beta: float = 1.0
    rho_p: float = 1.0
    D: float = 1.0
    gamma: float = 1.0
    alpha_p: float = 1.0
    c_p: float = 1.0
    k_p: float = 1.0
    rho_b: float = 1.0
    mu_b: float = 1.0
    lambda_b: float = 1.0
    alpha_b: float = 1.0
    c_b: float = 1.0
    mu_v: float = 0.0
    lambda_v: float = 0.0
    permeability: PermeabilityModel = field(default_factory=ConstantPermeability)
    mode: RunMode = RunMode.DYNAMIC_LINEAR

    POSITIVE = ("mu_f", "D", "gamma", "alpha_p", "c_p", "k_p", "mu_b", "lambda_b", "alpha_b")
    NONNEGATIVE = ("rho_f", "beta", "rho_p", "rho_b", "c_b", "mu_v", "lambda_v")

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RunMode(self.mode))
        for name in self.POSITIVE + self.NONNEGATIVE:
            val = getattr(self, name)
            if not np.isfinite(val):
                raise ValueError(f"{name} must be finite")
        if not self.c_p > 0:
            raise ValueError("c_p > 0 is required (plate storage coefficient must be positive)")
        for name in self.POSITIVE:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in self.NONNEGATIVE:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        nonlinear = isinstance(self.permeability, NonlinearPermeability)
        if self.mode is RunMode.QUASISTATIC_NONLINEAR:
            if self.rho_b != 0:
                raise ValueError("quasistatic-nonlinear mode requires rho_b = 0")
            if not nonlinear:
                raise ValueError("quasistatic-nonlinear mode requires a fluid-content permeability law")
        else:
            if nonlinear:
                raise ValueError(f"{self.mode.value} mode cannot use a fluid-content permeability law")
            if self.mode is RunMode.QUASISTATIC_LINEAR and self.rho_b != 0:
                raise ValueError("quasistatic-linear mode requires rho_b = 0")

    def replace(self, **changes) -> "PhysicalParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return PhysicalParams(**vals)


ScalarSource = Callable[..., np.ndarray]
VectorSource = tuple


@dataclass(frozen=True)
class Sources:
    """Volume sources and, for manufactured-solution runs only, boundary data.

    Callables take keyword coordinates: bulk terms (x1, x2, x3, t), plate
    terms (x1, x2, s, t), surface terms (x1, x2, t). Vector terms are tuples
    with one callable per component.

    Verification-only terms: F_p (plate load), S_p (plate fluid source),
    g_b (traction at x3 = 1), g_pb (Biot flux at x3 = 1), g_flux (flux jump
    across x3 = 0), g_filt (filtration mismatch at s = -h/2), g_f (fluid
    traction at x3 = 0).
    """

    F_b: Optional[VectorSource] = None
    S: Optional[ScalarSource] = None
    f: Optional[VectorSource] = None
    F_p: Optional[ScalarSource] = None
    S_p: Optional[ScalarSource] = None
    g_b: Optional[VectorSource] = None
    g_pb: Optional[ScalarSource] = None
    g_flux: Optional[ScalarSource] = None
    g_filt: Optional[ScalarSource] = None
    g_f: Optional[VectorSource] = None
    verification: bool = False

    VERIFICATION_ONLY = ("F_p", "S_p", "g_b", "g_pb", "g_flux", "g_filt", "g_f")

    def __post_init__(self) -> None:
        used = [n for n in self.VERIFICATION_ONLY if getattr(self, n) is not None]
        if used and not self.verification:
            raise ValueError(f"verification-only source terms {used} need verification=True")

    @property
    def is_zero(self) -> bool:
        names = ("F_b", "S", "f") + self.VERIFICATION_ONLY
        return all(getattr(self, n) is None for n in names)


def eval_permeability(
    model: PermeabilityModel,
    zeta: np.ndarray | None = None,
    x: tuple | None = None,
    t: float | None = None,
    return_clamped: bool = False,
):
    """Permeability samples, clamped to the model's [k_min, k_max].

    Args:
        zeta: fluid content samples (required by the fluid-content law).
        x: (x1, x2, x3) sample coordinates (required by the space-time law).
        t: sample time (space-time law).
    """
    if isinstance(model, ConstantPermeability):
        shape = np.shape(zeta) if zeta is not None else (np.broadcast_shapes(*(np.shape(c) for c in x)) if x else ())
        raw = np.full(shape, float(model.k))
    elif isinstance(model, SpaceTimePermeability):
        if x is None or t is None:
            raise ValueError("space-time permeability needs coordinates and a time")
        x1, x2, x3 = x
        raw = np.asarray(model.fn(x1=x1, x2=x2, x3=x3, t=t), dtype=float)
        raw = np.broadcast_to(raw, np.broadcast_shapes(*(np.shape(c) for c in x))).copy()
    elif isinstance(model, NonlinearPermeability):
        if zeta is None:
            raise ValueError("fluid-content permeability needs a zeta field")
        zeta = np.asarray(zeta, dtype=float)
        if not np.all(np.isfinite(zeta)):
            raise ValueError("non-finite fluid content passed to the permeability law")
        raw = np.broadcast_to(model(zeta), zeta.shape).astype(float)
    else:
        raise TypeError(f"unknown permeability model {model!r}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("permeability law produced non-finite values")
    k = np.clip(raw, model.k_min, model.k_max)
    if return_clamped:
        return k, int(np.count_nonzero(k != raw))
    return k


def permeability_for_step(prev: State, params: PhysicalParams, colloc: Collocation | None = None):
    """Biot permeability on (grid, Biot quadrature) used to advance ``prev``.

    Space-time laws are sampled at the previous time level; the fluid-content
    law at the previous state's fluid content. Returns (field, clamp count).
    """
    disc = prev.disc
    colloc = colloc or Collocation(disc)
    model = params.permeability
    zq = disc.biot_mesh.quad_points
    shape = (colloc.size, zq.size)
    if isinstance(model, ConstantPermeability):
        return np.full(shape, float(model.k)), 0
    if isinstance(model, SpaceTimePermeability):
        x1, x2 = colloc.coords()
        return eval_permeability(
            model, x=(x1[:, None], x2[:, None], zq[None, :]), t=prev.t, return_clamped=True
        )
    zeta_modes = fluid_content(prev, "biot", params.c_b, params.alpha_b)
    zeta = colloc.to_physical(zeta_modes)
    return eval_permeability(model, zeta=zeta, return_clamped=True)


def discharge_velocities(s: State, k_field, params: PhysicalParams | None = None, colloc: Collocation | None = None):
    """Darcy velocities on (grid, quadrature): u_b = -k grad p_b, u_p = -k_p d_s p_p.

    ``u_b`` has shape (grid, ncomp, nq_biot); ``u_p`` has shape (grid, nq_plate).
    """
    params = params or PhysicalParams()
    disc = s.disc
    colloc = colloc or Collocation(disc)
    _, gb = scalar_at_quad(s.p_b, disc.biot_mesh, disc.wavenumbers)
    grad = colloc.to_physical(gb)
    k = np.asarray(k_field, dtype=float)
    if k.ndim == 2:
        k = k[:, None, :]
    _, gp = scalar_at_quad(s.p_p, disc.plate_mesh, disc.wavenumbers)
    return {"u_b": -k * grad, "u_p": -params.k_p * colloc.to_physical(gp[:, -1])}


def biot_stress_modes(s: State, params: PhysicalParams) -> np.ndarray:
    """Mode coefficients of sigma_b at Biot quadrature points, (n_modes, nc, nc, nq)."""
    disc = s.disc
    _, g = vector_at_quad(s.eta, disc.biot_mesh, disc.wavenumbers)
    pv, _ = scalar_at_quad(s.p_b, disc.biot_mesh, disc.wavenumbers)
    eye = np.eye(disc.ncomp)[None, :, :, None]
    iso = (params.lambda_b * divergence(g) - params.alpha_b * pv)[:, None, None, :]
    return 2 * params.mu_b * sym_grad(g) + iso * eye


def biot_stress(s: State, params: PhysicalParams, colloc: Collocation | None = None) -> np.ndarray:
    """Physical total Biot stress on (grid, nc, nc, nq_biot)."""
    colloc = colloc or Collocation(s.disc)
    return colloc.to_physical(biot_stress_modes(s, params))
