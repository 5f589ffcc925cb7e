"""Implicit Euler time loop, initial data and run configuration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .assembly import StepOperator, assemble_step, check_constraints, divergence_free_projection
from .geometry import Discretization
from .linsolve import SolveReport, solve
from .physics import ConstantPermeability, PhysicalParams, Sources, permeability_for_step
from .spectral import Collocation
from .state import ALL_FIELDS, FieldLayout, State, Trajectory, apply_constraints

log = logging.getLogger(__name__)

SCALAR_ON = {"p_f": "fluid_mesh", "p_p": "plate_mesh", "p_b": "biot_mesh"}
VECTOR_ON = {"u": "velocity_mesh", "eta": "biot_mesh", "etadot": "biot_mesh"}


@dataclass
class InitialSpec:
    """How to build the initial State.

    kind: "zero", "expressions" (``fields`` maps names to callables or tuples of
    callables taking keyword coordinates), "random" (``seed``, ``amplitude``),
    "state" (``state``) or "snapshot" (``path``).
    """

    kind: str = "zero"
    fields: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0
    amplitude: float = 1.0
    state: Optional[State] = None
    path: Optional[str] = None


@dataclass
class RunConfig:
    T: float
    N: int
    params: PhysicalParams = field(default_factory=PhysicalParams)
    sources: Sources = field(default_factory=Sources)
    initial: InitialSpec = field(default_factory=InitialSpec)
    cadence: Optional[int] = None
    tol: float = 1e-10
    max_iter: int = 500
    restart: int = 50

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError("final time T must be positive")
        if int(self.N) < 1:
            raise ValueError("number of steps N must be at least 1")
        self.N = int(self.N)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def snapshot_cadence(self) -> int:
        return self.cadence if self.cadence else max(1, self.N // 50)


def _eval_on(fn, disc: Discretization, colloc: Collocation, mesh_name: str, t: float = 0.0) -> np.ndarray:
    mesh = getattr(disc, mesh_name)
    x1, x2 = colloc.coords()
    coord = "s" if mesh_name == "plate_mesh" else "x3"
    vals = fn(x1=x1[:, None], x2=x2[:, None], t=t, **{coord: mesh.nodes[None, :]})
    return colloc.to_modes(np.broadcast_to(vals, (colloc.size, mesh.n_nodes)))


def interpolate_fields(spec_fields: Mapping[str, Any], disc: Discretization, t: float = 0.0) -> dict[str, np.ndarray]:
    """Nodal-in-x3, collocation-in-plane interpolation of callables."""
    colloc = Collocation(disc)
    base = State.zeros(disc, t)
    out = {name: np.array(arr) for name, arr in base.fields().items()}
    x1, x2 = colloc.coords()
    for name, fn in spec_fields.items():
        if fn is None:
            continue
        if name in VECTOR_ON:
            comps = tuple(fn)
            if len(comps) != disc.ncomp:
                raise ValueError(f"{name} needs {disc.ncomp} components")
            out[name] = np.stack([_eval_on(c, disc, colloc, VECTOR_ON[name], t) for c in comps], axis=1)
        elif name in SCALAR_ON:
            out[name] = _eval_on(fn, disc, colloc, SCALAR_ON[name], t)
        elif name in ("w", "wdot"):
            out[name] = colloc.to_modes(np.broadcast_to(fn(x1=x1, x2=x2, t=t), (colloc.size,)))
        else:
            raise ValueError(f"unknown initial field {name!r}")
    return out


def _check_compatibility(f: Mapping[str, np.ndarray], disc: Discretization, tol: float = 1e-8) -> None:
    nc = disc.ncomp
    scale = max(1.0, *(float(np.max(np.abs(v), initial=0.0)) for v in f.values()))
    conds = [
        ("no-slip u(x3=-1) = 0", f["u"][:, :, 0]),
        ("tangential eta(x3=0) = 0", f["eta"][:, : nc - 1, 0]),
        ("kinematic trace eta_3(x3=0) = w", f["eta"][:, nc - 1, 0] - f["w"]),
        ("tangential etadot(x3=0) = 0", f["etadot"][:, : nc - 1, 0]),
        ("kinematic trace etadot_3(x3=0) = wdot", f["etadot"][:, nc - 1, 0] - f["wdot"]),
        ("pressure trace p_p(h/2) = p_b(0)", f["p_p"][:, -1] - f["p_b"][:, 0]),
    ]
    for name, defect in conds:
        val = float(np.max(np.abs(defect), initial=0.0))
        if val > tol * scale:
            raise ValueError(f"initial data violates {name} (defect {val:.3e})")


def _random_fields(disc: Discretization, seed: int, amplitude: float) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    decay = 1.0 / (1.0 + np.sum(disc.modes.astype(float) ** 2, axis=1)) ** 1.5
    out = {}
    for name, arr in State.zeros(disc).fields().items():
        shape = arr.shape
        raw = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        raw *= decay.reshape((-1,) + (1,) * (len(shape) - 1))
        raw = 0.5 * (raw + np.conj(raw[::-1]))
        out[name] = amplitude * raw
    return out


def project_initial_data(spec: InitialSpec, disc: Discretization, params: PhysicalParams) -> State:
    """Build a constrained, divergence-free, Hermitian initial State."""
    if spec.kind == "state":
        return spec.state
    if spec.kind == "snapshot":
        from .io import load_snapshot

        state, _ = load_snapshot(spec.path, disc)
        return state
    if spec.kind == "zero":
        return State.zeros(disc)
    if spec.kind == "expressions":
        given = {k for k, v in spec.fields.items() if v is not None}
        if params.rho_b == 0 and "etadot" in given:
            raise ValueError("etadot initial data is not allowed when rho_b = 0")
        if params.rho_p == 0 and "wdot" in given:
            raise ValueError("wdot initial data is not allowed when rho_p = 0")
        f = interpolate_fields(spec.fields, disc)
        _check_compatibility(f, disc)
    elif spec.kind == "random":
        f = _random_fields(disc, spec.seed, spec.amplitude)
        if params.rho_b == 0:
            f["etadot"] = np.zeros_like(f["etadot"])
        if params.rho_p == 0:
            f["wdot"] = np.zeros_like(f["wdot"])
    else:
        raise ValueError(f"unknown initial data kind {spec.kind!r}")
    layout = FieldLayout(disc)
    state = apply_constraints(layout.pack(_as_state(f, disc)), layout)
    u, _ = divergence_free_projection(np.array(state.u), disc)
    return state.replace(u=0.5 * (u + np.conj(u[::-1])))


def _as_state(f: Mapping[str, np.ndarray], disc: Discretization, t: float = 0.0) -> State:
    return State(disc=disc, t=t, **{k: f[k] for k in ALL_FIELDS})


class Stepper:
    """Advances States with a fixed dt, caching the operator when it cannot change."""

    def __init__(
        self,
        disc: Discretization,
        params: PhysicalParams,
        dt: float,
        sources: Sources | None = None,
        tol: float = 1e-10,
        max_iter: int = 500,
        restart: int = 50,
    ):
        self.disc = disc
        self.params = params
        self.dt = float(dt)
        self.sources = sources or Sources()
        self.tol, self.max_iter, self.restart = tol, max_iter, restart
        self.colloc = Collocation(disc)
        self._const_operator: StepOperator | None = None

    @property
    def constant_k(self) -> bool:
        return isinstance(self.params.permeability, ConstantPermeability)

    def permeability(self, prev: State) -> tuple[np.ndarray, int]:
        return permeability_for_step(prev, self.params, self.colloc)

    def advance(
        self, prev: State, perm_field: np.ndarray | None = None, t_next: float | None = None
    ) -> tuple[State, SolveReport, np.ndarray]:
        """One step. ``perm_field`` overrides the lagged permeability (replay)."""
        clamped = 0
        operator = None
        if perm_field is None:
            perm_field, clamped = self.permeability(prev)
        if self.constant_k:
            if self._const_operator is None:
                self._const_operator = StepOperator(self.disc, self.params, self.dt, perm_field, self.colloc)
            operator = self._const_operator
        t_next = prev.t + self.dt if t_next is None else t_next
        system = assemble_step(
            prev, self.dt, t_next, self.params, perm_field, self.sources, self.disc, operator=operator, colloc=self.colloc
        )
        system.clamped = clamped
        nxt, report = solve(system, tol=self.tol, max_iter=self.max_iter, restart=self.restart)
        return nxt, report, perm_field


def step(
    prev: State,
    dt: float,
    t_next: float,
    params: PhysicalParams,
    sources: Sources,
    disc: Discretization,
    perm_field: np.ndarray | None = None,
) -> State:
    """One implicit Euler step from ``prev`` to ``t_next`` (= prev.t + dt)."""
    if abs(prev.t + dt - t_next) > 1e-12 * max(1.0, abs(t_next)):
        raise ValueError("t_next must equal prev.t + dt")
    nxt, _, _ = Stepper(disc, params, dt, sources).advance(prev, perm_field, t_next)
    return nxt


class StepFailure(RuntimeError):
    def __init__(self, n: int, cause: Exception):
        super().__init__(f"step {n} failed: {cause}")
        self.n = n
        self.cause = cause


def rothe_run(
    cfg: RunConfig,
    disc: Discretization,
    initial: State | None = None,
    perm_fields: list | None = None,
    on_step: Callable[[int, State, SolveReport | None, Any], None] | None = None,
) -> Trajectory:
    """N implicit Euler steps of size T/N.

    ``perm_fields`` replays recorded permeability fields instead of computing
    them from the lagged state.
    """
    state = initial if initial is not None else project_initial_data(cfg.initial, disc, cfg.params)
    check_constraints(state, tol=1e-10)
    stepper = Stepper(disc, cfg.params, cfg.dt, cfg.sources, cfg.tol, cfg.max_iter, cfg.restart)
    traj = Trajectory(states=[state], dt=cfg.dt, params=cfg.params)
    if on_step:
        on_step(0, state, None, None)
    t0 = state.t
    for n in range(cfg.N):
        replay = perm_fields[n] if perm_fields is not None else None
        try:
            nxt, report, perm = stepper.advance(state, replay, t0 + (n + 1) * cfg.dt)
        except Exception as exc:
            raise StepFailure(n + 1, exc) from exc
        traj.states.append(nxt)
        traj.perm_fields.append(None if stepper.constant_k else perm)
        traj.reports.append(report)
        if on_step:
            on_step(n + 1, nxt, report, perm)
        state = nxt
    return traj
