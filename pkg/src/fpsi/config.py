"""Sectioned key = value run configuration (grammar in the README)."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .expr import ExpressionError, parse, parse_vector
from .geometry import Discretization, DomainSpec, build_discretization
from .physics import (
    ConstantPermeability,
    NonlinearPermeability,
    PhysicalParams,
    RunMode,
    Sources,
    SpaceTimePermeability,
)
from .stepper import InitialSpec, RunConfig

PARAM_KEYS = (
    "rho_f", "mu_f", "beta", "rho_p", "D", "gamma", "alpha_p", "c_p", "k_p",
    "rho_b", "mu_b", "lambda_b", "alpha_b", "c_b", "mu_v", "lambda_v",
)  # fmt: skip

SECTIONS = {
    "domain": {"d_plane", "h"},
    "discretization": {"M", "n_elems", "degrees"},
    "params": set(PARAM_KEYS) | {"mode"},
    "permeability": {"kind", "k", "expr", "k_min", "k_max", "lipschitz"},
    "sources": {"F_b", "S", "f", "mms"},
    "initial": {"kind", "seed", "amplitude", "path", "u", "w", "wdot", "p_p", "eta", "etadot", "p_b"},
    "run": {"T", "N", "tol", "max_iter", "restart"},
    "output": {"dir", "cadence", "snapshots"},
}
REQUIRED = {"run": {"T", "N"}}


class ConfigError(ValueError):
    pass


@dataclass
class OutputSpec:
    directory: Path = Path("out")
    cadence: Optional[int] = None
    snapshots: bool = True


@dataclass
class Config:
    text: str
    disc: Discretization
    run: RunConfig
    output: OutputSpec = field(default_factory=OutputSpec)
    mms_case: Optional[str] = None


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#",), delimiters=("=",), default_section="\x00"
    )
    cp.optionxform = str
    return cp


def _num(sec, key, kind=float, default=None):
    if key not in sec:
        if default is None:
            raise ConfigError(f"missing key {key!r} in [{sec.name}]")
        return default
    raw = sec[key].strip()
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key} = {raw!r}: expected {kind.__name__}") from exc


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _permeability(cp) -> object:
    if not cp.has_section("permeability"):
        return ConstantPermeability()
    sec = cp["permeability"]
    kind = sec.get("kind", "constant").strip()
    if kind == "constant":
        return ConstantPermeability(_num(sec, "k", default=1.0))
    k_min, k_max = _num(sec, "k_min"), _num(sec, "k_max")
    if "expr" not in sec:
        raise ConfigError(f"[permeability] kind = {kind} needs expr")
    if kind == "spacetime":
        return SpaceTimePermeability(parse(sec["expr"], ("x1", "x2", "x3", "t")), k_min, k_max)
    if kind == "nonlinear":
        lip = _num(sec, "lipschitz", default=-1.0)
        return NonlinearPermeability(parse(sec["expr"], ("zeta",)), k_min, k_max, None if lip < 0 else lip)
    raise ConfigError(f"[permeability] unknown kind {kind!r} (constant, spacetime, nonlinear)")


def _sources(cp, nc: int, params: PhysicalParams, domain: DomainSpec):
    if not cp.has_section("sources"):
        return Sources(), None
    sec = cp["sources"]
    if "mms" in sec:
        other = set(sec) - {"mms"}
        if other:
            raise ConfigError(f"[sources] mms cannot be combined with {sorted(other)}")
        from .verify import mms_case_by_name, mms_sources

        name = sec["mms"].strip()
        return mms_sources(mms_case_by_name(name, domain.d_plane, domain.h), params), name
    bulk = ("x1", "x2", "x3", "t")
    return (
        Sources(
            F_b=parse_vector(sec["F_b"], nc, bulk) if "F_b" in sec else None,
            S=parse(sec["S"], bulk) if "S" in sec else None,
            f=parse_vector(sec["f"], nc, bulk) if "f" in sec else None,
        ),
        None,
    )


def _initial(cp, nc: int) -> InitialSpec:
    if not cp.has_section("initial"):
        return InitialSpec()
    sec = cp["initial"]
    kind = sec.get("kind", "zero").strip()
    if kind == "random":
        return InitialSpec("random", seed=_num(sec, "seed", int, 0), amplitude=_num(sec, "amplitude", default=1.0))
    if kind == "snapshot":
        if "path" not in sec:
            raise ConfigError("[initial] kind = snapshot needs path")
        return InitialSpec("snapshot", path=sec["path"].strip())
    if kind == "expressions":
        bulk, plate, surf = ("x1", "x2", "x3"), ("x1", "x2", "s"), ("x1", "x2")
        fields = {}
        for name in ("u", "eta", "etadot"):
            if name in sec:
                fields[name] = parse_vector(sec[name], nc, bulk)
        for name, allowed in (("p_b", bulk), ("p_p", plate), ("w", surf), ("wdot", surf)):
            if name in sec:
                fields[name] = parse(sec[name], allowed)
        return InitialSpec("expressions", fields=fields)
    if kind in ("zero", "mms"):
        return InitialSpec(kind)
    raise ConfigError(f"[initial] unknown kind {kind!r} (zero, expressions, random, snapshot, mms)")


def parse_config(text: str, base_dir: Path | None = None) -> Config:
    """Parse and validate configuration text. Raises ConfigError."""
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        unknown = set(cp[name]) - SECTIONS[name]
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{name}]")
    for name, keys in REQUIRED.items():
        if not cp.has_section(name) or not keys <= set(cp[name]):
            raise ConfigError(f"[{name}] must set {', '.join(sorted(keys))}")
    try:
        dom = cp["domain"] if cp.has_section("domain") else {}
        domain = DomainSpec(int(dom.get("d_plane", "1")), float(dom.get("h", "0.1")))
        dsec = cp["discretization"] if cp.has_section("discretization") else {}
        n_elems = _ints(dsec.get("n_elems", "4"))
        disc = build_discretization(
            domain, int(dsec.get("M", "4")), n_elems[0] if len(n_elems) == 1 else n_elems, _ints(dsec.get("degrees", "2,1,1,1"))
        )
        psec = cp["params"] if cp.has_section("params") else {}
        values = {k: float(psec[k]) for k in PARAM_KEYS if k in psec}
        mode = RunMode(psec.get("mode", "dynamic-linear").strip())
        params = PhysicalParams(**values, permeability=_permeability(cp), mode=mode)
        sources, mms = _sources(cp, disc.ncomp, params, domain)
        initial = _initial(cp, disc.ncomp)
        if initial.kind == "mms":
            if mms is None:
                raise ConfigError("[initial] kind = mms needs [sources] mms")
            from .verify import exact_state, mms_case_by_name

            initial = InitialSpec("state", state=exact_state(mms_case_by_name(mms, domain.d_plane, domain.h), disc, 0.0))
        if initial.kind == "snapshot" and base_dir is not None and not Path(initial.path).is_absolute():
            initial.path = str(base_dir / initial.path)
        rsec = cp["run"]
        run = RunConfig(
            T=_num(rsec, "T"),
            N=_num(rsec, "N", int),
            params=params,
            sources=sources,
            initial=initial,
            tol=_num(rsec, "tol", default=1e-10),
            max_iter=_num(rsec, "max_iter", int, 500),
            restart=_num(rsec, "restart", int, 50),
        )
        osec = cp["output"] if cp.has_section("output") else {}
        cadence = int(osec["cadence"]) if "cadence" in osec else None
        if cadence is not None and cadence < 1:
            raise ConfigError("[output] cadence must be >= 1")
        run.cadence = cadence
        out = OutputSpec(
            Path(osec.get("dir", "out").strip()), cadence, osec.get("snapshots", "yes").strip().lower() in ("yes", "true", "1")
        )
    except ConfigError:
        raise
    except (ValueError, ExpressionError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return Config(text, disc, run, out, mms)


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, path.parent)
