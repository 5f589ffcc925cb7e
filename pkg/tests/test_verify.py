import math

import numpy as np
import pytest
import sympy

from fpsi.expr import SYMBOLS
from fpsi.geometry import DomainSpec, build_discretization
from fpsi.physics import ConstantPermeability, PhysicalParams
from fpsi.state import State
from fpsi.stepper import InitialSpec, project_initial_data
from fpsi.verify import (
    MmsCase,
    _slope,
    dense_reference_step,
    exact_state,
    field_errors,
    mms_case_by_name,
    mms_sources,
    oracle_suite,
    relative_difference,
)

H = 0.1
PARAMS = PhysicalParams(
    rho_f=1.1, mu_f=0.7, beta=0.9, rho_p=1.3, D=0.6, gamma=1.7, alpha_p=0.8, c_p=1.2, k_p=0.5,
    rho_b=1.4, mu_b=0.9, lambda_b=1.6, alpha_b=0.75, c_b=0.35, mu_v=0.2, lambda_v=0.1,
    permeability=ConstantPermeability(1.3),
)  # fmt: skip
P = PARAMS
K = 1.3
TWO_PI = 2 * np.pi


# exact fields written directly in numpy; independent of the symbolic pipeline
def u1(x1, x3, t):
    return 2 * np.sin(TWO_PI * x1) * (x3 + 1) * np.exp(-t)


def u3(x1, x3, t):
    return -TWO_PI * np.cos(TWO_PI * x1) * (x3 + 1) ** 2 * np.exp(-t)


def p_f(x1, x3, t):
    return np.cos(TWO_PI * x1) * x3 * np.exp(-t)


def eta1(x1, x3, t):
    return 0.0 * x1


def eta3(x1, x3, t):
    return np.sin(TWO_PI * x1) * (1 - x3) ** 2 * np.exp(-t)


def w(x1, t):
    return np.sin(TWO_PI * x1) * np.exp(-t)


def p_b(x1, x3, t):
    return np.cos(TWO_PI * x1) * (1 + x3) * np.exp(-t)


def p_p(x1, s, t):
    return np.cos(TWO_PI * x1) * (1 + s - H / 2) * np.exp(-t)


def symbolic_case(scale=1):
    x1, x3, s, t = (SYMBOLS[n] for n in ("x1", "x3", "s", "t"))
    pi, sin, cos, e = sympy.pi, sympy.sin, sympy.cos, sympy.exp(-t)
    h = sympy.nsimplify(H)
    return MmsCase(
        "fd", 1, H,
        u=(scale * 2 * sin(2 * pi * x1) * (x3 + 1) * e, -scale * 2 * pi * cos(2 * pi * x1) * (x3 + 1) ** 2 * e),
        p_f=scale * cos(2 * pi * x1) * x3 * e,
        w=scale * sin(2 * pi * x1) * e,
        p_p=scale * cos(2 * pi * x1) * (1 + s - h / 2) * e,
        eta=(0, scale * sin(2 * pi * x1) * (1 - x3) ** 2 * e),
        p_b=scale * cos(2 * pi * x1) * (1 + x3) * e,
    )  # fmt: skip


def d(f, i, h=1e-2):
    """Derivative of f in its i-th positional argument; central differences, Richardson to sixth order."""

    def g(*args):
        def cd(hh):
            a, b = list(args), list(args)
            a[i] += hh
            b[i] -= hh
            return (f(*a) - f(*b)) / (2 * hh)

        d1 = (4 * cd(h / 2) - cd(h)) / 3
        d2 = (4 * cd(h / 4) - cd(h / 2)) / 3
        return (16 * d2 - d1) / 15

    return g


ETA = (eta1, eta3)
U = (u1, u3)
X = (0, 1)  # argument positions of x1 and x3 in (x1, x3, t)


def sigma_b(i, j):
    div = lambda x1, x3, t: d(eta1, 0)(x1, x3, t) + d(eta3, 1)(x1, x3, t)  # noqa: E731

    def f(x1, x3, t):
        grad = lambda a, b: d(ETA[a], X[b])  # noqa: E731
        sym = grad(i, j)(x1, x3, t) + grad(j, i)(x1, x3, t)
        rate = d(grad(i, j), 2)(x1, x3, t) + d(grad(j, i), 2)(x1, x3, t)
        out = P.mu_b * sym + P.mu_v * rate
        if i == j:
            out += P.lambda_b * div(x1, x3, t) + P.lambda_v * d(div, 2)(x1, x3, t) - P.alpha_b * p_b(x1, x3, t)
        return out

    return f


def sigma_f(i, j):
    def f(x1, x3, t):
        out = P.mu_f * (d(U[i], X[j])(x1, x3, t) + d(U[j], X[i])(x1, x3, t))
        return out - p_f(x1, x3, t) if i == j else out

    return f


def moment(x1, t):
    gs, gw = np.polynomial.legendre.leggauss(4)
    s = gs * H / 2
    return float(np.sum(gw * H / 2 * s * p_p(x1, s, t)))


def fd_sources(x1, x3, t):
    ref = {}
    for i in range(2):
        ref[f"F_b{i}"] = P.rho_b * d(d(ETA[i], 2), 2)(x1, x3, t) - sum(d(sigma_b(i, j), X[j])(x1, x3, t) for j in range(2))
        ref[f"f{i}"] = P.rho_f * d(U[i], 2)(x1, x3, t) - sum(d(sigma_f(i, j), X[j])(x1, x3, t) for j in range(2))
        ref[f"g_b{i}"] = sigma_b(i, 1)(x1, 1.0, t)
    zeta = lambda a, b, c: P.c_b * p_b(a, b, c) + P.alpha_b * (d(eta1, 0)(a, b, c) + d(eta3, 1)(a, b, c))  # noqa: E731
    flux = [lambda a, b, c, j=j: K * d(p_b, X[j])(a, b, c) for j in range(2)]
    ref["S"] = d(zeta, 2)(x1, x3, t) - sum(d(flux[j], X[j])(x1, x3, t) for j in range(2))
    ref["g_pb"] = flux[1](x1, 1.0, t)
    wxx = d(d(w, 0), 0)
    s_mid = 0.02
    ref["F_p"] = (
        P.rho_p * d(d(w, 1), 1)(x1, t)
        + P.D * d(d(wxx, 0), 0)(x1, t)
        + P.gamma * w(x1, t)
        + P.alpha_p * d(d(moment, 0), 0)(x1, t)
        - p_p(x1, -H / 2, t)
        - sigma_b(1, 1)(x1, 0.0, t)
    )
    ref["S_p"] = (
        P.c_p * d(p_p, 2)(x1, s_mid, t)
        - P.alpha_p * s_mid * d(wxx, 1)(x1, t)
        - P.k_p * d(d(p_p, 1), 1)(x1, s_mid, t)
    )
    ref["g_flux"] = P.k_p * d(p_p, 1)(x1, H / 2, t) - flux[1](x1, 0.0, t)
    ref["g_filt"] = d(w, 1)(x1, t) - u3(x1, 0.0, t) - P.k_p * d(p_p, 1)(x1, -H / 2, t)
    ref["g_f0"] = sigma_f(0, 1)(x1, 0.0, t) + P.beta * u1(x1, 0.0, t)
    ref["g_f1"] = sigma_f(1, 1)(x1, 0.0, t) + p_p(x1, -H / 2, t)
    return ref, s_mid


def symbolic_values(src, x1, x3, t, s_mid):
    bulk = dict(x1=x1, x3=x3, t=t)
    out = {f"F_b{i}": src.F_b[i](**bulk) for i in range(2)}
    out.update({f"f{i}": src.f[i](**bulk) for i in range(2)})
    out.update({f"g_b{i}": src.g_b[i](x1=x1, t=t) for i in range(2)})
    out.update({f"g_f{i}": src.g_f[i](x1=x1, t=t) for i in range(2)})
    out["S"] = src.S(**bulk)
    out["S_p"] = src.S_p(x1=x1, s=s_mid, t=t)
    for name in ("F_p", "g_pb", "g_flux", "g_filt"):
        out[name] = getattr(src, name)(x1=x1, t=t)
    return out


@pytest.fixture(scope="module")
def fd_sources_symbolic():
    return mms_sources(symbolic_case(), PARAMS)


@pytest.mark.parametrize("point", [(0.3, 0.4, 0.2), (0.05, 0.8, 0.7), (0.61, 0.15, 0.0)])
def test_manufactured_sources_agree_with_finite_differences(fd_sources_symbolic, point):
    ref, s_mid = fd_sources(*point)
    got = symbolic_values(fd_sources_symbolic, *point, s_mid)
    scale = max(abs(v) for v in ref.values())
    for name, val in ref.items():
        assert abs(float(got[name]) - val) < 1e-6 * scale, name


def test_manufactured_sources_are_linear_in_the_fields(fd_sources_symbolic):
    doubled = mms_sources(symbolic_case(scale=2), PARAMS)
    pt = dict(x1=0.37, x3=0.52, t=0.3)
    assert float(doubled.S(**pt)) == pytest.approx(2 * float(fd_sources_symbolic.S(**pt)), rel=1e-12)
    assert float(doubled.F_b[1](**pt)) == pytest.approx(2 * float(fd_sources_symbolic.F_b[1](**pt)), rel=1e-12)


def test_zero_fields_need_zero_sources():
    src = mms_sources(symbolic_case(scale=0), PARAMS)
    for comp in (*src.F_b, src.S, *src.f, src.F_p, src.S_p, *src.g_b, src.g_pb, src.g_flux, src.g_filt, *src.g_f):
        assert comp.expr == 0


def test_incompatible_fields_rejected():
    x1, x3 = SYMBOLS["x1"], SYMBOLS["x3"]
    with pytest.raises(ValueError, match="kinematic trace"):
        MmsCase("bad", 1, H, u=(0, 0), p_f=0, w=1, p_p=0, eta=(0, x3), p_b=0)
    with pytest.raises(ValueError, match="divergence"):
        MmsCase("bad", 1, H, u=(x1 * (x3 + 1), 0), p_f=0, w=0, p_p=0, eta=(0, 0), p_b=0)


def test_unknown_case_name():
    with pytest.raises(ValueError, match="time, space"):
        mms_case_by_name("nope")


def test_oracle_of_zero_data_is_zero(small_disc):
    ref = dense_reference_step(State.zeros(small_disc), 0.1, PhysicalParams(), disc=small_disc)
    assert ref.max_abs() == 0.0


@pytest.mark.parametrize("dt", [1e-3, 1e-1, 1.0])
def test_oracle_matrix_is_invertible(dt):
    disc = build_discretization(DomainSpec(1, 0.1), 1, 1)
    res = dense_reference_step(State.zeros(disc), dt, PhysicalParams(), return_details=True)
    print(f"dt={dt:g} condition={res.condition:.3e} equilibrated={res.scaled_condition:.3e}")
    assert math.isfinite(res.condition) and res.scaled_condition < 1e12


def test_oracle_agrees_with_stepper_on_small_suite():
    worst = oracle_suite(n_cases=4, seed=5)
    assert max(worst.values()) < 1e-10


def test_relative_difference_is_zero_for_identical_states():
    disc = build_discretization(DomainSpec(1, 0.1), 1, 2)
    s = project_initial_data(InitialSpec("random", seed=1), disc, PhysicalParams())
    assert relative_difference(s, s) == 0.0
    assert relative_difference(s.scaled(1.5), s) == pytest.approx(0.5)


def test_interpolated_exact_state_is_accurate():
    case = mms_case_by_name("time")
    disc = build_discretization(DomainSpec(1, 0.1), 1, 4)
    errs = field_errors(exact_state(case, disc, 0.25), case)
    assert max(v for k, v in errs.items() if k != "u") < 1e-12


def test_slope_of_power_law():
    sizes = [0.1, 0.05, 0.025]
    assert _slope(sizes, [3 * h**2 for h in sizes]) == pytest.approx(2.0)
