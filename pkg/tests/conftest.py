import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fpsi.geometry import DomainSpec, build_discretization

settings.register_profile(
    "fpsi", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile("fpsi")


@pytest.fixture
def small_disc():
    return build_discretization(DomainSpec(1, 0.1), 2, 3)


@pytest.fixture
def plane_disc():
    return build_discretization(DomainSpec(2, 0.1), 1, 2)


def synthesize(coeffs, mesh, disc, x1, z, x2=0.0):
    """Direct mode sum of a scalar field at one point (x1, x2, z)."""
    V, D = mesh.basis(np.array([z]))
    prof = np.asarray(V @ np.asarray(coeffs).T).ravel()
    dprof = np.asarray(D @ np.asarray(coeffs).T).ravel()
    xs = np.array([x1, x2])[: disc.d]
    phase = np.exp(2j * np.pi * disc.modes @ xs)
    return float(np.real(np.sum(prof * phase))), float(np.real(np.sum(dprof * phase)))
