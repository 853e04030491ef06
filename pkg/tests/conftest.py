import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from manifold_ekf.manifolds import SO3, Euclidean, Product, ProductPoint, Rotation, Sphere, UnitVector, so3_exp

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
vec3 = st.lists(finite, min_size=3, max_size=3).map(np.array)


def ball(dim, radius):
    """Strategy for vectors with norm at most ``radius``."""
    return (
        st.tuples(
            st.lists(st.floats(-1, 1), min_size=dim, max_size=dim),
            st.floats(0.0, 1.0),
        )
        .filter(lambda a: np.linalg.norm(a[0]) > 1e-6)
        .map(lambda a: np.array(a[0]) / np.linalg.norm(a[0]) * a[1] * radius)
    )


rotations = ball(3, 3.0).map(so3_exp)
unit_vectors = vec3.filter(lambda v: np.linalg.norm(v) > 1e-3).map(UnitVector.normalized)


def random_rotation(rng):
    v = rng.standard_normal(3)
    return so3_exp(v / np.linalg.norm(v) * rng.uniform(0, np.pi - 1e-3))


def random_unit(rng):
    return UnitVector.normalized(rng.standard_normal(3))


def random_in_ball(rng, dim, radius):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v) * radius * rng.uniform() ** (1.0 / dim)


def random_point(manifold, rng):
    if isinstance(manifold, Euclidean):
        return rng.standard_normal(manifold.dim) * 3
    if isinstance(manifold, SO3):
        return random_rotation(rng)
    if isinstance(manifold, Sphere):
        return random_unit(rng)
    if isinstance(manifold, Product):
        return ProductPoint([random_point(f, rng) for f in manifold.factors])
    raise TypeError(manifold)


def chart_vector(manifold, rng, fraction=0.9):
    if isinstance(manifold, Product):
        return np.concatenate([chart_vector(f, rng, fraction) for f in manifold.factors])
    radius = manifold.injectivity_radius
    radius = 5.0 if not np.isfinite(radius) else fraction * radius
    return random_in_ball(rng, manifold.dim, radius)


def points_close(manifold, a, b):
    if isinstance(manifold, Euclidean):
        return np.max(np.abs(a - b))
    if isinstance(manifold, SO3):
        return np.max(np.abs(a.mat - b.mat))
    if isinstance(manifold, Sphere):
        return np.max(np.abs(a.v - b.v))
    return max(points_close(f, x, y) for f, x, y in zip(manifold.factors, a.parts, b.parts))


MANIFOLDS = {
    "R3": Euclidean(3),
    "SO3": SO3(),
    "S2": Sphere(),
    "S2xS2": Product([Sphere(), Sphere()]),
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES = {}


def report(number, ok, text):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {text}"
    ACCEPTANCE_LINES[number] = line
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
