"""Charted manifolds with an affine connection.

A :class:`ChartedManifold` bundles the normal-coordinate chart of an affine
connection (``boxplus``/``boxminus``) with parallel transport along the
chart's geodesics. Tangent vectors are always handled as coordinate vectors
in a fixed, deterministic orthonormal basis chosen by the manifold at each
point, so covariances and transport matrices are plain ``numpy`` arrays.

The module also holds two numerical tools used as ground truth and as the
default linearization: an RK4 integrator of the parallel-transport equation
and a chart-aware finite-difference Jacobian.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .exceptions import ChartDomainError, NotSPDError, StepSizeError

SPD_PIVOT_TOL = 1e-12
FD_STEP_FORWARD = 1e-6
FD_STEP_CENTRAL = 1e-5
ODE_STEP = 1e-3


def symmetrize(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    return 0.5 * (mat + mat.T)


def cholesky_spd(mat: np.ndarray, tol: float = SPD_PIVOT_TOL) -> np.ndarray:
    """Lower Cholesky factor of ``mat``.

    Raises NotSPDError when ``mat`` is not symmetric or when the
    factorization fails or produces a pivot (squared diagonal entry of the
    factor) at or below ``tol``.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise NotSPDError(f"expected a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NotSPDError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.T)) > 1e-9 * scale:
        raise NotSPDError("matrix is not symmetric")
    try:
        factor = np.linalg.cholesky(symmetrize(mat))
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("matrix is not positive-definite") from exc
    if np.min(np.diag(factor)) ** 2 <= tol:
        raise NotSPDError("matrix is numerically singular")
    return factor


def is_spd(mat: np.ndarray, tol: float = SPD_PIVOT_TOL) -> bool:
    try:
        cholesky_spd(mat, tol)
    except NotSPDError:
        return False
    return True


class ChartedManifold(abc.ABC):
    """Smooth manifold with normal coordinates and parallel transport.

    Subclasses set ``dim`` and ``injectivity_radius`` and implement the raw
    geodesic maps :meth:`exp` and :meth:`log` plus the closed-form
    :meth:`transport`. :meth:`boxplus` and :meth:`boxminus` add the chart
    domain checks on top.

    The three ``*_generator``/``lift``/``lower`` hooks expose the connection
    in a global frame so that :func:`ode_transport_oracle` can integrate the
    transport equation independently of :meth:`transport`.
    """

    dim: int
    injectivity_radius: float

    @abc.abstractmethod
    def exp(self, xi: Any, u: np.ndarray) -> Any:
        """Endpoint of the geodesic from ``xi`` with initial velocity ``u``."""

    @abc.abstractmethod
    def log(self, zeta: Any, xi: Any) -> np.ndarray:
        """Normal coordinates of ``zeta`` in the chart centred at ``xi``."""

    @abc.abstractmethod
    def transport(self, xi: Any, mu: np.ndarray) -> np.ndarray:
        """Parallel transport along ``t -> xi [+] t*mu`` for ``t`` in [0, 1]."""

    def check_coords(self, u: np.ndarray, inclusive: bool = False) -> None:
        """Raise ChartDomainError unless ``u`` lies inside the chart.

        With ``inclusive`` the boundary of the chart domain is accepted; the
        geodesic segment itself is still well defined there.
        """
        norm = float(np.linalg.norm(u))
        if not math.isfinite(norm):
            raise ChartDomainError("coordinate vector has non-finite entries")
        radius = self.injectivity_radius
        if norm > radius or (not inclusive and norm >= radius):
            raise ChartDomainError(
                f"|u| = {norm:.6g} exceeds the injectivity radius {radius:.6g}"
            )

    def check_point(self, xi: Any) -> None:
        """Validate a point; the default accepts anything."""

    def boxplus(self, xi: Any, u: np.ndarray) -> Any:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got {u.shape}")
        self.check_coords(u)
        return self.exp(xi, u)

    def boxminus(self, zeta: Any, xi: Any) -> np.ndarray:
        return self.log(zeta, xi)

    # Hooks for the transport ODE oracle.

    def transport_generator(self, xi: Any, mu: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """Matrices ``L(t)`` with ``dV/dt = L(t) V`` for transported vectors ``V``.

        ``V`` is expressed in the manifold's global lifted frame (see
        :meth:`lift`). Shape ``(len(ts), d, d)``.
        """
        raise NotImplementedError(f"{type(self).__name__} exposes no connection coefficients")

    def lift(self, xi: Any) -> np.ndarray:
        """``(d, dim)`` matrix sending chart coordinates at ``xi`` to the lifted frame."""
        raise NotImplementedError

    def lower(self, zeta: Any) -> np.ndarray:
        """``(dim, d)`` matrix sending lifted vectors at ``zeta`` to chart coordinates."""
        raise NotImplementedError


@dataclass(frozen=True)
class TangentCoords:
    """A tangent vector at ``base`` written in the manifold's basis there."""

    base: Any
    vec: np.ndarray

    @classmethod
    def at(cls, manifold: ChartedManifold, base: Any, vec) -> "TangentCoords":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (manifold.dim,):
            raise ValueError(f"expected a vector of length {manifold.dim}, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("tangent coordinates must be finite")
        return cls(base, vec)


@dataclass(frozen=True)
class TransportMatrix:
    """Parallel transport ``T_source M -> T_target M`` in chart coordinates."""

    mat: np.ndarray
    source: Any
    target: Any

    def inverse(self) -> "TransportMatrix":
        return TransportMatrix(np.linalg.inv(self.mat), self.target, self.source)

    def __matmul__(self, other):
        return self.mat @ np.asarray(other)


def _as_vector(u, dim: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (dim,):
        raise ValueError(f"expected a vector of length {dim}, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ChartDomainError("coordinate vector has non-finite entries")
    return u


def boxplus(manifold: ChartedManifold, xi: Any, u) -> Any:
    """Geodesic endpoint ``xi [+] u``; ChartDomainError outside the chart."""
    return manifold.boxplus(xi, _as_vector(u, manifold.dim))


def boxminus(manifold: ChartedManifold, zeta: Any, xi: Any) -> np.ndarray:
    """Normal coordinates ``zeta [-] xi`` of ``zeta`` in the chart at ``xi``."""
    return manifold.boxminus(zeta, xi)


def transport_along_geodesic(manifold: ChartedManifold, xi: Any, mu) -> TransportMatrix:
    mu = _as_vector(mu, manifold.dim)
    manifold.check_coords(mu, inclusive=True)
    mat = manifold.transport(xi, mu)
    return TransportMatrix(mat, xi, manifold.exp(xi, mu))


def transport_covariance(transport, cov: np.ndarray) -> np.ndarray:
    """Transport a covariance as a (2,0)-tensor: ``P cov P^T``."""
    mat = transport.mat if isinstance(transport, TransportMatrix) else np.asarray(transport)
    cholesky_spd(cov)
    return symmetrize(mat @ cov @ mat.T)


def ode_transport_oracle(
    manifold: ChartedManifold, xi: Any, mu, step: float = ODE_STEP
) -> TransportMatrix:
    """Parallel transport by fixed-step RK4 integration of the transport ODE.

    The ODE is linear, ``dV/dt = L(t) V``, so each RK4 step is itself a
    linear map; the step maps are built for all steps at once and multiplied
    together by pairwise reduction. This is the same arithmetic as stepping
    every basis column through RK4.
    """
    if not step > 0:
        raise StepSizeError(f"step must be positive, got {step}")
    mu = _as_vector(mu, manifold.dim)
    manifold.check_coords(mu, inclusive=True)
    n = max(1, math.ceil(1.0 / step - 1e-9))
    h = 1.0 / n
    ts = np.linspace(0.0, 1.0, 2 * n + 1)
    gen = manifold.transport_generator(xi, mu, ts)
    eye = np.eye(gen.shape[-1])
    l0, lm, l1 = gen[0:-1:2], gen[1::2], gen[2::2]
    k1 = l0
    k2 = lm @ (eye + 0.5 * h * k1)
    k3 = lm @ (eye + 0.5 * h * k2)
    k4 = l1 @ (eye + h * k3)
    steps = eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    while steps.shape[0] > 1:
        if steps.shape[0] % 2:
            steps = np.concatenate([steps, eye[None]], axis=0)
        steps = steps[1::2] @ steps[0::2]
    target = manifold.exp(xi, mu)
    mat = manifold.lower(target) @ steps[0] @ manifold.lift(xi)
    return TransportMatrix(mat, xi, target)


def fd_jacobian(
    f: Callable[[Any], Any],
    xi: Any,
    domain: ChartedManifold,
    codomain: ChartedManifold,
    h: float | None = None,
    central: bool = False,
) -> np.ndarray:
    """Jacobian of ``f`` in normal coordinates at ``xi`` and ``f(xi)``.

    Column ``i`` is ``(f(xi [+] h e_i) [-] f(xi)) / h``; with ``central`` the
    symmetric difference of the ``+h`` and ``-h`` probes is used instead.
    """
    if h is None:
        h = FD_STEP_CENTRAL if central else FD_STEP_FORWARD
    if not h > 0:
        raise StepSizeError(f"finite-difference step must be positive, got {h}")
    f0 = f(xi)
    jac = np.empty((codomain.dim, domain.dim))
    for i in range(domain.dim):
        e = np.zeros(domain.dim)
        e[i] = h
        plus = codomain.boxminus(f(domain.boxplus(xi, e)), f0)
        if central:
            minus = codomain.boxminus(f(domain.boxplus(xi, -e)), f0)
            jac[:, i] = (plus - minus) / (2.0 * h)
        else:
            jac[:, i] = plus / h
    return jac
