"""Concrete charted manifolds: R^n, SO(3), S^2 and finite products.

Conventions
-----------
SO(3)
    Tangent vectors are body-frame coordinates, ``xi [+] u = xi @ exp(u^)``.
    The connection is the Cartan-Schouten 0-connection
    (``nabla_X Y = 1/2 [X, Y]`` on left-invariant fields), whose geodesics are
    the one-parameter subgroups and whose transport along ``xi exp(t mu^)``
    is ``exp(-mu^/2)`` in body coordinates.
S^2
    Geodesics are great circles and transport is the Levi-Civita transport of
    the round metric (rotation about the great circle's normal). The tangent
    basis at ``p`` is built from the coordinate axis least aligned with ``p``.
"""

from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np
from scipy import linalg

from .exceptions import ChartDomainError
from .geometry import ChartedManifold, TransportMatrix

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-12
SMALL_ANGLE = 1e-8
SO3_CUT_MARGIN = 1e-6
SPHERE_ANTIPODAL_MARGIN = 1e-9


def hat(u) -> np.ndarray:
    """Cross-product matrix: ``hat(u) @ v == cross(u, v)``."""
    x, y, z = u
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(mat: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat`, applied to the skew part of ``mat``."""
    return 0.5 * np.array(
        [mat[2, 1] - mat[1, 2], mat[0, 2] - mat[2, 0], mat[1, 0] - mat[0, 1]]
    )


class Rotation:
    """A 3x3 rotation matrix.

    Construction checks orthogonality and ``det = +1`` to ``1e-9`` unless
    ``check=False`` (used internally on products of valid rotations).
    """

    __slots__ = ("mat",)

    def __init__(self, mat, check: bool = True):
        mat = np.asarray(mat, dtype=float)
        if check:
            if mat.shape != (3, 3):
                raise ValueError(f"rotation must be 3x3, got shape {mat.shape}")
            if not np.all(np.isfinite(mat)):
                raise ValueError("rotation has non-finite entries")
            if np.max(np.abs(mat.T @ mat - np.eye(3))) > ORTHO_TOL:
                raise ValueError("matrix is not orthogonal")
            if abs(np.linalg.det(mat) - 1.0) > ORTHO_TOL:
                raise ValueError("matrix is not a proper rotation (det != +1)")
        self.mat = mat

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3), check=False)

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(self.mat @ other.mat, check=False)
        return self.mat @ np.asarray(other)

    def inverse(self) -> "Rotation":
        return Rotation(self.mat.T, check=False)

    def angle(self) -> float:
        """Rotation angle in ``[0, pi]``; well defined everywhere."""
        return _rotation_angle(self.mat)

    def orthonormalized(self) -> "Rotation":
        """Nearest rotation in the Frobenius norm (polar factor)."""
        u, _, vt = np.linalg.svd(self.mat)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return Rotation(r, check=False)

    def __repr__(self) -> str:
        return f"Rotation({self.mat.tolist()!r})"


class UnitVector:
    """A point of the unit sphere S^2 embedded in R^3."""

    __slots__ = ("v",)

    def __init__(self, v, check: bool = True):
        v = np.asarray(v, dtype=float)
        if check:
            if v.shape != (3,):
                raise ValueError(f"unit vector must have 3 entries, got shape {v.shape}")
            if not np.all(np.isfinite(v)) or abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
                raise ValueError("vector does not have unit norm")
        self.v = v

    @classmethod
    def normalized(cls, v) -> "UnitVector":
        v = np.asarray(v, dtype=float)
        norm = np.linalg.norm(v)
        if not norm > 0:
            raise ValueError("cannot normalize a zero vector")
        return cls(v / norm, check=False)

    def __repr__(self) -> str:
        return f"UnitVector({self.v.tolist()!r})"


class ProductPoint:
    """A point of a product manifold, one part per factor."""

    __slots__ = ("parts",)

    def __init__(self, parts: Sequence):
        self.parts = tuple(parts)

    def __getitem__(self, i):
        return self.parts[i]

    def __len__(self):
        return len(self.parts)

    def __repr__(self) -> str:
        return f"ProductPoint({list(self.parts)!r})"


def _rotation_angle(mat: np.ndarray) -> float:
    s = 0.5 * math.sqrt(
        (mat[2, 1] - mat[1, 2]) ** 2
        + (mat[0, 2] - mat[2, 0]) ** 2
        + (mat[1, 0] - mat[0, 1]) ** 2
    )
    c = 0.5 * (mat[0, 0] + mat[1, 1] + mat[2, 2] - 1.0)
    return math.atan2(s, c)


def _rodrigues(x: float, y: float, z: float) -> np.ndarray:
    theta2 = x * x + y * y + z * z
    if theta2 < SMALL_ANGLE * SMALL_ANGLE:
        # I + u^ + u^2/2 with u^2 = u u^T - |u|^2 I
        c, a, b = 1.0 - 0.5 * theta2, 1.0, 0.5
    else:
        theta = math.sqrt(theta2)
        c = math.cos(theta)
        a = math.sin(theta) / theta
        b = (1.0 - c) / theta2
    return np.array(
        [
            [c + b * x * x, b * x * y - a * z, b * x * z + a * y],
            [b * x * y + a * z, c + b * y * y, b * y * z - a * x],
            [b * x * z - a * y, b * y * z + a * x, c + b * z * z],
        ]
    )


def so3_exp(u) -> Rotation:
    """Rodrigues formula for the exponential of ``hat(u)``."""
    x, y, z = (float(c) for c in u)
    return Rotation(_rodrigues(x, y, z), check=False)


def so3_log(rot: Rotation) -> np.ndarray:
    """Body-frame exponential coordinates of ``rot``.

    Raises ChartDomainError when the rotation angle is within ``1e-6`` of pi,
    where the rotation axis is ambiguous.
    """
    mat = rot.mat if isinstance(rot, Rotation) else np.asarray(rot, dtype=float)
    w = vee(mat)
    s = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    c = 0.5 * (mat[0, 0] + mat[1, 1] + mat[2, 2] - 1.0)
    theta = math.atan2(s, c)
    if theta >= math.pi - SO3_CUT_MARGIN:
        raise ChartDomainError(f"rotation angle {theta:.9g} is at the SO(3) cut locus")
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / s)


def so3_right_jacobian(phi) -> np.ndarray:
    """Right Jacobian ``J_r`` with ``exp(phi + d) = exp(phi) exp(J_r(phi) d + O(d^2))``."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    theta = math.sqrt(theta2)
    a = (1.0 - math.cos(theta)) / theta2
    b = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * k + b * (k @ k)


def so3_transport(xi: Rotation, mu) -> TransportMatrix:
    """Transport along ``xi exp(t mu^)`` for the 0-connection: ``exp(-mu^/2)``."""
    mu = np.asarray(mu, dtype=float)
    if float(np.linalg.norm(mu)) > math.pi:
        raise ChartDomainError("geodesic longer than the SO(3) injectivity radius")
    return TransportMatrix(_rodrigues(*(-0.5 * mu)), xi, xi @ so3_exp(mu))


@functools.lru_cache(maxsize=4096)
def _frame(px: float, py: float, pz: float):
    """Tangent basis vectors at ``(px, py, pz)`` as two 3-tuples.

    Cached: the filter asks for the frame at the same output points many
    times within one update.
    """
    ax, ay, az = abs(px), abs(py), abs(pz)
    if ax <= ay and ax <= az:
        e = (1.0 - px * px, -px * py, -px * pz)
    elif ay <= az:
        e = (-py * px, 1.0 - py * py, -py * pz)
    else:
        e = (-pz * px, -pz * py, 1.0 - pz * pz)
    n = math.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
    e1 = (e[0] / n, e[1] / n, e[2] / n)
    e2 = (
        py * e1[2] - pz * e1[1],
        pz * e1[0] - px * e1[2],
        px * e1[1] - py * e1[0],
    )
    return e1, e2


def _unit(p) -> tuple:
    v = p.v if isinstance(p, UnitVector) else np.asarray(p, dtype=float)
    return float(v[0]), float(v[1]), float(v[2])


def sphere_basis(p) -> np.ndarray:
    """Orthonormal tangent basis at ``p`` as the columns of a 3x2 matrix.

    The first column is the coordinate axis least aligned with ``p``
    (lowest index on ties) made orthogonal to ``p``; the second is
    ``p x first``.
    """
    e1, e2 = _frame(*_unit(p))
    return np.array([[e1[0], e2[0]], [e1[1], e2[1]], [e1[2], e2[2]]])


def project_to_tangent(p, w) -> np.ndarray:
    """Coordinates, in the basis at ``p``, of the tangent projection of ``w``."""
    return sphere_basis(p).T @ np.asarray(w, dtype=float)


def _sphere_exp(p: tuple, v0: float, v1: float) -> tuple:
    e1, e2 = _frame(*p)
    w = tuple(v0 * a + v1 * b for a, b in zip(e1, e2))
    theta = math.sqrt(v0 * v0 + v1 * v1)
    if theta < 1e-12:
        q = tuple(a + b for a, b in zip(p, w))
    else:
        c, s = math.cos(theta), math.sin(theta) / theta
        q = tuple(c * a + s * b for a, b in zip(p, w))
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2])
    return (q[0] / n, q[1] / n, q[2] / n)


def sphere_exp(p: UnitVector, v) -> UnitVector:
    """Great-circle endpoint from ``p`` with tangent coordinates ``v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (2,):
        raise ValueError(f"sphere tangent vector must have 2 entries, got shape {v.shape}")
    if not float(np.linalg.norm(v)) < math.pi:
        raise ChartDomainError("tangent vector reaches the antipode of the base point")
    if not np.any(v):
        return p
    return UnitVector(np.array(_sphere_exp(_unit(p), float(v[0]), float(v[1]))), check=False)


def sphere_log(q: UnitVector, p: UnitVector) -> np.ndarray:
    """Tangent coordinates at ``p`` of the great-circle arc from ``p`` to ``q``."""
    px, py, pz = _unit(p)
    qx, qy, qz = _unit(q)
    c = px * qx + py * qy + pz * qz
    if c <= -1.0 + SPHERE_ANTIPODAL_MARGIN:
        raise ChartDomainError("points are antipodal; the sphere chart is undefined")
    wx, wy, wz = qx - c * px, qy - c * py, qz - c * pz
    s = math.sqrt(wx * wx + wy * wy + wz * wz)
    theta = math.atan2(s, min(1.0, c))
    scale = 1.0 if theta < SMALL_ANGLE else theta / s
    e1, e2 = _frame(px, py, pz)
    return np.array(
        [
            scale * (e1[0] * wx + e1[1] * wy + e1[2] * wz),
            scale * (e2[0] * wx + e2[1] * wy + e2[2] * wz),
        ]
    )


def _sphere_transport(p: tuple, v0: float, v1: float):
    """Transport matrix (nested tuples) and endpoint for the arc ``p -> exp_p(v)``.

    Along a great circle with unit direction ``t`` and normal ``n = p x t``,
    transport fixes ``n`` and carries ``t`` to the arc's velocity at the end.
    """
    q = _sphere_exp(p, v0, v1)
    theta = math.sqrt(v0 * v0 + v1 * v1)
    if theta < 1e-12:
        return ((1.0, 0.0), (0.0, 1.0)), q
    # In the basis (e1, e2) at p the direction is (v0, v1)/theta and the
    # normal (-v1, v0)/theta; their images at q are the arc velocity and n.
    e1, e2 = _frame(*p)
    f1, f2 = _frame(*q)
    a0, a1 = v0 / theta, v1 / theta
    t = tuple(a0 * x + a1 * y for x, y in zip(e1, e2))
    n = tuple(-a1 * x + a0 * y for x, y in zip(e1, e2))
    c, s = math.cos(theta), math.sin(theta)
    t_end = tuple(c * ti - s * pi for ti, pi in zip(t, p))
    tf1 = sum(x * y for x, y in zip(t_end, f1))
    tf2 = sum(x * y for x, y in zip(t_end, f2))
    nf1 = sum(x * y for x, y in zip(n, f1))
    nf2 = sum(x * y for x, y in zip(n, f2))
    # column j = image of e_j = a_j t_end + b_j n with (a, b) = (a0, -a1), (a1, a0)
    mat = (
        (a0 * tf1 - a1 * nf1, a1 * tf1 + a0 * nf1),
        (a0 * tf2 - a1 * nf2, a1 * tf2 + a0 * nf2),
    )
    return mat, q


def sphere_transport(p: UnitVector, v) -> TransportMatrix:
    """Great-circle parallel transport as a 2x2 matrix between the bases at ``p`` and its endpoint."""
    v = np.asarray(v, dtype=float)
    if float(np.linalg.norm(v)) > math.pi:
        raise ChartDomainError("geodesic longer than the sphere injectivity radius")
    mat, q = _sphere_transport(_unit(p), float(v[0]), float(v[1]))
    return TransportMatrix(np.array(mat), p, UnitVector(np.array(q), check=False))


class Euclidean(ChartedManifold):
    """R^n with the flat connection; points are 1-D arrays."""

    injectivity_radius = math.inf

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("dimension must be positive")
        self.dim = n

    def check_coords(self, u, inclusive: bool = False) -> None:
        if not np.all(np.isfinite(u)):
            raise ChartDomainError("coordinate vector has non-finite entries")

    def exp(self, xi, u):
        return np.asarray(xi, dtype=float) + u

    def log(self, zeta, xi):
        return np.asarray(zeta, dtype=float) - np.asarray(xi, dtype=float)

    def transport(self, xi, mu):
        return np.eye(self.dim)

    def transport_generator(self, xi, mu, ts):
        return np.zeros((len(ts), self.dim, self.dim))

    def lift(self, xi):
        return np.eye(self.dim)

    def lower(self, zeta):
        return np.eye(self.dim)

    def __repr__(self) -> str:
        return f"Euclidean({self.dim})"


class SO3(ChartedManifold):
    """SO(3) with the Cartan-Schouten 0-connection and body-frame coordinates."""

    dim = 3
    injectivity_radius = math.pi

    def check_point(self, xi) -> None:
        if not isinstance(xi, Rotation):
            raise TypeError(f"expected a Rotation, got {type(xi).__name__}")
        Rotation(xi.mat)

    def exp(self, xi: Rotation, u):
        return Rotation(xi.mat @ _rodrigues(float(u[0]), float(u[1]), float(u[2])), check=False)

    def log(self, zeta: Rotation, xi: Rotation):
        return so3_log(xi.mat.T @ zeta.mat)

    def transport(self, xi, mu):
        return _rodrigues(*(-0.5 * np.asarray(mu, dtype=float)))

    def transport_generator(self, xi, mu, ts):
        # Ambient form of the 0-connection on matrices V = gamma v^:
        # dV/dt = (gamma' gamma^T V + V gamma^T gamma') / 2.
        k = hat(mu)
        gamma = xi.mat @ linalg.expm(ts[:, None, None] * k)
        gamma_dot = gamma @ k
        g_left = gamma_dot @ np.swapaxes(gamma, 1, 2)
        g_right = np.swapaxes(gamma, 1, 2) @ gamma_dot
        eye = np.eye(3)
        left = np.einsum("tij,kl->tikjl", g_left, eye)
        right = np.einsum("ij,tlk->tikjl", eye, g_right)
        return 0.5 * (left + right).reshape(len(ts), 9, 9)

    def lift(self, xi):
        return np.column_stack([(xi.mat @ hat(e)).ravel() for e in np.eye(3)])

    def lower(self, zeta):
        return np.vstack([vee(zeta.mat.T @ e.reshape(3, 3)) for e in np.eye(9)]).T

    def __repr__(self) -> str:
        return "SO3()"


class Sphere(ChartedManifold):
    """The unit sphere S^2 with great-circle geodesics."""

    dim = 2
    injectivity_radius = math.pi

    def check_point(self, xi) -> None:
        if not isinstance(xi, UnitVector):
            raise TypeError(f"expected a UnitVector, got {type(xi).__name__}")
        UnitVector(xi.v)

    def exp(self, xi: UnitVector, u):
        u0, u1 = float(u[0]), float(u[1])
        if u0 == 0.0 and u1 == 0.0:
            return xi
        return UnitVector(np.array(_sphere_exp(_unit(xi), u0, u1)), check=False)

    def log(self, zeta: UnitVector, xi: UnitVector):
        return sphere_log(zeta, xi)

    def transport(self, xi, mu):
        return np.array(_sphere_transport(_unit(xi), float(mu[0]), float(mu[1]))[0])

    def transport_generator(self, xi, mu, ts):
        # Levi-Civita transport of the round sphere in R^3: dV/dt = -(V . gamma') gamma.
        w = sphere_basis(xi.v) @ mu
        theta = float(np.linalg.norm(w))
        if theta == 0.0:
            return np.zeros((len(ts), 3, 3))
        t_hat = w / theta
        c, s = np.cos(theta * ts)[:, None], np.sin(theta * ts)[:, None]
        gamma = c * xi.v + s * t_hat
        gamma_dot = theta * (-s * xi.v + c * t_hat)
        return -gamma[:, :, None] * gamma_dot[:, None, :]

    def lift(self, xi):
        return sphere_basis(xi.v)

    def lower(self, zeta):
        return sphere_basis(zeta.v).T

    def __repr__(self) -> str:
        return "Sphere()"


class Product(ChartedManifold):
    """Finite product of charted manifolds with the product connection.

    Chart domains are checked factor by factor; ``injectivity_radius`` is the
    smallest factor radius.
    """

    def __init__(self, factors: Sequence[ChartedManifold]):
        factors = tuple(factors)
        if not factors:
            raise ValueError("a product needs at least one factor")
        self.factors = factors
        self.dims = tuple(f.dim for f in factors)
        self.dim = sum(self.dims)
        self.injectivity_radius = min(f.injectivity_radius for f in factors)
        self._slices = []
        start = 0
        for d in self.dims:
            self._slices.append(slice(start, start + d))
            start += d

    def split(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {u.shape}")
        return [u[s] for s in self._slices]

    def _parts(self, xi):
        if len(xi) != len(self.factors):
            raise ValueError(f"expected {len(self.factors)} parts, got {len(xi)}")
        return xi.parts if isinstance(xi, ProductPoint) else tuple(xi)

    def check_coords(self, u, inclusive: bool = False) -> None:
        for f, part in zip(self.factors, self.split(u)):
            f.check_coords(part, inclusive)

    def check_point(self, xi) -> None:
        for f, part in zip(self.factors, self._parts(xi)):
            f.check_point(part)

    def boxplus(self, xi, u):
        parts = self._parts(xi)
        return ProductPoint(f.boxplus(p, v) for f, p, v in zip(self.factors, parts, self.split(u)))

    def exp(self, xi, u):
        parts = self._parts(xi)
        return ProductPoint(f.exp(p, v) for f, p, v in zip(self.factors, parts, self.split(u)))

    def log(self, zeta, xi):
        return np.concatenate(
            [f.log(z, x) for f, z, x in zip(self.factors, self._parts(zeta), self._parts(xi))]
        )

    def transport(self, xi, mu):
        parts = self._parts(xi)
        return _block_diag(
            [f.transport(p, v) for f, p, v in zip(self.factors, parts, self.split(mu))]
        )

    def transport_generator(self, xi, mu, ts):
        blocks = [
            f.transport_generator(p, v, ts)
            for f, p, v in zip(self.factors, self._parts(xi), self.split(mu))
        ]
        size = sum(b.shape[-1] for b in blocks)
        out = np.zeros((len(ts), size, size))
        start = 0
        for b in blocks:
            d = b.shape[-1]
            out[:, start : start + d, start : start + d] = b
            start += d
        return out

    def lift(self, xi):
        return _block_diag([f.lift(p) for f, p in zip(self.factors, self._parts(xi))])

    def lower(self, zeta):
        return _block_diag([f.lower(p) for f, p in zip(self.factors, self._parts(zeta))])

    def __repr__(self) -> str:
        return f"Product({list(self.factors)!r})"


def _block_diag(blocks) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def product_manifold(factors: Sequence[ChartedManifold]) -> Product:
    return Product(factors)
