"""Error-state EKF over charted manifolds.

The filter state is a :class:`ConcentratedGaussian`: a base point, a mean
vector and a covariance, both in normal coordinates at the base point. One
filter cycle is ``predict -> update -> reset``; every step is a pure function
returning a new state.

The update can transport the measurement covariance from an approximation
of the true output to the predicted output before forming the gain
(:class:`UpdateVariant`), and the reset can transport the posterior
covariance along the geodesic traced by the mean correction.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np

from .exceptions import NotSPDError, SingularInnovationError
from .geometry import ChartedManifold, cholesky_spd, fd_jacobian, symmetrize
from .manifolds import Euclidean

logger = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-12

MatrixOrFn = Union[np.ndarray, Callable[[Any], np.ndarray]]


def regularize(cov: np.ndarray) -> np.ndarray:
    """Symmetrize ``cov``; floor its eigenvalues only if factorization fails."""
    cov = symmetrize(cov)
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(cov)
    logger.warning(
        "covariance lost positive-definiteness (min eigenvalue %.3e); flooring at %.0e",
        vals.min(),
        EIGEN_FLOOR,
    )
    vals = np.maximum(vals, EIGEN_FLOOR)
    return symmetrize((vecs * vals) @ vecs.T)


@dataclass(frozen=True)
class ConcentratedGaussian:
    """Gaussian in normal coordinates at ``base`` on ``manifold``."""

    manifold: ChartedManifold
    base: Any
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = self.manifold.dim
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (m,) or cov.shape != (m, m):
            raise ValueError(
                f"mean/cov shapes {mean.shape}/{cov.shape} do not match dimension {m}"
            )
        if not np.array_equal(cov, cov.T) and np.max(np.abs(cov - cov.T)) > 1e-12 * max(
            1.0, np.max(np.abs(cov))
        ):
            raise NotSPDError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def centered(cls, manifold: ChartedManifold, base: Any, cov) -> "ConcentratedGaussian":
        cov = np.asarray(cov, dtype=float)
        cholesky_spd(cov)
        return cls(manifold, base, np.zeros(manifold.dim), cov)

    def sample(self, rng: np.random.Generator):
        """Draw a point ``base [+] (mean + noise)``."""
        eps = rng.multivariate_normal(self.mean, self.cov)
        return self.manifold.boxplus(self.base, eps)


@dataclass
class SystemModel:
    """Dynamics ``xi+ = F(xi, u) [+] kappa`` with ``kappa ~ N(0, R)``.

    ``R = process_cov + B input_cov B^T`` with ``B`` the input Jacobian.
    ``state_jacobian(xi, u)`` and ``input_jacobian(xi, u)`` are optional
    analytic providers; without them central finite differences are used.
    """

    manifold: ChartedManifold
    F: Callable[[Any, np.ndarray], Any]
    input_cov: np.ndarray
    process_cov: np.ndarray
    state_jacobian: Optional[Callable[[Any, np.ndarray], np.ndarray]] = None
    input_jacobian: Optional[Callable[[Any, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.input_cov = np.atleast_2d(np.asarray(self.input_cov, dtype=float))
        self.process_cov = np.atleast_2d(np.asarray(self.process_cov, dtype=float))
        m = self.manifold.dim
        if self.process_cov.shape != (m, m):
            raise ValueError(f"process_cov must be {m}x{m}")
        for name in ("input_cov", "process_cov"):
            mat = getattr(self, name)
            if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if mat.size and np.linalg.eigvalsh(mat).min() < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")


@dataclass
class MeasurementModel:
    """Output ``y = h(xi) [+] nu`` with ``nu ~ N(0, Q)`` on ``output_manifold``.

    ``meas_cov`` is either a fixed matrix or a function of the output point
    at which the noise is anchored, returning Q in the chart there.
    """

    state_manifold: ChartedManifold
    output_manifold: ChartedManifold
    h: Callable[[Any], Any]
    meas_cov: MatrixOrFn
    output_jacobian: Optional[Callable[[Any], np.ndarray]] = None

    def __post_init__(self):
        if not callable(self.meas_cov):
            q = np.asarray(self.meas_cov, dtype=float)
            n = self.output_manifold.dim
            if q.shape != (n, n):
                raise ValueError(f"meas_cov must be {n}x{n}")
            cholesky_spd(q)
            self.meas_cov = q

    def cov_at(self, y: Any) -> np.ndarray:
        if callable(self.meas_cov):
            return np.asarray(self.meas_cov(y), dtype=float)
        return self.meas_cov


class UpdateKind(enum.Enum):
    BASELINE = "baseline"
    TRUE_OUTPUT = "true_output"
    MEASUREMENT = "measurement"
    NAIVE_POSTERIOR = "naive_posterior"
    ITERATED = "iterated"


@dataclass(frozen=True)
class UpdateVariant:
    """Choice of measurement-covariance anchor and reset style.

    Build instances with the classmethods. ``true_output`` needs the true
    state at every update and is only meaningful in simulation, so it must
    be requested with ``diagnostics=True``.
    """

    kind: UpdateKind
    iterations: int = 0
    geometric_reset: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iteration count must be non-negative")
        if self.kind is not UpdateKind.ITERATED and self.iterations:
            raise ValueError("only the iterated update takes an iteration count")

    @classmethod
    def baseline(cls, geometric_reset: bool = False) -> "UpdateVariant":
        return cls(UpdateKind.BASELINE, 0, geometric_reset)

    @classmethod
    def true_output(cls, geometric_reset: bool = True, *, diagnostics: bool = False):
        if not diagnostics:
            raise ValueError(
                "the true-output update needs the true state; pass diagnostics=True "
                "to use it in simulation"
            )
        return cls(UpdateKind.TRUE_OUTPUT, 0, geometric_reset)

    @classmethod
    def measurement(cls, geometric_reset: bool = True) -> "UpdateVariant":
        return cls(UpdateKind.MEASUREMENT, 0, geometric_reset)

    @classmethod
    def naive_posterior(cls, geometric_reset: bool = True) -> "UpdateVariant":
        return cls(UpdateKind.NAIVE_POSTERIOR, 0, geometric_reset)

    @classmethod
    def iterated(cls, n: int, geometric_reset: bool = True) -> "UpdateVariant":
        return cls(UpdateKind.ITERATED, int(n), geometric_reset)

    @property
    def label(self) -> str:
        if self.kind is UpdateKind.ITERATED:
            name = f"iterated_{self.iterations}"
        else:
            name = self.kind.value
        default_reset = self.kind is not UpdateKind.BASELINE
        if self.geometric_reset != default_reset:
            name += "+reset" if self.geometric_reset else "-reset"
        return name


def _input_jacobian(sys: SystemModel, xi: Any, u: np.ndarray) -> np.ndarray:
    if sys.input_jacobian is not None:
        return np.asarray(sys.input_jacobian(xi, u), dtype=float)
    inputs = Euclidean(len(u))
    return fd_jacobian(lambda v: sys.F(xi, v), u, inputs, sys.manifold, central=True)


def combine_noise(sys: SystemModel, xi: Any, u) -> np.ndarray:
    """Total process covariance ``R = R^P + B R^I B^T`` at ``(xi, u)``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.any(sys.input_cov):
        return sys.process_cov.copy()
    b = _input_jacobian(sys, xi, u)
    return symmetrize(sys.process_cov + b @ sys.input_cov @ b.T)


def state_matrix(sys: SystemModel, xi: Any, u) -> np.ndarray:
    """Linearized error dynamics ``A`` between the charts at ``xi`` and ``F(xi, u)``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if sys.state_jacobian is not None:
        return np.asarray(sys.state_jacobian(xi, u), dtype=float)
    return fd_jacobian(lambda x: sys.F(x, u), xi, sys.manifold, sys.manifold, central=True)


def _require_reset(state: ConcentratedGaussian) -> None:
    if np.any(state.mean):
        raise ValueError("state has a non-zero mean; apply reset() first")


def predict(state: ConcentratedGaussian, sys: SystemModel, u) -> ConcentratedGaussian:
    """Propagate the base point through ``F`` and the covariance through ``A``."""
    _require_reset(state)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    a = state_matrix(sys, state.base, u)
    r = combine_noise(sys, state.base, u)
    cov = regularize(a @ state.cov @ a.T + r)
    return ConcentratedGaussian(state.manifold, sys.F(state.base, u), state.mean, cov)


def innovation(meas: MeasurementModel, xi: Any, y: Any) -> np.ndarray:
    """``y [-] h(xi)`` in the output chart at the predicted output."""
    return meas.output_manifold.boxminus(y, meas.h(xi))


def output_matrix(meas: MeasurementModel, xi: Any) -> np.ndarray:
    """Linearized output map ``C`` from the chart at ``xi`` to the chart at ``h(xi)``."""
    if meas.output_jacobian is not None:
        return np.asarray(meas.output_jacobian(xi), dtype=float)
    return fd_jacobian(meas.h, xi, meas.state_manifold, meas.output_manifold, central=True)


def transported_Q(meas: MeasurementModel, anchor: Any, y_hat: Any) -> np.ndarray:
    """Measurement covariance anchored at ``anchor``, transported to ``y_hat``.

    Transport follows the output geodesic ``anchor [+] t (y_hat [-] anchor)``.
    """
    out = meas.output_manifold
    q = meas.cov_at(anchor)
    direction = out.boxminus(y_hat, anchor)
    if not np.any(direction):
        return q.copy()
    out.check_coords(direction, inclusive=True)
    p = out.transport(anchor, direction)
    return symmetrize(p @ q @ p.T)


def kalman_gain(cov: np.ndarray, c: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``K = cov C^T (C cov C^T + Q)^-1`` through a Cholesky factor of the innovation covariance."""
    s = symmetrize(c @ cov @ c.T + q)
    try:
        factor = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError("innovation covariance is not positive-definite") from exc
    # NaN pivots fail the comparison too
    if not np.diagonal(factor).min() > 1e-150:
        raise SingularInnovationError("innovation covariance is singular")
    inv_factor = np.linalg.inv(factor)
    return (cov @ c.T) @ (inv_factor.T @ inv_factor)


@dataclass(frozen=True)
class UpdateResult:
    """Posterior before reset, plus the quantities used to form it."""

    state: ConcentratedGaussian
    gain: np.ndarray
    output_matrix: np.ndarray
    innovation: np.ndarray
    meas_cov: np.ndarray


def update_details(
    state: ConcentratedGaussian,
    meas: MeasurementModel,
    y: Any,
    variant: UpdateVariant,
    truth: Any = None,
) -> UpdateResult:
    """As :func:`update`, also returning gain, ``C``, innovation and the Q used."""
    _require_reset(state)
    kind = variant.kind
    if (kind is UpdateKind.TRUE_OUTPUT) != (truth is not None):
        raise ValueError("truth must be given exactly when the variant is true_output")
    manifold = state.manifold
    xi_hat = state.base
    cov = state.cov
    y_hat = meas.h(xi_hat)
    y_tilde = meas.output_manifold.boxminus(y, y_hat)
    c = output_matrix(meas, xi_hat)

    if kind is UpdateKind.BASELINE:
        q = meas.cov_at(y_hat)
    elif kind is UpdateKind.TRUE_OUTPUT:
        q = transported_Q(meas, meas.h(truth), y_hat)
    elif kind is UpdateKind.MEASUREMENT:
        q = transported_Q(meas, y, y_hat)
    else:
        n_iter = 1 if kind is UpdateKind.NAIVE_POSTERIOR else variant.iterations
        q = meas.cov_at(y_hat)
        for _ in range(n_iter):
            k = kalman_gain(cov, c, q)
            # Only the output at the trial posterior is needed, so the raw
            # geodesic endpoint is used even past the chart boundary.
            xi_post = manifold.exp(xi_hat, k @ y_tilde)
            q = transported_Q(meas, meas.h(xi_post), y_hat)

    k = kalman_gain(cov, c, q)
    mean = k @ y_tilde
    cov_post = regularize((np.eye(manifold.dim) - k @ c) @ cov)
    posterior = ConcentratedGaussian(manifold, xi_hat, mean, cov_post)
    return UpdateResult(posterior, k, c, y_tilde, q)


def update(
    state: ConcentratedGaussian,
    meas: MeasurementModel,
    y: Any,
    variant: UpdateVariant = UpdateVariant.baseline(),
    truth: Any = None,
) -> ConcentratedGaussian:
    """Kalman update at the predicted base point.

    Returns the posterior with a generally non-zero mean, still expressed at
    the prior base point; call :func:`reset` to recentre it.
    """
    return update_details(state, meas, y, variant, truth).state


def reset(state: ConcentratedGaussian, geometric: bool) -> ConcentratedGaussian:
    """Move the base point to ``base [+] mean`` and zero the mean.

    With ``geometric`` the covariance is parallel transported along the
    geodesic ``base [+] t mean``; otherwise it is carried over unchanged.
    """
    manifold = state.manifold
    mean = state.mean
    if not np.any(mean):
        return state
    new_base = manifold.boxplus(state.base, mean)
    cov = state.cov
    if geometric:
        p = manifold.transport(state.base, mean)
        cov = p @ cov @ p.T
    cov = regularize(cov)
    return ConcentratedGaussian(manifold, new_base, np.zeros(manifold.dim), cov)


def filter_energy(state: ConcentratedGaussian, truth: Any) -> float:
    """Normalized estimation error squared, ``eps^T cov^-1 eps / m``."""
    _require_reset(state)
    eps = state.manifold.boxminus(truth, state.base)
    try:
        factor = np.linalg.cholesky(state.cov)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("covariance is not positive-definite") from exc
    z = np.linalg.solve(factor, eps)
    return float(z @ z) / state.manifold.dim


@dataclass
class ManifoldEKF:
    """Convenience wrapper running predict/update/reset cycles.

    Holds the models and the variant; :meth:`step` is a pure function of the
    state it is given.
    """

    system: SystemModel
    measurement: MeasurementModel
    variant: UpdateVariant = field(default_factory=UpdateVariant.baseline)

    def step(self, state: ConcentratedGaussian, u, y, truth: Any = None) -> ConcentratedGaussian:
        prior = predict(state, self.system, u)
        truth = truth if self.variant.kind is UpdateKind.TRUE_OUTPUT else None
        posterior = update(prior, self.measurement, y, self.variant, truth)
        return reset(posterior, self.variant.geometric_reset)
