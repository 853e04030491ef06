"""Attitude estimation from a gyroscope and two known directions.

The scenario integrates ``R_{k+1} = R_k exp(omega(t_k)^ dt)`` from the
identity, feeds the filter noisy gyroscope samples as input and the body-frame
directions ``(R^T d1, R^T d2)`` on ``S^2 x S^2`` as output, and records the
attitude error and filter energy at every step.

Random streams
--------------
Each Monte Carlo run ``i`` owns the generator
``default_rng(SeedSequence(seed, spawn_key=(i,)))``. A run draws, in order,
the initial estimate (3 standard normals) followed by one row of 9 standard
normals per time step (3 gyroscope, 3 + 3 direction noise). Row ``k`` is the
same whatever the scenario duration, so shorter runs are prefixes of longer
ones. All variants of a run consume the same realization.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

from .exceptions import ChartDomainError, NotSPDError, SingularInnovationError
from .filter import (
    ConcentratedGaussian,
    MeasurementModel,
    SystemModel,
    UpdateKind,
    UpdateVariant,
    filter_energy,
    predict,
    reset,
    update,
)
from .manifolds import (
    SO3,
    Product,
    ProductPoint,
    Rotation,
    Sphere,
    UnitVector,
    _block_diag,
    hat,
    so3_exp,
    so3_right_jacobian,
    sphere_basis,
    sphere_exp,
)

logger = logging.getLogger(__name__)

TRANSIENT_END = 5.0
THREADS_ENV = "MANIFOLD_EKF_THREADS"


@dataclass(frozen=True)
class OscillatoryOmega:
    """Body rate ``a (cos t, sin t, sin t)`` in rad/s."""

    amplitude: float = 0.1

    def __call__(self, t: float) -> np.ndarray:
        a = self.amplitude
        return np.array([a * math.cos(t), a * math.sin(t), a * math.sin(t)])


@dataclass(frozen=True)
class ConstantOmega:
    omega: tuple = (0.0, 0.0, 0.0)

    def __call__(self, t: float) -> np.ndarray:
        return np.array(self.omega, dtype=float)


def _psd(mat, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (3, 3) or not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} must be a finite 3x3 matrix")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.any(np.diag(mat) < 0) or np.linalg.eigvalsh(mat).min() < -1e-12:
        raise ValueError(f"{name} must be positive semi-definite")
    return mat


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Simulation constants; defaults reproduce the two-direction experiment."""

    dt: float = 0.02
    duration: float = 30.0
    omega_profile: object = field(default_factory=OscillatoryOmega)
    gyro_var: float = 0.02
    meas_cov_ambient: np.ndarray = field(default_factory=lambda: np.diag([0.01, 0.03, 0.05]))
    d1: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    d2: np.ndarray = field(
        default_factory=lambda: np.array([1 / math.sqrt(2), 0.0, 1 / math.sqrt(2)])
    )
    init_cov: np.ndarray = field(default_factory=lambda: 1.5**2 * np.eye(3))
    seed: int = 0
    process_floor: float = 1e-12

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not (self.duration >= 0 and math.isfinite(self.duration)):
            raise ValueError("duration must be non-negative")
        if not self.gyro_var >= 0:
            raise ValueError("gyro_var must be non-negative")
        if not self.process_floor >= 0:
            raise ValueError("process_floor must be non-negative")
        object.__setattr__(self, "meas_cov_ambient", _psd(self.meas_cov_ambient, "meas_cov_ambient"))
        object.__setattr__(self, "init_cov", _psd(self.init_cov, "init_cov"))
        for name in ("d1", "d2"):
            d = np.asarray(getattr(self, name), dtype=float)
            UnitVector(d)
            object.__setattr__(self, name, d)
        if np.linalg.norm(np.cross(self.d1, self.d2)) < 1e-9:
            raise ValueError("d1 and d2 must not be parallel")
        if not callable(self.omega_profile):
            raise ValueError("omega_profile must be callable")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


class TruthSample(NamedTuple):
    t: float
    rotation: Rotation
    omega: np.ndarray


class SensorSample(NamedTuple):
    omega_meas: np.ndarray
    y1: UnitVector
    y2: UnitVector

    @property
    def output(self) -> ProductPoint:
        return ProductPoint((self.y1, self.y2))


@dataclass(frozen=True)
class SimRecord:
    t: float
    attitude_error: float
    energy: float
    variant: str
    run_id: int


@dataclass(frozen=True)
class RunData:
    truth: List[TruthSample]
    sensors: List[SensorSample]
    initial_estimate: Rotation


@dataclass(frozen=True)
class RunResult:
    """Per-step errors and energies of one filter run.

    ``failure`` holds the error message when the run stopped early; the
    arrays then only cover the steps completed before it.
    """

    variant: str
    run_id: int
    times: np.ndarray
    errors: np.ndarray
    energies: np.ndarray
    failure: Optional[str] = None

    def records(self) -> Iterator[SimRecord]:
        for t, e, en in zip(self.times, self.errors, self.energies):
            yield SimRecord(float(t), float(e), float(en), self.variant, self.run_id)


def _nanmean(a, axis=None):
    # runs that stopped early leave NaN padding; an all-NaN slice gives NaN
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(a, axis=axis)


def run_rng(seed: int, run_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run_id,)))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_truth(cfg: ScenarioConfig) -> List[TruthSample]:
    """Euler-integrated trajectory from the identity, re-orthonormalized each step."""
    rot = Rotation.identity()
    out = []
    for k in range(cfg.n_steps + 1):
        t = k * cfg.dt
        omega = np.asarray(cfg.omega_profile(t), dtype=float)
        out.append(TruthSample(t, rot, omega))
        rot = (rot @ so3_exp(omega * cfg.dt)).orthonormalized()
    return out


def simulate_sensors(
    truth: Sequence[TruthSample], cfg: ScenarioConfig, rng: np.random.Generator
) -> List[SensorSample]:
    """Noisy gyroscope and direction samples, one per truth sample.

    ``omega_meas`` at index ``k`` drives the step ``k -> k+1``; the directions
    at index ``k`` are measured at ``R_k``. Direction noise is an ambient
    Gaussian projected onto the tangent plane of the true direction.
    """
    z = rng.standard_normal((len(truth), 9))
    gyro_sd = math.sqrt(cfg.gyro_var)
    meas_sqrt = _sqrt_psd(cfg.meas_cov_ambient)
    out = []
    for sample, row in zip(truth, z):
        omega_meas = sample.omega + gyro_sd * row[:3]
        ys = []
        for d, noise in ((cfg.d1, row[3:6]), (cfg.d2, row[6:9])):
            p = UnitVector(sample.rotation.mat.T @ d, check=False)
            nu = meas_sqrt @ noise
            ys.append(sphere_exp(p, sphere_basis(p.v).T @ nu))
        out.append(SensorSample(omega_meas, ys[0], ys[1]))
    return out


def generate_run(cfg: ScenarioConfig, rng: np.random.Generator) -> RunData:
    init = _sqrt_psd(cfg.init_cov) @ rng.standard_normal(3)
    truth = simulate_truth(cfg)
    sensors = simulate_sensors(truth, cfg, rng)
    return RunData(truth, sensors, Rotation.identity() @ so3_exp(init))


def attitude_models(cfg: ScenarioConfig) -> tuple:
    """System and measurement models with analytic Jacobians.

    ``A = exp(-omega dt)`` and ``B = dt J_r(omega dt)`` in body coordinates;
    each output block of ``C`` is ``B_p^T hat(p)`` with ``p = R^T d``.
    The direction covariance is the ambient covariance projected onto the
    tangent plane at the output point where the noise is anchored.
    """
    so3 = SO3()
    out = Product([Sphere(), Sphere()])
    dt = cfg.dt
    d1, d2 = cfg.d1, cfg.d2
    ambient = cfg.meas_cov_ambient

    def F(rot, omega):
        return so3.exp(rot, omega * dt)

    def A(rot, omega):
        return so3_exp(-omega * dt).mat

    def B(rot, omega):
        return dt * so3_right_jacobian(omega * dt)

    def h(rot):
        m = rot.mat.T
        return ProductPoint((UnitVector(m @ d1, check=False), UnitVector(m @ d2, check=False)))

    def C(rot):
        m = rot.mat.T
        rows = []
        for d in (d1, d2):
            p = m @ d
            rows.append(sphere_basis(p).T @ hat(p))
        return np.vstack(rows)

    def Q(y):
        blocks = []
        for part in y.parts:
            b = sphere_basis(part.v)
            q = b.T @ ambient @ b
            blocks.append(0.5 * (q + q.T))
        return _block_diag(blocks)

    system = SystemModel(
        so3,
        F,
        input_cov=cfg.gyro_var * np.eye(3),
        process_cov=cfg.process_floor * np.eye(3),
        state_jacobian=A,
        input_jacobian=B,
    )
    meas = MeasurementModel(so3, out, h, Q, output_jacobian=C)
    return system, meas


def finite_difference_models(cfg: ScenarioConfig) -> tuple:
    """The same models with every Jacobian left to finite differences."""
    system, meas = attitude_models(cfg)
    system.state_jacobian = None
    system.input_jacobian = None
    meas.output_jacobian = None
    return system, meas


_FAILURES = (ChartDomainError, SingularInnovationError, NotSPDError)


def filter_run(
    data: RunData,
    variant: UpdateVariant,
    cfg: ScenarioConfig,
    run_id: int = 0,
    models: Optional[tuple] = None,
) -> RunResult:
    """Run one filter over prepared data, recording error and energy per step."""
    system, meas = models if models is not None else attitude_models(cfg)
    state = ConcentratedGaussian.centered(system.manifold, data.initial_estimate, cfg.init_cov)
    n = len(data.truth)
    times = np.array([s.t for s in data.truth])
    errors = np.full(n, np.nan)
    energies = np.full(n, np.nan)
    use_truth = variant.kind is UpdateKind.TRUE_OUTPUT
    failure = None
    k = 0
    try:
        for k in range(n):
            truth = data.truth[k].rotation
            if k > 0:
                prior = predict(state, system, data.sensors[k - 1].omega_meas)
                posterior = update(
                    prior, meas, data.sensors[k].output, variant, truth if use_truth else None
                )
                state = reset(posterior, variant.geometric_reset)
            errors[k] = (state.base.inverse() @ truth).angle()
            energies[k] = filter_energy(state, truth)
        k = n
    except _FAILURES as exc:
        failure = f"step {k} (t={times[k]:.4g}): {type(exc).__name__}: {exc}"
        logger.warning("run %d variant %s stopped at %s", run_id, variant.label, failure)
    return RunResult(variant.label, run_id, times[:k], errors[:k], energies[:k], failure)


def run_filter(
    cfg: ScenarioConfig, variant: UpdateVariant, rng: np.random.Generator, run_id: int = 0
) -> RunResult:
    """Simulate one realization from ``rng`` and filter it with ``variant``."""
    return filter_run(generate_run(cfg, rng), variant, cfg, run_id)


def _paired_runs(args) -> List[RunResult]:
    cfg, variants, run_id = args
    data = generate_run(cfg, run_rng(cfg.seed, run_id))
    models = attitude_models(cfg)
    return [filter_run(data, v, cfg, run_id, models) for v in variants]


def worker_count(requested: Optional[int] = None) -> int:
    """Number of worker processes; ``MANIFOLD_EKF_THREADS`` caps it (0 = auto)."""
    if requested is None:
        try:
            requested = int(os.environ.get(THREADS_ENV, "0"))
        except ValueError:
            requested = 0
    if requested <= 0:
        requested = os.cpu_count() or 1
    return max(1, requested)


@dataclass
class MonteCarloResult:
    """Paired runs of several variants; arrays are ``(runs, steps)``, NaN-padded."""

    variants: List[UpdateVariant]
    times: np.ndarray
    errors: List[np.ndarray]
    energies: List[np.ndarray]
    failures: List[List[str]]
    runs: List[List[RunResult]]

    @property
    def labels(self) -> List[str]:
        return [v.label for v in self.variants]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def mean_error(self, i: int) -> np.ndarray:
        return _nanmean(self.errors[i], axis=0)

    def median_error(self, i: int) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmedian(self.errors[i], axis=0)

    def mean_energy(self, i: int) -> np.ndarray:
        return _nanmean(self.energies[i], axis=0)

    def transient_error(self, i: int, t_end: float = TRANSIENT_END) -> np.ndarray:
        """Per-run mean attitude error over ``t <= t_end``."""
        mask = self.times <= t_end + 1e-9
        return _nanmean(self.errors[i][:, mask], axis=1)

    def steady_error(self, i: int) -> np.ndarray:
        """Per-run mean attitude error over the last third of the run."""
        mask = self.times >= self.times[-1] * 2.0 / 3.0 - 1e-9
        return _nanmean(self.errors[i][:, mask], axis=1)

    def records(self) -> Iterator[SimRecord]:
        for per_variant in zip(*self.runs):
            for result in per_variant:
                yield from result.records()


def monte_carlo(
    cfg: ScenarioConfig,
    variants: Sequence[UpdateVariant],
    runs: int,
    workers: Optional[int] = None,
) -> MonteCarloResult:
    """Paired Monte Carlo batch: every variant sees the same run realizations."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    variants = list(variants)
    jobs = [(cfg, variants, i) for i in range(runs)]
    n_workers = min(worker_count(workers), runs)
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            per_run = list(pool.map(_paired_runs, jobs))
    else:
        per_run = [_paired_runs(job) for job in jobs]

    times = cfg.times()
    errors, energies, failures = [], [], []
    for j in range(len(variants)):
        err = np.full((runs, len(times)), np.nan)
        en = np.full((runs, len(times)), np.nan)
        fails = []
        for i, results in enumerate(per_run):
            r = results[j]
            err[i, : len(r.errors)] = r.errors
            en[i, : len(r.energies)] = r.energies
            if r.failure is not None:
                fails.append(f"run {i}: {r.failure}")
        errors.append(err)
        energies.append(en)
        failures.append(fails)
    return MonteCarloResult(variants, times, errors, energies, failures, per_run)


def summarize(result: MonteCarloResult) -> List[dict]:
    """Per-variant transient/steady-state errors, mean energy and failure count."""
    rows = []
    for i, variant in enumerate(result.variants):
        rows.append(
            {
                "variant": variant.label,
                "transient_error": float(_nanmean(result.transient_error(i))),
                "steady_error": float(_nanmean(result.steady_error(i))),
                "mean_energy": float(_nanmean(result.energies[i])),
                "failures": len(result.failures[i]),
            }
        )
    return rows
