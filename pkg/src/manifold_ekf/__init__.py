"""Error-state extended Kalman filtering on manifolds with affine connections.

Modules:

* :mod:`~manifold_ekf.geometry`: charted-manifold interface, transport and
  finite-difference tools.
* :mod:`~manifold_ekf.manifolds`: R^n, SO(3), S^2 and products.
* :mod:`~manifold_ekf.filter`: predict/update/reset with geometric update variants.
* :mod:`~manifold_ekf.attitude`: the two-direction attitude simulation.
* :mod:`~manifold_ekf.cli`: command-line entry point.
"""

from .exceptions import (
    ChartDomainError,
    ConfigError,
    ManifoldEKFError,
    NotSPDError,
    SingularInnovationError,
    StepSizeError,
)
from .filter import (
    ConcentratedGaussian,
    ManifoldEKF,
    MeasurementModel,
    SystemModel,
    UpdateKind,
    UpdateVariant,
    combine_noise,
    filter_energy,
    innovation,
    output_matrix,
    predict,
    reset,
    transported_Q,
    update,
)
from .geometry import (
    ChartedManifold,
    TangentCoords,
    TransportMatrix,
    boxminus,
    boxplus,
    fd_jacobian,
    ode_transport_oracle,
    transport_along_geodesic,
    transport_covariance,
)
from .manifolds import (
    SO3,
    Euclidean,
    Product,
    ProductPoint,
    Rotation,
    Sphere,
    UnitVector,
    product_manifold,
    so3_exp,
    so3_log,
    so3_transport,
    sphere_exp,
    sphere_log,
    sphere_transport,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
