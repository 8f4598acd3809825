"""Point-level geometry operations.

Thin wrappers around the model methods with chart-domain validation, plus the
transport integrator for deterministic paths.  Batched evaluation goes through
the model methods directly; these entry points are for single points.
"""

import numpy as np

from .. import numutils as nu
from ..errors import DomainError
from .base import GeodesicPath, ManifoldModel, TangentVector


def _require_in_chart(model: ManifoldModel, x) -> np.ndarray:
    x = np.asarray(x, float)
    if x.shape[-1] != model.dim:
        raise DomainError(f"point has dimension {x.shape[-1]}, expected {model.dim}")
    if not np.all(model.in_chart(np.atleast_2d(x))):
        raise DomainError(f"point {x!r} outside chart of kind={model.kind!r}")
    return x


def metric_at(model: ManifoldModel, x) -> np.ndarray:
    """Metric matrix at a chart point."""
    return model.metric(_require_in_chart(model, x))


def christoffel_at(model: ManifoldModel, x) -> np.ndarray:
    """Christoffel symbols Gamma^k_{ij} at a chart point, indexed [k, i, j]."""
    return model.christoffel(_require_in_chart(model, x))


def ricci_at(model: ManifoldModel, x, weighted: bool | None = None) -> np.ndarray:
    """Ricci matrix at a chart point.

    ``weighted=None`` picks the weighted tensor exactly when the model
    carries a weight potential.
    """
    x = _require_in_chart(model, x)
    if weighted is None:
        weighted = model.weight is not None
    return model.weighted_ricci(x) if weighted else model.ricci(x)


def exp_map(model: ManifoldModel, x, v) -> np.ndarray:
    """Endpoint of the unit-time geodesic from x with initial velocity v."""
    x = _require_in_chart(model, x)
    v = v.components if isinstance(v, TangentVector) else np.asarray(v, float)
    return model.exp(x, v)


def geodesic_connect(model: ManifoldModel, u, v, n: int = 129) -> GeodesicPath:
    """Minimizing geodesic path from u to v on a parameter grid."""
    u = _require_in_chart(model, u)
    v = _require_in_chart(model, v)
    return model.geodesic(u, v, n=n)


def distance(model: ManifoldModel, u, v) -> float:
    """Riemannian distance between two chart points."""
    u = _require_in_chart(model, u)
    v = _require_in_chart(model, v)
    return float(model.distance(u, v))


def parallel_transport(model: ManifoldModel, path: GeodesicPath,
                       v) -> TangentVector:
    """Transport a tangent vector along a path by the transport equation.

    Integrates dv^k/dr = -Gamma^k_{ij} vel^i v^j with RK4 on the parameter
    grid, evaluating the path at the substep midpoints.
    """
    comps = v.components if isinstance(v, TangentVector) else np.asarray(v, float)
    base = v.base if isinstance(v, TangentVector) else path.points[0]
    if not np.allclose(np.asarray(base, float), path.points[0], atol=1e-9):
        raise DomainError("vector must be based at the path start")
    w = np.asarray(comps, float).copy()
    params = path.params
    for i in range(len(params) - 1):
        h = params[i + 1] - params[i]
        mid = 0.5 * (params[i] + params[i + 1])
        p0, vel0 = path.at(params[i])
        pm, velm = path.at(mid)
        p1, vel1 = path.at(params[i + 1])
        p0, vel0 = p0[0], vel0[0]
        pm, velm = pm[0], velm[0]
        p1, vel1 = p1[0], vel1[0]

        def rhs(point, vel, vec):
            gam = model.christoffel(point)
            return -np.einsum("kij,i,j->k", gam, vel, vec)

        k1 = rhs(p0, vel0, w)
        k2 = rhs(pm, velm, w + 0.5 * h * k1)
        k3 = rhs(pm, velm, w + 0.5 * h * k2)
        k4 = rhs(p1, vel1, w + h * k3)
        w = w + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return TangentVector(base=path.points[-1].copy(), components=w)


def tangent_norm(model: ManifoldModel, x, v) -> float:
    """g-norm of a chart tangent vector."""
    x = _require_in_chart(model, x)
    return float(np.sqrt(nu.quadratic_form(model.metric(x), np.asarray(v, float))))
