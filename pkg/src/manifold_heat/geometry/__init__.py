from .base import GeodesicPath, ManifoldModel, TangentVector, WeightPotential
from .models import (CustomChart, Euclidean, HyperbolicHalfPlane, ProfileModel,
                     PsiFunction, Sphere, builtin_model, radial_ricci_model)
from .ops import (christoffel_at, distance, exp_map, geodesic_connect,
                  metric_at, parallel_transport, ricci_at, tangent_norm)

__all__ = [
    "GeodesicPath", "ManifoldModel", "TangentVector", "WeightPotential",
    "CustomChart", "Euclidean", "HyperbolicHalfPlane", "ProfileModel",
    "PsiFunction", "Sphere", "builtin_model", "radial_ricci_model",
    "christoffel_at", "distance", "exp_map", "geodesic_connect", "metric_at",
    "parallel_transport", "ricci_at", "tangent_norm",
]
