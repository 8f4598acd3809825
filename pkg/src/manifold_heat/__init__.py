"""Monte Carlo toolkit for heat semigroups and curvature diagnostics on
chart-described Riemannian manifolds."""

from . import errors, geometry

__version__ = "0.1.0"

__all__ = ["errors", "geometry", "__version__"]
