"""Exception hierarchy shared across the toolkit."""


class ManifoldHeatError(Exception):
    """Base class for all toolkit errors."""


class DomainError(ManifoldHeatError):
    """A point lies outside the chart domain of a manifold model."""


class ChartExitError(ManifoldHeatError):
    """A deterministic curve (geodesic, stencil) left the chart domain."""


class StencilError(ManifoldHeatError):
    """A finite-difference stencil could not be evaluated inside the chart."""


class CutLocusError(ManifoldHeatError):
    """Endpoints do not admit a unique minimizing geodesic."""


class NoConvergence(ManifoldHeatError):
    """An iterative solver (shooting, bisection) failed to converge."""


class ConfigError(ManifoldHeatError):
    """Invalid simulation or experiment configuration.

    Carries an optional ``line`` attribute when raised by the config parser.
    """

    def __init__(self, reason, line=None):
        self.line = line
        self.reason = reason
        if line is not None:
            super().__init__(f"line {line}: {reason}")
        else:
            super().__init__(reason)


class DeadPathError(ManifoldHeatError):
    """A path sample was queried past its lifetime."""


class ZeroTimeError(ManifoldHeatError):
    """An estimator that requires t > 0 was called with t <= 0."""


class QuadratureError(ManifoldHeatError):
    """A quadrature grid does not cover the required support."""


class InsufficientSamples(ManifoldHeatError):
    """An empirical estimate has no usable samples."""


class EmptyGridError(ManifoldHeatError):
    """All grid points were filtered out by a validity predicate."""
