"""Chart-level differential geometry primitives.

A manifold is described by a single global chart: a coordinate domain, a
metric field, and the objects derived from it (Christoffel symbols, Ricci
curvature, geodesics).  All chart-level evaluations are batched: points are
arrays of shape ``(..., d)`` and tensors gain trailing index axes.

Built-in models override the finite-difference defaults with closed forms;
custom metrics fall back to the stencils implemented here.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import numutils as nu
from ..errors import ChartExitError, DomainError, NoConvergence, StencilError


@dataclass
class WeightPotential:
    """Smooth weight Phi with its coordinate derivatives.

    ``dphi`` returns coordinate partials, ``d2phi`` coordinate second
    partials; the covariant Hessian (which feeds the curvature tensor of the
    weighted model) is assembled by the owning manifold.
    """

    phi: Callable[[np.ndarray], np.ndarray]
    dphi: Callable[[np.ndarray], np.ndarray]
    d2phi: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    @staticmethod
    def quadratic(a: float) -> "WeightPotential":
        """Phi(x) = a |x|^2 / 2 in chart coordinates."""
        return WeightPotential(
            phi=lambda x: 0.5 * a * np.sum(x * x, axis=-1),
            dphi=lambda x: a * np.asarray(x, dtype=float),
            d2phi=lambda x: a * np.broadcast_to(
                np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy(),
            name=f"quadratic({a})",
        )

    @staticmethod
    def radial_table(r_vals, phi_vals) -> "WeightPotential":
        """Phi(|x|) interpolated from a radial table (cubic spline)."""
        from scipy.interpolate import CubicSpline

        spline = CubicSpline(np.asarray(r_vals, float), np.asarray(phi_vals, float))
        d1 = spline.derivative(1)
        d2 = spline.derivative(2)

        def _r(x):
            return np.sqrt(np.sum(x * x, axis=-1))

        def dphi(x):
            x = np.asarray(x, float)
            r = np.maximum(_r(x), 1e-12)
            return d1(r)[..., None] * x / r[..., None]

        def d2phi(x):
            x = np.asarray(x, float)
            d = x.shape[-1]
            r = np.maximum(_r(x), 1e-12)
            u = x / r[..., None]
            uu = u[..., :, None] * u[..., None, :]
            eye = np.broadcast_to(np.eye(d), x.shape + (d,))
            return (d2(r)[..., None, None] * uu
                    + (d1(r) / r)[..., None, None] * (eye - uu))

        return WeightPotential(
            phi=lambda x: spline(_r(np.asarray(x, float))),
            dphi=dphi, d2phi=d2phi, name="radial-table")


@dataclass
class TangentVector:
    """Tangent vector in chart components at a base point."""

    base: np.ndarray
    components: np.ndarray

    def norm(self, model: "ManifoldModel") -> float:
        g = model.metric(np.asarray(self.base, float))
        sq = nu.quadratic_form(g, np.asarray(self.components, float))
        return float(np.sqrt(sq))


@dataclass
class GeodesicPath:
    """A connecting geodesic sampled on a parameter grid over [0, 1]."""

    u: np.ndarray
    v: np.ndarray
    params: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    length: float
    # closed-form models attach an exact evaluator r -> (point, velocity)
    interpolator: Optional[Callable[[np.ndarray], tuple]] = field(
        default=None, repr=False)

    def at(self, r):
        """Point and velocity at parameter values ``r``."""
        r = np.asarray(r, float)
        if self.interpolator is not None:
            return self.interpolator(r)
        pts = np.array([np.interp(r, self.params, self.points[:, i])
                        for i in range(self.points.shape[1])]).T
        vel = np.array([np.interp(r, self.params, self.velocities[:, i])
                        for i in range(self.points.shape[1])]).T
        return pts, vel


class ManifoldModel(ABC):
    """A weighted Riemannian manifold in a single global chart.

    Subclasses provide the metric and, where available, closed forms for the
    derived objects.  ``weight`` is an optional potential turning the model
    into a weighted manifold; ``k_bound`` is the curvature lower-bound
    function used by estimators and coupling checks (defaults to the model's
    exact constant where one exists).
    """

    dim: int
    kind: str

    def __init__(self, dim: int, kind: str,
                 weight: WeightPotential | None = None,
                 k_bound: Callable[[np.ndarray], np.ndarray] | None = None):
        self.dim = dim
        self.kind = kind
        self.weight = weight
        self._k_bound = k_bound

    # -- chart fields -----------------------------------------------------

    @abstractmethod
    def metric(self, x: np.ndarray) -> np.ndarray:
        """Metric matrix g(x), shape (..., d, d)."""

    @abstractmethod
    def in_chart(self, x: np.ndarray) -> np.ndarray:
        """Boolean mask of admitted points."""

    def metric_inv(self, x: np.ndarray) -> np.ndarray:
        return nu.inv(self.metric(x))

    def sqrt_det_g(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(nu.det(self.metric(x)))

    def christoffel(self, x: np.ndarray) -> np.ndarray:
        """Levi-Civita symbols, shape (..., d, d, d) indexed [k, i, j].

        Default: central finite differences of the metric with step
        h = 1e-5 (1 + |x|).
        """
        x = np.asarray(x, float)
        dg = self._metric_partials(x)
        g_inv = self.metric_inv(x)
        # Gamma^k_ij = 1/2 g^{kl} (d_i g_{lj} + d_j g_{li} - d_l g_{ij})
        bracket = (np.moveaxis(dg, -3, -2)          # d_i g_{lj} -> [l, i, j]
                   + np.moveaxis(dg, -3, -1)        # d_j g_{li} -> [l, i, j]
                   - dg)                            # d_l g_{ij}
        return 0.5 * np.einsum("...kl,...lij->...kij", g_inv, bracket)

    def ricci(self, x: np.ndarray) -> np.ndarray:
        """Ricci matrix (lower indices), shape (..., d, d).

        Default: contraction of the curvature of ``christoffel`` with the
        symbol derivatives taken by central differences.
        """
        x = np.asarray(x, float)
        gamma = self.christoffel(x)
        dgamma = self._christoffel_partials(x)
        # Ric_ij = d_k G^k_ij - d_i G^k_kj + G^k_kl G^l_ij - G^k_il G^l_kj
        term1 = np.einsum("...kkij->...ij", dgamma)
        term2 = np.einsum("...ikkj->...ij", dgamma)
        term3 = np.einsum("...kkl,...lij->...ij",
                          gamma, gamma)
        term4 = np.einsum("...kil,...lkj->...ij", gamma, gamma)
        return nu.sym(term1 - term2 + term3 - term4)

    def weighted_ricci(self, x: np.ndarray) -> np.ndarray:
        """Curvature tensor of the weighted model: Ric + 2 Hess Phi."""
        ric = self.ricci(x)
        if self.weight is None:
            return ric
        return ric + 2.0 * self.hess_weight(x)

    def hess_weight(self, x: np.ndarray) -> np.ndarray:
        """Covariant Hessian of the weight potential."""
        if self.weight is None:
            raise DomainError("model carries no weight potential")
        x = np.asarray(x, float)
        d2 = self.weight.d2phi(x)
        d1 = self.weight.dphi(x)
        gamma = self.christoffel(x)
        return d2 - np.einsum("...kij,...k->...ij", gamma, d1)

    def k_bound(self, x: np.ndarray) -> np.ndarray:
        """Ricci lower-bound function k(x) attached to the model."""
        if self._k_bound is not None:
            return np.asarray(self._k_bound(np.asarray(x, float)), float)
        raise DomainError(f"model kind={self.kind!r} has no curvature bound set")

    def set_k_bound(self, k: Callable[[np.ndarray], np.ndarray]) -> None:
        self._k_bound = k

    # -- canonical coordinates and simulation helpers ---------------------

    def diag_sde(self, x: np.ndarray):
        """Closed-form diagonal SDE coefficients, or None.

        Models with diagonal metrics return ``(drift, sig_diag)`` where
        ``drift`` is the Ito drift -1/2 g^{ij} Gamma^k_{ij} (None meaning
        zero) and ``sig_diag`` the diagonal of the noise factor (None meaning
        identity).  The walker falls back to the generic assembly otherwise.
        """
        return None

    def canonical(self, x: np.ndarray, chart_state=None) -> np.ndarray:
        """Coordinates that identify points globally (test functions use
        these).  Chart coordinates by default; embedded models override."""
        return np.asarray(x, float)

    def radial_coordinate(self, x: np.ndarray) -> np.ndarray:
        """Scalar escape coordinate used for the explosion-radius cutoff."""
        x = np.asarray(x, float)
        return np.sqrt(np.sum(x * x, axis=-1))

    def new_chart_state(self, n: int):
        """Per-path chart bookkeeping for an ensemble of ``n`` paths."""
        return None

    def chart_fix(self, x: np.ndarray, frames: np.ndarray | None, chart_state):
        """Normalize chart coordinates after a step (rotations, wraps).

        Returns ``(x, frames, chart_state, exited)`` where ``exited`` marks
        paths that left the chart and could not be repaired.
        """
        return x, frames, chart_state, ~self.in_chart(x)

    def chart_box(self) -> tuple[np.ndarray, np.ndarray]:
        """A safely admitted coordinate box for anchors and grids."""
        raise DomainError(f"no default chart box for kind={self.kind!r}")

    # -- geodesics ---------------------------------------------------------

    def exp(self, x: np.ndarray, v: np.ndarray, steps: int | None = None
            ) -> np.ndarray:
        """Unit-time geodesic flow of (x, v); RK4 on the geodesic equation."""
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        if not bool(np.all(self.in_chart(x[None])[0] if x.ndim == 1
                           else self.in_chart(x))):
            raise DomainError("exp base point outside chart")
        speed = float(np.sqrt(nu.quadratic_form(self.metric(x), v)))
        if speed == 0.0:
            return x.copy()
        if steps is None:
            steps = max(32, int(np.ceil(24 * speed)))
        pos, vel = _integrate_geodesic(self, x, v, steps)
        return pos

    def geodesic(self, u: np.ndarray, v: np.ndarray, n: int = 129
                 ) -> GeodesicPath:
        """Minimizing geodesic from u to v via damped-Newton shooting."""
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        w = self._shoot(u, v)
        params = np.linspace(0.0, 1.0, n)
        pts = np.empty((n, self.dim))
        vels = np.empty((n, self.dim))
        pos, vel = u.copy(), w.copy()
        pts[0], vels[0] = pos, vel
        sub = 4
        for i in range(1, n):
            pos, vel = _integrate_geodesic_step(self, pos, vel,
                                                params[i] - params[i - 1], sub)
            pts[i], vels[i] = pos, vel
        length = float(np.sqrt(nu.quadratic_form(self.metric(u), w)))
        return GeodesicPath(u=u, v=v, params=params, points=pts,
                            velocities=vels, length=length)

    def distance(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Riemannian distance; built-ins override with closed forms."""
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        if u.ndim == 1:
            return np.array(self.geodesic(u, v).length)
        return np.array([self.geodesic(a, b).length for a, b in zip(u, v)])

    def connecting_tangents(self, u, v, state_u=None, state_v=None):
        """Unit tangents of the minimizing geodesic at both endpoints.

        Returns ``(t_u, t_v, dist, bad)`` in chart components, batched; ``bad``
        flags pairs at or too near the cut locus.  Only models with
        closed-form geodesics support this (it drives the coupling engine).
        """
        raise NoConvergence(
            f"kind={self.kind!r} has no closed-form connecting tangents")

    # -- internals ---------------------------------------------------------

    def _fd_step(self, x):
        return 1e-5 * (1.0 + np.sqrt(np.sum(x * x, axis=-1)))

    def _metric_partials(self, x):
        """d_m g_{ij} by central differences, shape (..., m, i, j)."""
        d = self.dim
        h = self._fd_step(x)[..., None, None, None]
        out = np.empty(x.shape[:-1] + (d, d, d))
        for m in range(d):
            step = np.zeros(d)
            step[m] = 1.0
            hp = self._fd_step(x)[..., None] * step
            xp, xm = x + hp, x - hp
            if not (np.all(self.in_chart(xp)) and np.all(self.in_chart(xm))):
                raise StencilError("metric stencil leaves chart")
            out[..., m, :, :] = self.metric(xp) - self.metric(xm)
        return out / (2.0 * h)

    def _christoffel_partials(self, x):
        """d_m Gamma^k_{ij}, shape (..., m, k, i, j); step 1e-4 (1 + |x|)."""
        d = self.dim
        hs = 1e-4 * (1.0 + np.sqrt(np.sum(x * x, axis=-1)))
        out = np.empty(x.shape[:-1] + (d, d, d, d))
        for m in range(d):
            step = np.zeros(d)
            step[m] = 1.0
            hp = hs[..., None] * step
            xp, xm = x + hp, x - hp
            if not (np.all(self.in_chart(xp)) and np.all(self.in_chart(xm))):
                raise StencilError("curvature stencil leaves chart")
            out[..., m, :, :, :] = self.christoffel(xp) - self.christoffel(xm)
        return out / (2.0 * hs[..., None, None, None, None])

    def _shoot(self, u, v, max_iter: int = 50, tol: float = 1e-10):
        """Damped Newton on w -> exp_u(w) - v.  Returns the initial velocity."""
        w = v - u
        target = v
        res = self.exp(u, w) - target
        err = np.max(np.abs(res))
        fd = 1e-6 * (1.0 + np.max(np.abs(w)))
        for _ in range(max_iter):
            if err < tol:
                return w
            jac = np.empty((self.dim, self.dim))
            for j in range(self.dim):
                dw = np.zeros(self.dim)
                dw[j] = fd
                jac[:, j] = (self.exp(u, w + dw) - self.exp(u, w - dw)) / (2 * fd)
            try:
                delta = np.linalg.solve(jac, res)
            except np.linalg.LinAlgError as exc:
                raise NoConvergence("singular shooting Jacobian") from exc
            lam = 1.0
            for _ in range(12):
                trial = w - lam * delta
                trial_res = self.exp(u, trial) - target
                trial_err = np.max(np.abs(trial_res))
                if trial_err < err:
                    w, res, err = trial, trial_res, trial_err
                    break
                lam *= 0.5
            else:
                raise NoConvergence("shooting line search stalled")
        if err < tol:
            return w
        raise NoConvergence(f"shooting residual {err:.2e} above tol {tol:.0e}")


def _geodesic_rhs(model, pos, vel):
    gamma = model.christoffel(pos)
    acc = -np.einsum("kij,i,j->k", gamma, vel, vel)
    return vel, acc


def _integrate_geodesic_step(model, pos, vel, dt, substeps):
    h = dt / substeps
    for _ in range(substeps):
        k1p, k1v = _geodesic_rhs(model, pos, vel)
        k2p, k2v = _geodesic_rhs(model, pos + 0.5 * h * k1p, vel + 0.5 * h * k1v)
        k3p, k3v = _geodesic_rhs(model, pos + 0.5 * h * k2p, vel + 0.5 * h * k2v)
        k4p, k4v = _geodesic_rhs(model, pos + h * k3p, vel + h * k3v)
        pos = pos + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        vel = vel + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not bool(np.all(model.in_chart(pos[None]))):
            raise ChartExitError("geodesic left the chart domain")
    return pos, vel


def _integrate_geodesic(model, x, v, steps):
    return _integrate_geodesic_step(model, x, v, 1.0, steps)
