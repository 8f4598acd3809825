"""Built-in manifold models with closed-form geometry.

Each model lives in one global chart.  The sphere keeps its polar chart away
from the poles by applying an exact chart rotation (a fixed ambient rotation,
tracked per path through an attitude matrix) whenever a point drifts into a
polar cap; the half-plane and the rotationally symmetric profile models treat
their singular sets (y <= 0, r <= 0) as chart boundaries.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import numutils as nu
from ..errors import CutLocusError, DomainError, NoConvergence
from .base import GeodesicPath, ManifoldModel, WeightPotential

# polar-cap half-width at which the sphere chart is rotated to the equator
SPHERE_SAFE_BAND = 0.6
# ambient rotation by pi/2 about the y axis; maps both poles to the equator
_ROT_Y = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])


@dataclass
class PsiFunction:
    """Radial profile with first and second derivatives."""

    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    d2f: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    @staticmethod
    def power(a: float = 1.0) -> "PsiFunction":
        return PsiFunction(
            f=lambda r: np.asarray(r, float) ** a,
            df=lambda r: a * np.asarray(r, float) ** (a - 1.0),
            d2f=lambda r: a * (a - 1.0) * np.asarray(r, float) ** (a - 2.0),
            name=f"power({a})")

    @staticmethod
    def sinh() -> "PsiFunction":
        return PsiFunction(f=np.sinh, df=np.cosh, d2f=np.sinh, name="sinh")

    @staticmethod
    def table(r_vals, psi_vals) -> "PsiFunction":
        from scipy.interpolate import CubicSpline

        spline = CubicSpline(np.asarray(r_vals, float), np.asarray(psi_vals, float))
        return PsiFunction(f=spline, df=spline.derivative(1),
                           d2f=spline.derivative(2), name="table")


def radial_ricci_model(psi: PsiFunction, d: int, r) -> np.ndarray:
    """Radial curvature expression psi''/psi - (d-1) (psi')^2 / psi^2.

    Evaluated verbatim for profile models; note this is not the same object
    as the Ricci tensor assembled from the chart metric (the two are compared,
    not reconciled, by the diagnostics that consume them).
    """
    r = np.asarray(r, float)
    if np.any(r <= 0.0):
        raise DomainError("radial expression requires r > 0")
    p = np.asarray(psi.f(r), float)
    if np.any(p <= 0.0):
        raise DomainError("radial expression requires psi(r) > 0")
    dp = np.asarray(psi.df(r), float)
    d2p = np.asarray(psi.d2f(r), float)
    return d2p / p - (d - 1) * (dp / p) ** 2


class Euclidean(ManifoldModel):
    """Flat R^d in Cartesian coordinates."""

    def __init__(self, dim: int = 2, weight: WeightPotential | None = None,
                 k_bound=None):
        if k_bound is None and weight is None:
            k_bound = lambda x: np.zeros(np.asarray(x).shape[:-1])
        super().__init__(dim, "euclidean", weight, k_bound)

    def metric(self, x):
        x = np.asarray(x, float)
        return np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,)).copy()

    def metric_inv(self, x):
        return self.metric(x)

    def in_chart(self, x):
        x = np.asarray(x, float)
        return np.ones(x.shape[:-1], dtype=bool)

    def christoffel(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def ricci(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape + (self.dim,))

    def diag_sde(self, x):
        return None, None

    def geodesic_step(self, pts, w):
        return np.asarray(pts, float) + np.asarray(w, float)

    def exp(self, x, v, steps=None):
        x = np.asarray(x, float)
        if not np.all(self.in_chart(np.atleast_2d(x))):
            raise DomainError("exp base point outside chart")
        return x + np.asarray(v, float)

    def geodesic(self, u, v, n: int = 129) -> GeodesicPath:
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        params = np.linspace(0.0, 1.0, n)
        pts = u[None, :] + params[:, None] * (v - u)[None, :]
        vels = np.broadcast_to(v - u, pts.shape).copy()

        def interp(r):
            r = np.atleast_1d(np.asarray(r, float))
            return (u[None, :] + r[:, None] * (v - u)[None, :],
                    np.broadcast_to(v - u, (r.size, self.dim)).copy())

        return GeodesicPath(u=u, v=v, params=params, points=pts,
                            velocities=vels,
                            length=float(np.linalg.norm(v - u)),
                            interpolator=interp)

    def distance(self, u, v):
        u, v = np.asarray(u, float), np.asarray(v, float)
        return np.sqrt(np.sum((u - v) ** 2, axis=-1))

    def canonical_distance(self, a, b):
        return self.distance(a, b)

    def geodesic_nodes(self, a, b, r_nodes):
        a, b = np.asarray(a, float), np.asarray(b, float)
        r = np.asarray(r_nodes, float)
        return a[..., None, :] + r[:, None] * (b - a)[..., None, :]

    def connecting_tangents(self, u, v, state_u=None, state_v=None):
        u, v = np.asarray(u, float), np.asarray(v, float)
        dist = np.sqrt(np.sum((v - u) ** 2, axis=-1))
        safe = np.where(dist > 0, dist, 1.0)
        t = (v - u) / safe[..., None]
        return t, t.copy(), dist, np.zeros(dist.shape, dtype=bool)

    def chart_box(self):
        return -2.0 * np.ones(self.dim), 2.0 * np.ones(self.dim)


class Sphere(ManifoldModel):
    """Round 2-sphere of given radius in the polar chart (theta, phi).

    The chart metric is radius^2 * diag(1, sin^2 theta).  Path ensembles keep
    their coordinates inside the equatorial band |cos theta| <= cos(0.6) by an
    exact chart rotation; the per-path ambient attitude matrix records which
    rotation currently identifies chart and sphere points.
    """

    def __init__(self, radius: float = 1.0, weight: WeightPotential | None = None,
                 k_bound=None):
        if radius <= 0:
            raise DomainError("sphere radius must be positive")
        self.radius = float(radius)
        if k_bound is None and weight is None:
            const = 1.0 / self.radius ** 2  # (d-1)/rho^2 with d = 2
            k_bound = lambda x, c=const: np.full(np.asarray(x).shape[:-1], c)
        super().__init__(2, "sphere", weight, k_bound)

    # -- chart fields ------------------------------------------------------

    def metric(self, x):
        x = np.asarray(x, float)
        g = np.zeros(x.shape + (2,))
        g[..., 0, 0] = self.radius ** 2
        g[..., 1, 1] = self.radius ** 2 * np.sin(x[..., 0]) ** 2
        return g

    def in_chart(self, x):
        x = np.asarray(x, float)
        th = x[..., 0]
        return (th > 0.0) & (th < np.pi)

    def christoffel(self, x):
        x = np.asarray(x, float)
        th = x[..., 0]
        gam = np.zeros(x.shape[:-1] + (2, 2, 2))
        gam[..., 0, 1, 1] = -np.sin(th) * np.cos(th)
        cot = np.cos(th) / np.sin(th)
        gam[..., 1, 0, 1] = cot
        gam[..., 1, 1, 0] = cot
        return gam

    def ricci(self, x):
        # constant curvature 1/radius^2, so Ric = g / radius^2
        return self.metric(x) / self.radius ** 2

    def diag_sde(self, x):
        th = np.asarray(x, float)[..., 0]
        rho2 = self.radius ** 2
        drift = np.zeros_like(np.asarray(x, float))
        drift[..., 0] = 0.5 * np.cos(th) / (np.sin(th) * rho2)
        sig = np.empty_like(drift)
        sig[..., 0] = 1.0 / self.radius
        sig[..., 1] = 1.0 / (self.radius * np.sin(th))
        return drift, sig

    # -- embedding helpers ---------------------------------------------------

    def embed_unit(self, x):
        x = np.asarray(x, float)
        th, ph = x[..., 0], x[..., 1]
        return np.stack([np.sin(th) * np.cos(ph),
                         np.sin(th) * np.sin(ph),
                         np.cos(th)], axis=-1)

    def embed_jacobian(self, x):
        """Columns d(embedding)/d(theta), d(embedding)/d(phi); shape (..., 3, 2)."""
        x = np.asarray(x, float)
        th, ph = x[..., 0], x[..., 1]
        jac = np.empty(x.shape[:-1] + (3, 2))
        jac[..., 0, 0] = np.cos(th) * np.cos(ph)
        jac[..., 1, 0] = np.cos(th) * np.sin(ph)
        jac[..., 2, 0] = -np.sin(th)
        jac[..., 0, 1] = -np.sin(th) * np.sin(ph)
        jac[..., 1, 1] = np.sin(th) * np.cos(ph)
        jac[..., 2, 1] = 0.0
        return jac

    def _chart_of_unit(self, p):
        th = np.arccos(np.clip(p[..., 2], -1.0, 1.0))
        ph = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2.0 * np.pi)
        return np.stack([th, ph], axis=-1)

    def _ambient_to_chart(self, x, t_amb):
        """Chart components of a unit ambient tangent at chart point x."""
        jac = self.embed_jacobian(x)
        ghat = np.zeros(x.shape[:-1] + (2, 2))
        ghat[..., 0, 0] = 1.0
        ghat[..., 1, 1] = np.sin(x[..., 0]) ** 2
        rhs = np.einsum("...im,...i->...m", jac, t_amb)
        return nu.solve_mat_vec(ghat, rhs) / self.radius

    def geodesic_step(self, pts, w):
        """Batched exponential map in chart coordinates (attitude untouched;
        polar caps are repaired by the usual chart fix afterwards)."""
        pts = np.asarray(pts, float)
        w = np.asarray(w, float)
        p = self.embed_unit(pts)
        jac = self.embed_jacobian(pts)
        w_amb = (jac @ w[..., None])[..., 0]
        ang = np.linalg.norm(w_amb, axis=-1)
        small = ang < 1e-300
        ang_safe = np.where(small, 1.0, ang)
        direction = w_amb / ang_safe[..., None]
        q = np.cos(ang)[..., None] * p + np.sin(ang)[..., None] * direction
        q = np.where(small[..., None], p, q)
        return self._chart_of_unit(q)

    # -- canonical coordinates ----------------------------------------------

    def canonical(self, x, chart_state=None):
        p = self.embed_unit(np.asarray(x, float))
        if chart_state is not None:
            p = np.einsum("...ij,...j->...i", chart_state, p)
        return self.radius * p

    def canonical_distance(self, a, b):
        pa = np.asarray(a, float) / self.radius
        pb = np.asarray(b, float) / self.radius
        cross = np.linalg.norm(np.cross(pa, pb), axis=-1)
        dot = np.sum(pa * pb, axis=-1)
        return self.radius * np.arctan2(cross, dot)

    def geodesic_nodes(self, a, b, r_nodes):
        # slerp, with the nearly-coincident case degrading to a linear blend
        pa = np.asarray(a, float) / self.radius
        pb = np.asarray(b, float) / self.radius
        r = np.asarray(r_nodes, float)
        dot = np.clip(np.sum(pa * pb, axis=-1), -1.0, 1.0)
        ang = np.arccos(dot)
        sin = np.sin(ang)
        small = sin < 1e-12
        sin_safe = np.where(small, 1.0, sin)
        wa = np.sin(np.multiply.outer(ang, 1.0 - r)) / sin_safe[..., None]
        wb = np.sin(np.multiply.outer(ang, r)) / sin_safe[..., None]
        wa = np.where(small[..., None], 1.0 - r, wa)
        wb = np.where(small[..., None], r, wb)
        pts = wa[..., None] * pa[..., None, :] + wb[..., None] * pb[..., None, :]
        pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
        return self.radius * pts

    # -- simulation helpers --------------------------------------------------

    def radial_coordinate(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape[:-1])  # compact: never triggers the cutoff

    def new_chart_state(self, n: int):
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    def chart_fix(self, x, frames, chart_state):
        x = np.asarray(x, float)
        x[..., 1] = np.mod(x[..., 1], 2.0 * np.pi)
        th = x[..., 0]
        exited = ~((th > 0.0) & (th < np.pi))
        caps = (~exited) & ((th < SPHERE_SAFE_BAND)
                            | (th > np.pi - SPHERE_SAFE_BAND))
        if np.any(caps):
            idx = np.where(caps)[0]
            c_old = x[idx]
            p_new = self.embed_unit(c_old) @ _ROT_Y.T
            c_new = self._chart_of_unit(p_new)
            if frames is not None or True:
                jac_old = self.embed_jacobian(c_old)
                jac_new = self.embed_jacobian(c_new)
                ghat = np.zeros((idx.size, 2, 2))
                ghat[:, 0, 0] = 1.0
                ghat[:, 1, 1] = np.sin(c_new[:, 0]) ** 2
                rot = np.einsum("bim,ij,bjn->bmn", jac_new, _ROT_Y, jac_old)
                trans = nu.inv(ghat) @ rot
            x[idx] = c_new
            if frames is not None:
                frames[idx] = trans @ frames[idx]
            if chart_state is not None:
                chart_state[idx] = chart_state[idx] @ _ROT_Y.T
        return x, frames, chart_state, exited

    def chart_box(self):
        return np.array([0.7, 0.0]), np.array([np.pi - 0.7, 2.0 * np.pi])

    # -- geodesics -------------------------------------------------------------

    def _cut_tolerance(self):
        return np.pi * self.radius - 1e-6

    def exp(self, x, v, steps=None):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        if not np.all(self.in_chart(np.atleast_2d(x))):
            raise DomainError("exp base point outside chart")
        speed = float(np.sqrt(nu.quadratic_form(self.metric(x), v)))
        if speed == 0.0:
            return x.copy()
        p = self.embed_unit(x)
        t_amb = self.embed_jacobian(x) @ v * self.radius / speed
        ang = speed / self.radius
        q = np.cos(ang) * p + np.sin(ang) * t_amb
        if 1.0 - abs(q[2]) < 1e-12:
            raise DomainError("geodesic endpoint at a chart pole")
        return self._chart_of_unit(q)

    def geodesic(self, u, v, n: int = 129) -> GeodesicPath:
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        pu, pv = self.embed_unit(u), self.embed_unit(v)
        dot = float(np.clip(pu @ pv, -1.0, 1.0))
        ang = float(np.arctan2(np.linalg.norm(np.cross(pu, pv)), dot))
        if self.radius * ang > self._cut_tolerance():
            raise CutLocusError("endpoints are (numerically) antipodal")
        length = self.radius * ang

        if ang < 1e-14:
            def interp(r):
                r = np.atleast_1d(np.asarray(r, float))
                return (np.broadcast_to(u, (r.size, 2)).copy(),
                        np.zeros((r.size, 2)))
        else:
            e_dir = (pv - dot * pu) / np.sin(ang)

            def interp(r):
                r = np.atleast_1d(np.asarray(r, float))
                a = r * ang
                pts3 = np.cos(a)[:, None] * pu + np.sin(a)[:, None] * e_dir
                tan3 = (-np.sin(a)[:, None] * pu
                        + np.cos(a)[:, None] * e_dir) * ang
                chart = self._chart_of_unit(pts3)
                vel = self._ambient_to_chart(chart, tan3) * self.radius
                return chart, vel

        params = np.linspace(0.0, 1.0, n)
        pts, vels = interp(params)
        return GeodesicPath(u=u, v=v, params=params, points=pts,
                            velocities=vels, length=length, interpolator=interp)

    def distance(self, u, v):
        pu = self.embed_unit(np.asarray(u, float))
        pv = self.embed_unit(np.asarray(v, float))
        cross = np.linalg.norm(np.cross(pu, pv), axis=-1)
        dot = np.sum(pu * pv, axis=-1)
        return self.radius * np.arctan2(cross, dot)

    def connecting_tangents(self, u, v, state_u=None, state_v=None):
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        pu, pv = self.embed_unit(u), self.embed_unit(v)
        if state_u is not None:
            pu = np.einsum("...ij,...j->...i", state_u, pu)
        if state_v is not None:
            pv = np.einsum("...ij,...j->...i", state_v, pv)
        dot = np.clip(np.sum(pu * pv, axis=-1), -1.0, 1.0)
        sin = np.linalg.norm(np.cross(pu, pv), axis=-1)
        ang = np.arctan2(sin, dot)
        bad = self.radius * ang > self._cut_tolerance()
        degenerate = sin < 1e-14
        sin_safe = np.where(degenerate, 1.0, sin)
        e_u = (pv - dot[..., None] * pu) / sin_safe[..., None]
        e_v = (dot[..., None] * pv - pu) / sin_safe[..., None]
        if state_u is not None:
            e_u = np.einsum("...ji,...j->...i", state_u, e_u)
        if state_v is not None:
            e_v = np.einsum("...ji,...j->...i", state_v, e_v)
        t_u = self._ambient_to_chart(u, e_u)
        t_v = self._ambient_to_chart(v, e_v)
        return t_u, t_v, self.radius * ang, bad | degenerate


class HyperbolicHalfPlane(ManifoldModel):
    """Hyperbolic plane (curvature -1) in the upper half-plane chart."""

    def __init__(self, weight: WeightPotential | None = None, k_bound=None):
        if k_bound is None and weight is None:
            k_bound = lambda x: np.full(np.asarray(x).shape[:-1], -1.0)
        super().__init__(2, "hyperbolic", weight, k_bound)

    def metric(self, x):
        x = np.asarray(x, float)
        g = np.zeros(x.shape + (2,))
        inv_y2 = 1.0 / x[..., 1] ** 2
        g[..., 0, 0] = inv_y2
        g[..., 1, 1] = inv_y2
        return g

    def in_chart(self, x):
        x = np.asarray(x, float)
        return x[..., 1] > 0.0

    def christoffel(self, x):
        x = np.asarray(x, float)
        inv_y = 1.0 / x[..., 1]
        gam = np.zeros(x.shape[:-1] + (2, 2, 2))
        gam[..., 0, 0, 1] = -inv_y
        gam[..., 0, 1, 0] = -inv_y
        gam[..., 1, 0, 0] = inv_y
        gam[..., 1, 1, 1] = -inv_y
        return gam

    def ricci(self, x):
        return -self.metric(x)

    def diag_sde(self, x):
        y = np.asarray(x, float)[..., 1]
        sig = np.empty_like(np.asarray(x, float))
        sig[..., 0] = y
        sig[..., 1] = y
        return None, sig

    def distance(self, u, v):
        u, v = np.asarray(u, float), np.asarray(v, float)
        sq = np.sum((u - v) ** 2, axis=-1)
        return np.arccosh(1.0 + sq / (2.0 * u[..., 1] * v[..., 1]))

    def canonical_distance(self, a, b):
        return self.distance(a, b)

    def radial_coordinate(self, x):
        x = np.asarray(x, float)
        base = np.zeros_like(x)
        base[..., 1] = 1.0
        return self.distance(x, base)

    def chart_box(self):
        return np.array([-2.0, 0.5]), np.array([2.0, 4.0])

    def _geodesic_parametrization(self, u, v):
        """Arc parameters of the connecting geodesic, batched.

        Returns ``(vertical, c, radius, s_u, s_v)``: circle center and radius
        for the generic case, log-tangent arclength parameters at both ends.
        On vertical lines ``s`` is log(y).
        """
        u, v = np.asarray(u, float), np.asarray(v, float)
        dx = v[..., 0] - u[..., 0]
        vertical = np.abs(dx) < 1e-12 * (1.0 + np.abs(u[..., 0]) + np.abs(v[..., 0]))
        dx_safe = np.where(vertical, 1.0, dx)
        c = ((np.sum(v * v, axis=-1) - np.sum(u * u, axis=-1)) / (2.0 * dx_safe))
        radius = np.hypot(u[..., 0] - c, u[..., 1])
        alpha_u = np.arctan2(u[..., 1], u[..., 0] - c)
        alpha_v = np.arctan2(v[..., 1], v[..., 0] - c)
        s_u = np.where(vertical, np.log(u[..., 1]), np.log(np.tan(alpha_u / 2.0)))
        s_v = np.where(vertical, np.log(v[..., 1]), np.log(np.tan(alpha_v / 2.0)))
        return vertical, c, radius, s_u, s_v

    def geodesic_step(self, pts, w):
        """Batched exponential map: follow the circle (or vertical ray)
        tangent to ``w`` for the metric length of ``w``."""
        pts = np.asarray(pts, float)
        w = np.asarray(w, float)
        x, y = pts[..., 0], pts[..., 1]
        dist = np.sqrt(w[..., 0] ** 2 + w[..., 1] ** 2) / y
        vertical = np.abs(w[..., 0]) < 1e-14 * (np.abs(w[..., 1]) + 1e-300)
        # vertical ray case
        sign_v = np.sign(w[..., 1])
        x_vert, y_vert = x, y * np.exp(sign_v * dist)
        # circle case
        wx_safe = np.where(vertical, 1.0, w[..., 0])
        c = x + y * w[..., 1] / wx_safe
        radius = np.hypot(x - c, y)
        alpha0 = np.arctan2(y, x - c)
        s0 = np.log(np.tan(0.5 * alpha0))
        forward = -w[..., 0] * np.sin(alpha0) + w[..., 1] * np.cos(alpha0)
        sign_c = np.where(forward >= 0.0, 1.0, -1.0)
        alpha1 = 2.0 * np.arctan(np.exp(s0 + sign_c * dist))
        x_circ = c + radius * np.cos(alpha1)
        y_circ = radius * np.sin(alpha1)
        out = np.stack([np.where(vertical, x_vert, x_circ),
                        np.where(vertical, y_vert, y_circ)], axis=-1)
        return out

    def geodesic_nodes(self, a, b, r_nodes):
        vertical, c, radius, s_a, s_b = self._geodesic_parametrization(a, b)
        r = np.asarray(r_nodes, float)
        s = s_a[..., None] + r * (s_b - s_a)[..., None]
        alpha = 2.0 * np.arctan(np.exp(s))
        x_circ = c[..., None] + radius[..., None] * np.cos(alpha)
        y_circ = radius[..., None] * np.sin(alpha)
        a_arr = np.asarray(a, float)
        x_vert = np.broadcast_to(a_arr[..., 0][..., None], s.shape)
        y_vert = np.exp(s)
        x_out = np.where(vertical[..., None], x_vert, x_circ)
        y_out = np.where(vertical[..., None], y_vert, y_circ)
        return np.stack([x_out, y_out], axis=-1)

    def geodesic(self, u, v, n: int = 129) -> GeodesicPath:
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        length = float(self.distance(u, v))

        def interp(r):
            r = np.atleast_1d(np.asarray(r, float))
            pts = self.geodesic_nodes(u, v, r)
            eps = 1e-7
            ahead = self.geodesic_nodes(u, v, np.minimum(r + eps, 1.0))
            behind = self.geodesic_nodes(u, v, np.maximum(r - eps, 0.0))
            span = np.minimum(r + eps, 1.0) - np.maximum(r - eps, 0.0)
            vel = (ahead - behind) / span[:, None]
            return pts, vel

        params = np.linspace(0.0, 1.0, n)
        pts, vels = interp(params)
        return GeodesicPath(u=u, v=v, params=params, points=pts,
                            velocities=vels, length=length, interpolator=interp)

    def connecting_tangents(self, u, v, state_u=None, state_v=None):
        u, v = np.asarray(u, float), np.asarray(v, float)
        vertical, c, radius, s_u, s_v = self._geodesic_parametrization(u, v)
        dist = self.distance(u, v)
        sign = np.sign(s_v - s_u)
        # circle case: d(point)/ds = (-R sin a, R cos a) * sin a * sign
        alpha_u = np.arctan2(u[..., 1], u[..., 0] - c)
        alpha_v = np.arctan2(v[..., 1], v[..., 0] - c)

        def circ_tangent(alpha):
            return np.stack([-radius * np.sin(alpha),
                             radius * np.cos(alpha)], axis=-1) \
                * (np.sin(alpha) * sign)[..., None]

        t_u_c, t_v_c = circ_tangent(alpha_u), circ_tangent(alpha_v)
        # vertical case: unit tangent is (0, y) * sign
        t_u_v = np.stack([np.zeros_like(s_u), u[..., 1] * sign], axis=-1)
        t_v_v = np.stack([np.zeros_like(s_v), v[..., 1] * sign], axis=-1)
        t_u = np.where(vertical[..., None], t_u_v, t_u_c)
        t_v = np.where(vertical[..., None], t_v_v, t_v_c)
        bad = dist < 1e-14
        return t_u, t_v, dist, bad


class ProfileModel(ManifoldModel):
    """Rotationally symmetric surface dr^2 + psi(r)^2 dtheta^2 (dim 2)."""

    def __init__(self, psi: PsiFunction, dim: int = 2,
                 weight: WeightPotential | None = None, k_bound=None):
        if dim != 2:
            raise DomainError("profile models support simulation only in dim 2")
        self.psi = psi
        if k_bound is None and weight is None:
            k_bound = lambda r_th: -np.asarray(psi.d2f(r_th[..., 0]), float) / \
                np.asarray(psi.f(r_th[..., 0]), float)
        super().__init__(2, "model", weight, k_bound)

    def metric(self, x):
        x = np.asarray(x, float)
        g = np.zeros(x.shape + (2,))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = np.asarray(self.psi.f(x[..., 0]), float) ** 2
        return g

    def in_chart(self, x):
        x = np.asarray(x, float)
        return x[..., 0] > 0.0

    def christoffel(self, x):
        x = np.asarray(x, float)
        r = x[..., 0]
        p = np.asarray(self.psi.f(r), float)
        dp = np.asarray(self.psi.df(r), float)
        gam = np.zeros(x.shape[:-1] + (2, 2, 2))
        gam[..., 0, 1, 1] = -p * dp
        ratio = dp / p
        gam[..., 1, 0, 1] = ratio
        gam[..., 1, 1, 0] = ratio
        return gam

    def ricci(self, x):
        x = np.asarray(x, float)
        r = x[..., 0]
        gauss = -np.asarray(self.psi.d2f(r), float) / np.asarray(self.psi.f(r), float)
        return gauss[..., None, None] * self.metric(x)

    def diag_sde(self, x):
        r = np.asarray(x, float)[..., 0]
        p = np.asarray(self.psi.f(r), float)
        dp = np.asarray(self.psi.df(r), float)
        drift = np.zeros_like(np.asarray(x, float))
        drift[..., 0] = 0.5 * dp / p
        sig = np.empty_like(drift)
        sig[..., 0] = 1.0
        sig[..., 1] = 1.0 / p
        return drift, sig

    def canonical(self, x, chart_state=None):
        x = np.asarray(x, float)
        r, th = x[..., 0], x[..., 1]
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)

    def radial_coordinate(self, x):
        return np.asarray(x, float)[..., 0]

    def chart_fix(self, x, frames, chart_state):
        x = np.asarray(x, float)
        x[..., 1] = np.mod(x[..., 1], 2.0 * np.pi)
        return x, frames, chart_state, ~self.in_chart(x)

    def chart_box(self):
        return np.array([0.5, 0.0]), np.array([3.0, 2.0 * np.pi])

    def ball_volume_radial(self, radius: float = 1.0, n: int = 4097) -> float:
        """Volume of a ball of the given radius about the pole: the
        rotationally invariant closed form 2 pi * integral of psi."""
        r = np.linspace(0.0, radius, n)[1:]
        vals = np.asarray(self.psi.f(r), float)
        return float(2.0 * np.pi * np.trapezoid(vals, r))


class CustomChart(ManifoldModel):
    """User-supplied metric on a coordinate domain.

    Derived objects come from the finite-difference defaults; geodesics from
    damped-Newton shooting.  The metric callable must be batched: it maps
    (..., d) points to (..., d, d) matrices.
    """

    def __init__(self, dim: int, metric_fn, in_chart_fn=None,
                 box=None, weight: WeightPotential | None = None, k_bound=None):
        super().__init__(dim, "custom", weight, k_bound)
        self._metric_fn = metric_fn
        self._in_chart_fn = in_chart_fn
        self._box = box

    def metric(self, x):
        return np.asarray(self._metric_fn(np.asarray(x, float)), float)

    def in_chart(self, x):
        x = np.asarray(x, float)
        if self._in_chart_fn is None:
            return np.ones(x.shape[:-1], dtype=bool)
        return np.asarray(self._in_chart_fn(x), bool)

    def chart_box(self):
        if self._box is None:
            return super().chart_box()
        return np.asarray(self._box[0], float), np.asarray(self._box[1], float)

    def distance(self, u, v):
        u, v = np.asarray(u, float), np.asarray(v, float)
        if u.ndim == 1:
            return np.array(self.geodesic(u, v).length)
        raise NoConvergence("custom models support pairwise distance only")


def builtin_model(kind: str, *, dim: int = 2, radius: float = 1.0,
                  psi: PsiFunction | None = None,
                  weight: WeightPotential | None = None,
                  k_bound=None) -> ManifoldModel:
    """Factory for the built-in model kinds used by configs and services."""
    kind = kind.lower()
    if kind == "euclidean":
        return Euclidean(dim=dim, weight=weight, k_bound=k_bound)
    if kind == "sphere":
        return Sphere(radius=radius, weight=weight, k_bound=k_bound)
    if kind == "hyperbolic":
        return HyperbolicHalfPlane(weight=weight, k_bound=k_bound)
    if kind == "model":
        if psi is None:
            raise DomainError("model kind requires a psi profile")
        return ProfileModel(psi=psi, dim=dim, weight=weight, k_bound=k_bound)
    raise DomainError(f"unknown manifold kind {kind!r}")
