"""Coupling by parallel displacement and the pathwise contraction check.

Two Brownian motions are driven by the same noise: the second path's chart
increment is the first one's, parallel-transported along the connecting
minimizing geodesic.  On two-dimensional models the transport is exact and
closed-form: it maps the geodesic tangent at one end to the geodesic tangent
at the other and preserves oriented angles, so a vector decomposed against
(tangent, normal) at the first endpoint reassembles against the transported
pair at the second.

Distances are averaged against the curvature bound through kappa(u, v), the
geodesic average of the bound function between the two positions; its
left-endpoint time integral drives the contraction inequality

    rho_t <= exp(-(K_t - K_s) / 2) * rho_s        for all grid s <= t,

which is verified per pair with a discretization allowance exp(c_tol dt (t-s))
via a running-minimum scan (O(steps) per pair for all (s, t) pairs at once).
Pairs merge exactly once their distance falls below the capture radius
10 sqrt(dt) times the model's injectivity scale, and evolve identically
afterwards.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numutils as nu
from .diffusion import SimConfig, _path_rng, _retry_rng
from .errors import ConfigError, CutLocusError, DomainError
from .geometry.base import ManifoldModel

GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
GL_NODES = 0.5 * (GL_NODES + 1.0)      # map to [0, 1]
GL_WEIGHTS = 0.5 * GL_WEIGHTS

DEFAULT_C_TOL = 8.0


@dataclass
class CouplingSample:
    """Trajectory record of one coupled pair."""

    times: np.ndarray
    points_x: np.ndarray
    points_y: np.ndarray
    distances: np.ndarray
    kappa_integrals: np.ndarray      # cumulative left-endpoint integral of kappa
    coupled: np.ndarray              # flag per step
    coupling_time: float             # +inf sentinel when never coupled
    cut_events: int
    seed: int
    pair_id: int


def _injectivity_scale(model: ManifoldModel) -> float:
    return getattr(model, "radius", 1.0) if model.kind == "sphere" else 1.0


def merge_threshold(model: ManifoldModel, dt: float) -> float:
    return 10.0 * math.sqrt(dt) * _injectivity_scale(model)


def _rotate90(g, v):
    """Metric rotation by +90 degrees in a 2d chart."""
    if v.shape[-1] != 2:
        raise DomainError("metric rotation implemented for 2d charts only")
    root = np.sqrt(nu.det(g))
    n0 = -(g[..., 1, 0] * v[..., 0] + g[..., 1, 1] * v[..., 1]) / root
    n1 = (g[..., 0, 0] * v[..., 0] + g[..., 0, 1] * v[..., 1]) / root
    return np.stack([n0, n1], axis=-1)


def _bound_values(k_bound, model, canon_pts):
    if callable(k_bound):
        return np.asarray(k_bound(canon_pts), float)
    return np.full(canon_pts.shape[:-1], float(k_bound))


def kappa_average(model: ManifoldModel, k_bound, u, v) -> float:
    """Average of the bound function along the minimizing geodesic.

    ``k_bound`` is a constant or a callable of canonical coordinates.  On the
    diagonal the value is the bound itself, exactly.
    """
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    cu = np.asarray(model.canonical(u[None]))[0]
    cv = np.asarray(model.canonical(v[None]))[0]
    if np.array_equal(u, v):
        return float(_bound_values(k_bound, model, cu[None])[0])
    if not callable(k_bound):
        return float(k_bound)
    if hasattr(model, "geodesic_nodes"):
        nodes = model.geodesic_nodes(cu[None], cv[None], GL_NODES)[0]
    else:
        path = model.geodesic(u, v)
        pts, _ = path.at(GL_NODES)
        nodes = np.asarray(model.canonical(pts))
    vals = _bound_values(k_bound, model, nodes)
    return float(np.sum(GL_WEIGHTS * vals))


def index_form_ricci_bound(model: ManifoldModel, k_bound, u, v):
    """Curvature integrals along the connecting geodesic.

    Returns ``(ricci_bound, kappa_bound)``: minus the integral of the Ricci
    form of the unit tangent over arclength, and minus distance times the
    geodesic kappa average.  The first never exceeds the second when the
    bound function really bounds the Ricci form from below.
    """
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    path = model.geodesic(u, v)
    if path.length < 1e-14:
        raise CutLocusError("index bound needs distinct endpoints")
    pts, vels = path.at(GL_NODES)
    ric = (model.weighted_ricci(pts) if model.weight is not None
           else model.ricci(pts))
    ric_form = np.einsum("ni,nij,nj->n", vels, ric, vels)
    # unit-time parametrization: ds = L dr and |gamma'| = L, so the
    # arclength integral of Ric(unit, unit) is (1/L) int Ric(g', g') dr
    ricci_bound = -float(np.sum(GL_WEIGHTS * ric_form)) / path.length
    kappa_bound = -path.length * kappa_average(model, k_bound, u, v)
    return ricci_bound, kappa_bound


class CouplingWalker:
    """Vectorized state for a block of coupled pairs."""

    def __init__(self, model: ManifoldModel, x0, y0, cfg: SimConfig,
                 pair_ids, k_bound, c_tol: float):
        if model.dim != 2 and model.kind != "euclidean":
            raise ConfigError("parallel coupling supports 2d curved models")
        self.model = model
        self.cfg = cfg
        self.k_bound = k_bound
        self.c_tol = c_tol
        self.pair_ids = np.asarray(pair_ids)
        n = self.pair_ids.size
        d = model.dim
        self.x = np.tile(np.asarray(x0, float), (n, 1))
        self.y = np.tile(np.asarray(y0, float), (n, 1))
        self.state_x = model.new_chart_state(n)
        self.state_y = model.new_chart_state(n)
        self.alive = np.ones(n, dtype=bool)
        self.coupled = np.zeros(n, dtype=bool)
        self.coupling_time = np.full(n, np.inf)
        self.cut_events = np.zeros(n, dtype=np.int64)
        self.kappa_cum = np.zeros(n)
        self.eps_merge = merge_threshold(model, cfg.dt)
        self.rho = self._distances()
        self.t = 0.0
        self.step_index = 0
        # running-minimum contraction scan (all-pairs existence + worst ratio)
        self._umin = self._u_value()
        self.violations = np.zeros(n, dtype=np.int64)
        self.worst_log_ratio = np.full(n, -np.inf)
        # sampled (s, t) grid pairs for the pair-fraction estimate
        self._pair_s = None
        self._pair_t = None
        self._u_store = {}
        self.pair_violations = 0
        self.pair_samples = 0
        self._rngs = [_path_rng(cfg.seed, int(pid)) for pid in self.pair_ids]

    def sample_pairs(self, n_steps: int, n_pairs: int, seed: int) -> None:
        """Fix a uniform sample of grid pairs (s < t) to scan exactly."""
        rng = np.random.Generator(np.random.Philox(
            key=np.array([seed ^ 0x5DEECE66D, 0xC0FFEE], dtype=np.uint64)))
        t = rng.integers(1, n_steps + 1, size=n_pairs)
        s = (rng.random(n_pairs) * t).astype(np.int64)
        self._pair_s, self._pair_t = s, t
        for step in np.unique(s):
            self._u_store[int(step)] = None
        if 0 in self._u_store:
            self._u_store[0] = self._u_value()

    def canon_x(self):
        return np.asarray(self.model.canonical(self.x, self.state_x))

    def canon_y(self):
        return np.asarray(self.model.canonical(self.y, self.state_y))

    def _distances(self):
        return np.asarray(self.model.canonical_distance(
            self.canon_x(), self.canon_y()))

    def _u_value(self):
        with np.errstate(divide="ignore"):
            logr = np.where(self.rho > 0.0, np.log(np.maximum(self.rho, 1e-300)),
                            -np.inf)
        return logr + 0.5 * self.kappa_cum - self.c_tol * self.cfg.dt * self.t

    def _kappa_now(self):
        """Left-endpoint kappa at the current pair positions."""
        cx, cy = self.canon_x(), self.canon_y()
        if not callable(self.k_bound):
            return np.full(self.x.shape[0], float(self.k_bound))
        vals = np.empty(self.x.shape[0])
        diag = self.coupled | (self.rho <= 1e-14)
        if np.any(diag):
            vals[diag] = _bound_values(self.k_bound, self.model, cx[diag])
        off = ~diag
        if np.any(off):
            nodes = self.model.geodesic_nodes(cx[off], cy[off], GL_NODES)
            kv = _bound_values(self.k_bound, self.model, nodes)
            vals[off] = kv @ GL_WEIGHTS
        return vals

    def step(self):
        model, cfg = self.model, self.cfg
        dt = cfg.dt
        n, d = self.x.shape

        self.kappa_cum += np.where(self.alive, self._kappa_now() * dt, 0.0)

        z = np.empty((n, d))
        for i, rng in enumerate(self._rngs):
            z[i] = rng.standard_normal(d)
        z *= math.sqrt(dt)

        noise = self._chart_noise(self.x, z)
        wx = noise + self._weight_drift(self.x) * dt
        if model.kind == "euclidean":
            noise_y = noise
            bad = np.zeros(n, dtype=bool)
        else:
            t_x, t_y, _dist, bad = model.connecting_tangents(
                self.x, self.y, self.state_x, self.state_y)
            g_x = model.metric(self.x)
            g_y = model.metric(self.y)
            n_x = _rotate90(g_x, t_x)
            n_y = _rotate90(g_y, t_y)
            alpha = np.einsum("bi,bij,bj->b", t_x, g_x, noise)
            beta = np.einsum("bi,bij,bj->b", n_x, g_x, noise)
            noise_y = alpha[:, None] * t_y + beta[:, None] * n_y
        wy = noise_y + self._weight_drift(self.y) * dt

        live = self.alive & ~self.coupled
        retry = live & bad
        x_step = model.geodesic_step(self.x, wx)
        y_step = model.geodesic_step(self.y, wy)
        x_new = np.where((self.alive & ~retry)[:, None], x_step, self.x)
        y_new = np.where((live & ~retry)[:, None], y_step, self.y)
        if np.any(retry):
            self._retry_pairs(np.where(retry)[0], x_new, y_new)

        x_new, _, self.state_x, exit_x = model.chart_fix(x_new, None,
                                                         self.state_x)
        y_new, _, self.state_y, exit_y = model.chart_fix(y_new, None,
                                                         self.state_y)
        dead = self.alive & (exit_x | exit_y
                             | ~np.isfinite(x_new).all(axis=1)
                             | ~np.isfinite(y_new).all(axis=1))
        if np.any(dead):
            x_new[dead] = self.x[dead]
            y_new[dead] = self.y[dead]
            self.alive &= ~dead

        self.x, self.y = x_new, y_new
        # coupled pairs continue on top of each other exactly
        if np.any(self.coupled):
            idx = self.coupled
            self.y[idx] = self.x[idx]
            if self.state_y is not None:
                self.state_y[idx] = self.state_x[idx]

        self.t += dt
        self.step_index += 1
        self.rho = self._distances()
        self.rho[self.coupled] = 0.0

        fresh = self.alive & ~self.coupled & (self.rho <= self.eps_merge)
        if np.any(fresh):
            self.coupled |= fresh
            self.coupling_time[fresh] = self.t
            self.y[fresh] = self.x[fresh]
            if self.state_y is not None:
                self.state_y[fresh] = self.state_x[fresh]
            self.rho[fresh] = 0.0

        u = self._u_value()
        with np.errstate(invalid="ignore"):
            viol = self.alive & (u > self._umin + 1e-12)
        self.violations += viol
        # worst raw log ratio against the best past value (tolerance removed)
        raw = u - self._umin
        self.worst_log_ratio = np.maximum(self.worst_log_ratio,
                                          np.where(self.alive, raw, -np.inf))
        self._umin = np.minimum(self._umin, u)
        if self._pair_s is not None:
            k = self.step_index
            if k in self._u_store:
                self._u_store[k] = u.copy()
            hits = np.where(self._pair_t == k)[0]
            for j in hits:
                us = self._u_store[int(self._pair_s[j])]
                self.pair_violations += int(np.sum(u > us + 1e-12))
                self.pair_samples += u.size

    def _chart_noise(self, pts, z):
        model = self.model
        fast = model.diag_sde(pts)
        if fast is not None:
            _drift, sig = fast
            return z if sig is None else sig * z
        sigma = nu.noise_factor(model.metric(pts))
        return (sigma @ z[..., None])[..., 0]

    def _weight_drift(self, pts):
        model = self.model
        if model.weight is None:
            return 0.0
        fast = model.diag_sde(pts)
        if fast is not None:
            _drift, sig = fast
            g_inv_diag = np.ones_like(pts) if sig is None else sig ** 2
            return -g_inv_diag * model.weight.dphi(pts)
        return -(nu.inv(model.metric(pts))
                 @ model.weight.dphi(pts)[..., None])[..., 0]

    def _retry_pairs(self, idx, x_new, y_new):
        """Near-cut-locus pairs: quarter-steps with fresh noise; if the
        geodesic stays ambiguous the pair evolves independently this step."""
        model, cfg = self.model, self.cfg
        for i in idx:
            self.cut_events[i] += 1
            rng = _retry_rng(cfg.seed, int(self.pair_ids[i]), self.step_index)
            px, py = self.x[i].copy(), self.y[i].copy()
            sx = None if self.state_x is None else self.state_x[i:i + 1].copy()
            sy = None if self.state_y is None else self.state_y[i:i + 1].copy()
            sub_dt = cfg.dt / 4.0
            for _sub in range(4):
                z = rng.standard_normal(model.dim) * math.sqrt(sub_dt)
                t_x, t_y, _d, bad = model.connecting_tangents(
                    px[None], py[None], sx, sy)
                noise = self._chart_noise(px[None], z[None])
                if bad[0]:
                    zy = rng.standard_normal(model.dim) * math.sqrt(sub_dt)
                    noise_y = self._chart_noise(py[None], zy[None])
                else:
                    g_x = model.metric(px[None])
                    g_y = model.metric(py[None])
                    n_x = _rotate90(g_x, t_x)
                    n_y = _rotate90(g_y, t_y)
                    alpha = np.einsum("bi,bij,bj->b", t_x, g_x, noise)
                    beta = np.einsum("bi,bij,bj->b", n_x, g_x, noise)
                    noise_y = alpha[:, None] * t_y + beta[:, None] * n_y
                px_n = model.geodesic_step(px[None], noise)
                py_n = model.geodesic_step(py[None], noise_y)
                px_b, _, sx, _ = model.chart_fix(px_n.copy(), None, sx)
                py_b, _, sy, _ = model.chart_fix(py_n.copy(), None, sy)
                px, py = px_b[0], py_b[0]
            x_new[i], y_new[i] = px, py
            if self.state_x is not None:
                self.state_x[i] = sx[0]
                self.state_y[i] = sy[0]


def coupling_contraction_study(model: ManifoldModel, x0, y0, k_bound,
                               cfg: SimConfig, *, c_tol: float = DEFAULT_C_TOL,
                               pair_sample: int = 512):
    """Ensemble verification of the pathwise contraction inequality.

    Simulates ``cfg.n_paths`` coupled pairs.  ``violation_fraction`` is the
    fraction of grid pairs (s, t) violating the inequality at the stated
    tolerance, estimated over a uniform sample of ``pair_sample`` grid pairs
    per coupling (adjacent-step pairs carry most violations, so the fraction
    scales down roughly with the step count); ``coupling_violation_fraction``
    is the fraction of couplings with at least one violating pair (a much
    stricter existence statistic), and ``worst_ratio`` the largest raw ratio
    over all pairs and couplings with the tolerance stripped.
    """
    cfg.validate()
    n_steps = cfg.steps_to(cfg.horizon)
    ids = np.arange(cfg.n_paths)
    blocks = [ids[i:i + cfg.block_size]
              for i in range(0, cfg.n_paths, cfg.block_size)]
    any_violation = []
    worst = []
    coupled_frac = 0.0
    cut_total = 0
    rho_final = []
    pair_viol = 0
    pair_total = 0
    for block_ids in blocks:
        w = CouplingWalker(model, x0, y0, cfg, block_ids, k_bound, c_tol)
        w.sample_pairs(n_steps, pair_sample, cfg.seed)
        for _ in range(n_steps):
            w.step()
        any_violation.append(w.violations > 0)
        worst.append(w.worst_log_ratio)
        coupled_frac += float(w.coupled.sum())
        cut_total += int(w.cut_events.sum())
        rho_final.append(w.rho)
        pair_viol += w.pair_violations
        pair_total += w.pair_samples
    any_violation = np.concatenate(any_violation)
    worst = np.concatenate(worst)
    rho_final = np.concatenate(rho_final)
    return {
        "pairs": int(cfg.n_paths),
        "steps": int(n_steps),
        "dt": float(cfg.dt),
        "c_tol": float(c_tol),
        "violation_fraction": pair_viol / max(pair_total, 1),
        "pair_samples": int(pair_total),
        "coupling_violation_fraction": float(any_violation.mean()),
        "worst_ratio": float(np.exp(np.max(worst))),
        "coupled_fraction": coupled_frac / cfg.n_paths,
        "cut_events": cut_total,
        "mean_final_distance": float(rho_final.mean()),
        "merge_threshold": merge_threshold(model, cfg.dt),
    }


def simulate_parallel_coupling(model: ManifoldModel, x0, y0, cfg: SimConfig,
                               k_bound=None, pair_id: int = 0,
                               c_tol: float = DEFAULT_C_TOL) -> CouplingSample:
    """Simulate one coupled pair with full trajectory storage."""
    cfg.validate()
    x0 = np.asarray(x0, float)
    y0 = np.asarray(y0, float)
    if np.array_equal(x0, y0):
        raise ConfigError("coupling needs distinct start points")
    if k_bound is None:
        k_bound = model.k_bound
    n_steps = cfg.steps_to(cfg.horizon)
    w = CouplingWalker(model, x0, y0, cfg.replace(n_paths=1), [pair_id],
                       k_bound, c_tol)
    times = np.arange(n_steps + 1) * cfg.dt
    pts_x = np.empty((n_steps + 1, model.dim))
    pts_y = np.empty((n_steps + 1, model.dim))
    rho = np.empty(n_steps + 1)
    kappa = np.empty(n_steps + 1)
    coupled = np.zeros(n_steps + 1, dtype=bool)
    pts_x[0], pts_y[0] = w.x[0], w.y[0]
    rho[0], kappa[0] = w.rho[0], 0.0
    for k in range(n_steps):
        w.step()
        pts_x[k + 1], pts_y[k + 1] = w.x[0], w.y[0]
        rho[k + 1] = w.rho[0]
        kappa[k + 1] = w.kappa_cum[0]
        coupled[k + 1] = w.coupled[0]
    return CouplingSample(times=times, points_x=pts_x, points_y=pts_y,
                          distances=rho, kappa_integrals=kappa,
                          coupled=coupled,
                          coupling_time=float(w.coupling_time[0]),
                          cut_events=int(w.cut_events[0]),
                          seed=cfg.seed, pair_id=pair_id)


def verify_pathwise_contraction(sample: CouplingSample, *,
                                c_tol: float = DEFAULT_C_TOL):
    """Scan all grid pairs (s, t) of a stored coupling for violations of the
    contraction inequality at tolerance exp(c_tol dt (t-s))."""
    dt = float(sample.times[1] - sample.times[0]) if len(sample.times) > 1 \
        else 0.0
    with np.errstate(divide="ignore"):
        log_rho = np.where(sample.distances > 0.0,
                           np.log(np.maximum(sample.distances, 1e-300)),
                           -np.inf)
    u = log_rho + 0.5 * sample.kappa_integrals - c_tol * dt * sample.times
    raw = log_rho + 0.5 * sample.kappa_integrals
    n = len(u)
    with np.errstate(invalid="ignore"):
        diff = u[None, :] - u[:, None]          # diff[s, t] = u_t - u_s
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    viol = upper & (diff > 1e-12)
    run_min_raw = np.minimum.accumulate(raw)[:-1]
    worst = np.max(raw[1:] - run_min_raw) if n > 1 else -np.inf
    return {
        "pairs_checked": int(upper.sum()),
        "violations": int(viol.sum()),
        "violation_fraction": float(viol.sum() / max(upper.sum(), 1)),
        "worst_ratio": float(np.exp(worst)),
        "c_tol": float(c_tol),
        "dt": dt,
    }
