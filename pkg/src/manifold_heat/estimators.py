"""Monte Carlo estimators along path ensembles.

One ensemble run serves several functionals at once: the terminal state
feeds the heat semigroup, a trapezoid accumulator along the path feeds the
Schrodinger weight, and the damping-weighted noise integral feeds the
derivative estimator.  All indicator-weighted functionals count dead paths
as zero contributions, never dropping them from the sample.

Inequality checks pair their two sides on common random numbers: both sides
are read off the same ensemble (or off ensembles with the same seed), which
shrinks the variance of the difference to the point where a three-sigma
acceptance is meaningful at moderate path counts.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numutils as nu
from .diffusion import SimConfig, run_blocks
from .errors import ConfigError, QuadratureError, ZeroTimeError
from .geometry.base import ManifoldModel
from .results import EstimateResult, mean_and_stderr


@dataclass
class TestFunction:
    """Scalar observable in canonical coordinates.

    ``f`` maps canonical coordinates (chart coordinates for flat models,
    ambient coordinates for embedded ones) to values; ``grad_norm`` is the
    optional analytic evaluator of the metric norm of the gradient, also in
    canonical coordinates; ``sup_norm`` bounds |f| where known.
    """

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    sup_norm: float = math.inf
    grad_norm: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, canon: np.ndarray) -> np.ndarray:
        return np.asarray(self.f(canon), float)


def coordinate_wave(i: int = 0) -> TestFunction:
    """sin of the i-th canonical coordinate (a flat-space eigenfunction)."""
    return TestFunction(
        name=f"sin_x{i + 1}",
        f=lambda c: np.sin(c[..., i]),
        sup_norm=1.0,
        grad_norm=lambda c: np.abs(np.cos(c[..., i])),
    )


def ambient_coordinate(j: int = 2, radius: float = 1.0) -> TestFunction:
    """j-th ambient coordinate on a sphere of the given radius, rescaled to
    sup-norm one (the degree-one eigenfunction of the sphere Laplacian)."""
    return TestFunction(
        name=f"harmonic_c{j}",
        f=lambda c: c[..., j] / radius,
        sup_norm=1.0,
        grad_norm=lambda c: np.sqrt(
            np.maximum(0.0, 1.0 - (c[..., j] / radius) ** 2)) / radius,
    )


def gaussian_bump(center, width: float = 0.7, height: float = 1.0
                  ) -> TestFunction:
    center = np.asarray(center, float)

    def f(c):
        sq = np.sum((c - center) ** 2, axis=-1)
        return height * np.exp(-0.5 * sq / width ** 2)

    def grad_norm(c):
        diff = c - center
        sq = np.sum(diff * diff, axis=-1)
        return height * np.sqrt(sq) / width ** 2 * np.exp(-0.5 * sq / width ** 2)

    return TestFunction(name="bump", f=f, sup_norm=height, grad_norm=grad_norm)


def constant_function(value: float = 1.0) -> TestFunction:
    return TestFunction(
        name=f"const_{value}",
        f=lambda c: np.full(c.shape[:-1], value),
        sup_norm=abs(value),
        grad_norm=lambda c: np.zeros(c.shape[:-1]),
    )


# -- the shared ensemble driver ----------------------------------------------


class _FunctionalObserver:
    """Accumulates the path functionals requested by an estimator run."""

    def __init__(self, walker, potential, need_bel):
        self.potential = potential
        self.need_bel = need_bel
        n, d = walker.x.shape
        if potential is not None:
            self.integral = np.zeros(n)
            self.prev_vals = np.asarray(potential(walker.canon), float)
        if need_bel:
            self.bel = np.zeros((n, d))

    def after_step(self, walker):
        if self.potential is not None:
            cur = np.asarray(self.potential(walker.canon), float)
            contrib = 0.5 * walker.cfg.dt * (self.prev_vals + cur)
            self.integral += np.where(walker.alive, contrib, 0.0)
            self.prev_vals = cur
        if self.need_bel:
            qt_dw = (np.swapaxes(walker.q_prev, -1, -2)
                     @ walker.last_dw[..., None])[..., 0]
            self.bel += qt_dw

    def finish(self, walker):
        out = {"alive": walker.alive.copy(),
               "canon_final": np.asarray(walker.canon).copy()}
        if self.potential is not None:
            out["potential_integral"] = self.integral
        if self.need_bel:
            out["bel"] = self.bel
        return out


def functional_run(model: ManifoldModel, x0, t: float, cfg: SimConfig, *,
                   potential=None, need_bel: bool = False) -> dict:
    """Run an ensemble to time t collecting the standard path functionals."""
    cfg.validate()
    if t > cfg.horizon + 1e-15:
        raise ConfigError("estimator time beyond configured horizon")
    n_steps = cfg.steps_to(t)
    if n_steps == 0:
        canon0 = np.asarray(model.canonical(
            np.tile(np.asarray(x0, float), (cfg.n_paths, 1)),
            model.new_chart_state(cfg.n_paths)))
        out = {"alive": np.ones(cfg.n_paths, bool), "canon_final": canon0}
        if potential is not None:
            out["potential_integral"] = np.zeros(cfg.n_paths)
        if need_bel:
            out["bel"] = np.zeros((cfg.n_paths, model.dim))
        return out
    return run_blocks(
        model, x0, cfg, n_steps,
        lambda w: _FunctionalObserver(w, potential, need_bel),
        need_frames=need_bel, need_q=need_bel)


def initial_frame(model: ManifoldModel, x0) -> np.ndarray:
    """The orthonormal frame every path of an ensemble starts from."""
    return nu.noise_factor(model.metric(np.asarray(x0, float)))


# -- estimators ---------------------------------------------------------------


def heat_semigroup_mc(model: ManifoldModel, f: TestFunction, x0, t: float,
                      cfg: SimConfig) -> EstimateResult:
    """Heat semigroup value E[f(X_t); t < lifetime] at x0."""
    out = functional_run(model, x0, t, cfg)
    vals = f(out["canon_final"]) * out["alive"]
    mean, err = mean_and_stderr(vals)
    return EstimateResult(float(mean), float(err), vals.size, cfg.seed, cfg.dt)


def schrodinger_fk(model: ManifoldModel, f: TestFunction, potential, x0,
                   t: float, cfg: SimConfig) -> EstimateResult:
    """Feynman-Kac functional E[exp(-int k/2) f(X_t); t < lifetime].

    ``potential`` maps canonical coordinates to values; ``None`` means the
    zero potential, in which case the result coincides bitwise with
    ``heat_semigroup_mc`` under the same configuration.
    """
    out = functional_run(model, x0, t, cfg, potential=potential)
    weight = (np.exp(-0.5 * out["potential_integral"])
              if potential is not None else 1.0)
    vals = weight * f(out["canon_final"]) * out["alive"]
    mean, err = mean_and_stderr(vals)
    return EstimateResult(float(mean), float(err), vals.size, cfg.seed, cfg.dt)


def bel_gradient_vector(model: ManifoldModel, fs: Sequence[TestFunction],
                        x0, t: float, cfg: SimConfig):
    """Derivative-formula gradient estimates for several observables at once.

    Returns ``(results, frame0)``: per observable the estimated gradient in
    the components of the starting orthonormal frame (whose Euclidean norm is
    the metric norm of the gradient), plus the frame itself for converting
    chart vectors.  The estimator averages f(X_t) (1/t) int <Q dW> with dead
    paths contributing zero.
    """
    if t <= 0:
        raise ZeroTimeError("derivative estimator requires t > 0")
    out = functional_run(model, x0, t, cfg, need_bel=True)
    frame0 = initial_frame(model, x0)
    results = []
    for f in fs:
        vals = (f(out["canon_final"]) * out["alive"])[:, None] * out["bel"] / t
        mean, err = mean_and_stderr(vals)
        results.append(EstimateResult(mean, err, vals.shape[0], cfg.seed, cfg.dt))
    return results, frame0


def bel_gradient(model: ManifoldModel, f: TestFunction, x0, xi, t: float,
                 cfg: SimConfig) -> EstimateResult:
    """Directional derivative <grad P_t f(x0), xi> by the derivative formula.

    ``xi`` is a chart tangent vector at x0; it is pulled into the starting
    frame basis where the anti-development increments live.
    """
    if t <= 0:
        raise ZeroTimeError("derivative estimator requires t > 0")
    out = functional_run(model, x0, t, cfg, need_bel=True)
    frame0 = initial_frame(model, x0)
    xi_frame = nu.solve_mat_vec(frame0, np.asarray(xi, float))
    ip = out["bel"] @ xi_frame
    vals = f(out["canon_final"]) * out["alive"] * ip / t
    mean, err = mean_and_stderr(vals)
    return EstimateResult(float(mean), float(err), vals.size, cfg.seed, cfg.dt)


def negative_part(potential):
    """Map a potential to its negative part k^- = max(-k, 0)."""
    def neg(c):
        return np.maximum(-np.asarray(potential(c), float), 0.0)
    return neg


@dataclass
class AnchorReport:
    """Anchor-supremum estimate of a path functional.

    The supremum over the whole manifold is approximated from below by a
    finite anchor set; ``value`` is the max over anchors.
    """

    value: float
    anchors: np.ndarray
    per_anchor: list = field(default_factory=list)

    def as_dict(self):
        return {"value": self.value,
                "anchors": np.asarray(self.anchors).tolist(),
                "per_anchor": [r.as_dict() for r in self.per_anchor]}


def default_anchors(model: ManifoldModel, n: int = 32) -> np.ndarray:
    """Quasi-random anchor points in the model's chart box (Halton set)."""
    from scipy.stats import qmc

    lo, hi = model.chart_box()
    sampler = qmc.Halton(d=model.dim, scramble=False)
    pts = sampler.random(n)
    return lo + pts * (hi - lo)


def exp_integrability_ct(model: ManifoldModel, potential, t: float,
                         anchors, cfg: SimConfig) -> AnchorReport:
    """Anchor-sup of E[exp(int k^-/2); t < lifetime] (a lower estimate of the
    exponential moment supremum)."""
    anchors = np.atleast_2d(np.asarray(anchors, float))
    if anchors.size == 0:
        raise ConfigError("anchor set must be nonempty")
    kneg = negative_part(potential) if potential is not None else None
    per = []
    for i, a in enumerate(anchors):
        sub = cfg.replace(seed=cfg.seed + 7919 * i)
        if kneg is None or t == 0.0:
            out = functional_run(model, a, t, sub)
            vals = out["alive"].astype(float)
        else:
            out = functional_run(model, a, t, sub,
                                 potential=lambda c: -kneg(c))
            vals = np.exp(-0.5 * out["potential_integral"]) * out["alive"]
        mean, err = mean_and_stderr(vals)
        per.append(EstimateResult(float(mean), float(err), vals.size,
                                  sub.seed, sub.dt))
    best = max(r.value for r in per)
    return AnchorReport(value=float(best), anchors=anchors, per_anchor=per)


def l1_gradient_check(model: ManifoldModel, f: TestFunction, potential, x0,
                      t: float, cfg: SimConfig):
    """Gradient bound |grad P_t f| <= E[exp(-int k/2) |grad f|(X_t); alive].

    Both sides come from the same ensemble (common random numbers).  Returns
    ``(lhs, rhs, passed, details)``.
    """
    if f.grad_norm is None:
        raise ConfigError("observable needs an analytic gradient evaluator")
    out = functional_run(model, x0, t, cfg, potential=potential, need_bel=True)
    grad_vals = (f(out["canon_final"]) * out["alive"])[:, None] * out["bel"] / t
    gmean, gerr = mean_and_stderr(grad_vals)
    lhs = float(np.linalg.norm(gmean))
    lhs_err = float(np.linalg.norm(gerr))
    weight = (np.exp(-0.5 * out["potential_integral"])
              if potential is not None else 1.0)
    rhs_vals = weight * f.grad_norm(out["canon_final"]) * out["alive"]
    rhs, rhs_err = mean_and_stderr(rhs_vals)
    rhs, rhs_err = float(rhs), float(rhs_err)
    tol = 3.0 * math.hypot(lhs_err, rhs_err)
    details = {"lhs": lhs, "rhs": rhs, "lhs_stderr": lhs_err,
               "rhs_stderr": rhs_err, "n": int(out["alive"].size)}
    return lhs, rhs, bool(lhs <= rhs + tol), details


def lipschitz_smoothing_bound(model: ManifoldModel, potential, t: float,
                              anchors, cfg: SimConfig):
    """Smoothing bound sqrt(8) t^{-1/2} sup_x E[exp(int k^-/2)] (anchor sup).

    Returns ``(bound, report)``.
    """
    if t <= 0:
        raise ZeroTimeError("smoothing bound requires t > 0")
    report = exp_integrability_ct(model, potential, t, anchors, cfg)
    bound = math.sqrt(8.0) / math.sqrt(t) * report.value
    return bound, report


def lipschitz_quotient_check(model: ManifoldModel, f: TestFunction, t: float,
                             cfg: SimConfig, n_pairs: int = 10_000,
                             box=None, pair_seed: int = 0):
    """Empirical difference quotients of P_t f against the smoothing bound.

    Supported on flat models, where one displacement ensemble serves every
    evaluation point exactly (translation invariance makes this the common
    random numbers construction across all pairs).  Returns
    ``(max_quotient, n_violations, bound)``.
    """
    if model.kind != "euclidean":
        raise ConfigError("difference-quotient sampling needs a flat model")
    d = model.dim
    lo, hi = model.chart_box() if box is None else box
    out = functional_run(model, np.zeros(d), t, cfg)
    disp = out["canon_final"]          # displacement vectors from the origin
    alive = out["alive"]
    rng = np.random.Generator(np.random.Philox(key=np.array(
        [cfg.seed ^ 0xA5A5A5A5, pair_seed], dtype=np.uint64)))
    us = lo + rng.random((n_pairs, d)) * (hi - lo)
    vs = lo + rng.random((n_pairs, d)) * (hi - lo)
    dist = np.linalg.norm(us - vs, axis=1)
    keep = dist > 1e-9
    us, vs, dist = us[keep], vs[keep], dist[keep]
    bound = math.sqrt(8.0) / math.sqrt(t) * f.sup_norm
    quots = np.empty(us.shape[0])
    chunk = 256
    for i in range(0, us.shape[0], chunk):
        ue = us[i:i + chunk, None, :] + disp[None, :, :]
        ve = vs[i:i + chunk, None, :] + disp[None, :, :]
        pu = (f(ue) * alive).mean(axis=1)
        pv = (f(ve) * alive).mean(axis=1)
        quots[i:i + chunk] = np.abs(pu - pv) / dist[i:i + chunk]
    violations = int(np.sum(quots > bound))
    return float(quots.max()), violations, bound


# -- grid-based norm checks ---------------------------------------------------


@dataclass
class QuadratureGrid:
    """Lattice on the chart box with Riemannian volume weights."""

    points: np.ndarray
    weights: np.ndarray

    @staticmethod
    def on_box(model: ManifoldModel, per_dim: int = 33, box=None
               ) -> "QuadratureGrid":
        lo, hi = model.chart_box() if box is None else box
        axes = [np.linspace(lo[i], hi[i], per_dim) for i in range(model.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        cell = np.prod([(hi[i] - lo[i]) / (per_dim - 1)
                        for i in range(model.dim)])
        weights = model.sqrt_det_g(pts) * cell
        return QuadratureGrid(points=pts, weights=weights)

    def lp_norm(self, values: np.ndarray, p: float) -> float:
        return float(np.sum(self.weights * np.abs(values) ** p) ** (1.0 / p))


def lp_operator_check(model: ManifoldModel, f: TestFunction, t: float,
                      cfg: SimConfig, *, p: float = 2.0,
                      potential_const: float | None = None,
                      grid: QuadratureGrid | None = None,
                      bound_delta: float = 2.0, bound_c: float | None = None):
    """Discrete L^p norm growth of the Schrodinger semigroup on a grid.

    For a constant potential the Feynman-Kac weight is deterministic and the
    semigroup values on all grid nodes reuse a single flat displacement
    ensemble; callable potentials take a per-node ensemble instead (slow).
    Returns a report dict with the norm ratio and the pass flag against
    delta exp(C t) with the supplied (delta, C).
    """
    if not 1.0 < p < math.inf:
        raise ConfigError("p must lie in (1, infinity)")
    if grid is None:
        grid = QuadratureGrid.on_box(model)
    f_vals = f(model.canonical(grid.points))
    norm_f = grid.lp_norm(f_vals, p)
    if norm_f == 0.0:
        raise QuadratureError("grid does not cover the support of f")
    if model.kind == "euclidean":
        out = functional_run(model, np.zeros(model.dim), t, cfg)
        disp, alive = out["canon_final"], out["alive"]
        sf_vals = np.empty(grid.points.shape[0])
        chunk = 128
        for i in range(0, grid.points.shape[0], chunk):
            pts = grid.points[i:i + chunk, None, :] + disp[None, :, :]
            sf_vals[i:i + chunk] = (f(pts) * alive).mean(axis=1)
    else:
        sf_vals = np.empty(grid.points.shape[0])
        for i, xg in enumerate(grid.points):
            sub = cfg.replace(seed=cfg.seed + 104729 * i)
            out = functional_run(model, xg, t, sub)
            sf_vals[i] = float((f(out["canon_final"]) * out["alive"]).mean())
    if potential_const is not None:
        sf_vals = sf_vals * math.exp(-0.5 * potential_const * t)
    norm_sf = grid.lp_norm(sf_vals, p)
    ratio = norm_sf / norm_f
    if bound_c is None:
        # a constant potential grows the norm by exactly exp(-k t / 2)
        bound_c = max(0.0, -0.5 * (potential_const or 0.0))
    bound = bound_delta * math.exp(bound_c * t)
    return {
        "p": p, "t": t, "norm_f": norm_f, "norm_sf": norm_sf,
        "ratio": float(ratio), "bound_delta": bound_delta, "bound_c": bound_c,
        "bound": float(bound), "passed": bool(ratio <= bound * 1.0001),
    }


def bel_functional_on_grid(model: ManifoldModel, f: TestFunction,
                           vector_field, t: float, grid: QuadratureGrid,
                           cfg: SimConfig) -> np.ndarray:
    """Derivative functional E[f(X_t) int <Q V(x), dW>] on grid nodes.

    Nodes where the field vanishes are exact zeros without simulation.
    """
    if t <= 0:
        raise ZeroTimeError("derivative functional requires t > 0")
    vals = np.zeros(grid.points.shape[0])
    for i, xg in enumerate(grid.points):
        v = np.asarray(vector_field(xg), float)
        if not np.any(v):
            continue
        sub = cfg.replace(seed=cfg.seed + 104729 * i)
        out = functional_run(model, xg, t, sub, need_bel=True)
        frame0 = initial_frame(model, xg)
        v_frame = nu.solve_mat_vec(frame0, v)
        vals[i] = float(np.mean(f(out["canon_final"]) * out["alive"]
                                * (out["bel"] @ v_frame)))
    return vals
