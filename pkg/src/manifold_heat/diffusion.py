"""Path ensembles: Euler-Maruyama simulation of Brownian motion in chart
coordinates, stochastic frame transport, the curvature damping process, and
the path statistics built on them.

The chart SDE is dX^k = b^k dt + s dW with s s^T = g^{-1} and the Ito drift
b^k = -1/2 g^{ij} Gamma^k_{ij}, extended by -(grad Phi)^k on weighted models.
Frames follow the transport equation with a Heun (midpoint) step and are
re-orthonormalized in the metric inner product after every step; the damping
matrices are advanced by Q <- Q expm(-dt/2 R~) with R~ = F^T Ric F the
frame-pulled-back curvature.

Every path owns a counter-based random stream keyed by (seed, path_id), so a
path's realization is independent of ensemble size, block layout, and worker
count.  Ensembles are processed in fixed-size blocks of paths; per-block
results are concatenated in path order, which keeps reruns byte-identical.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numutils as nu
from .errors import ConfigError, DeadPathError, InsufficientSamples
from .geometry.base import ManifoldModel, TangentVector
from .results import EstimateResult, mean_and_stderr

DEFAULT_BLOCK = 16384
_CHUNK_STEPS = 256


@dataclass
class SimConfig:
    """Numerical parameters of a path ensemble."""

    dt: float
    horizon: float
    r_max: float = 50.0
    seed: int = 0
    n_paths: int = 1
    block_size: int = DEFAULT_BLOCK
    workers: int = 1

    def validate(self) -> None:
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.horizon < 0:
            raise ConfigError("horizon must be nonnegative")
        if self.horizon > 0 and self.dt > self.horizon + 1e-15:
            raise ConfigError("dt exceeds horizon")
        if self.n_paths < 1:
            raise ConfigError("path count must be at least 1")

    def steps_to(self, t: float) -> int:
        n = int(round(t / self.dt))
        if abs(n * self.dt - t) > 1e-9 * max(1.0, t):
            raise ConfigError(f"time {t} is not a multiple of dt={self.dt}")
        return n

    def replace(self, **kw) -> "SimConfig":
        d = self.__dict__.copy()
        d.update(kw)
        return SimConfig(**d)


@dataclass
class PathSample:
    """Full record of one simulated path."""

    times: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    anti_dev: np.ndarray
    alive: np.ndarray
    lifetime: float
    seed: int
    path_id: int
    q_mats: np.ndarray | None = None
    canonical: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_alive(self) -> bool:
        return bool(self.alive[-1])

    def last_alive_index(self) -> int:
        idx = np.where(self.alive)[0]
        if idx.size == 0:
            raise DeadPathError("path died before the first step")
        return int(idx[-1])


def _path_rng(seed: int, path_id: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, path_id & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _retry_rng(seed: int, path_id: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        key=np.array([seed ^ 0x9E3779B97F4A7C15, path_id], dtype=np.uint64),
        counter=np.array([step, 0, 0, 0], dtype=np.uint64)))


class BlockWalker:
    """Vectorized Euler-Maruyama state for one block of paths.

    Attributes of interest to observers after each step: ``x`` (current chart
    points), ``x_prev``, ``canon`` / ``canon_prev`` (canonical coordinates),
    ``alive``, ``last_dw`` (anti-development increments in the initial frame
    basis), ``q_prev`` / ``q`` (damping matrices), ``t``, ``step_index``.
    """

    def __init__(self, model: ManifoldModel, x0, cfg: SimConfig,
                 path_ids: np.ndarray, *, need_frames: bool = False,
                 need_q: bool = False):
        self.model = model
        self.cfg = cfg
        self.path_ids = np.asarray(path_ids)
        n = self.path_ids.size
        d = model.dim
        x0 = np.asarray(x0, float)
        if not bool(np.all(model.in_chart(np.atleast_2d(x0)))):
            raise ConfigError("start point outside chart")
        self.x = np.tile(x0, (n, 1))
        self.x_prev = self.x.copy()
        self.alive = np.ones(n, dtype=bool)
        self.lifetime = np.full(n, np.inf)
        self.chart_state = model.new_chart_state(n)
        self.weighted = model.weight is not None
        self.need_q = need_q
        self.need_frames = need_frames or need_q
        if self.need_frames:
            g0 = model.metric(self.x)
            self.frames = nu.noise_factor(g0)
            self.frame_defect_max = 0.0
        else:
            self.frames = None
        self.q = (np.broadcast_to(np.eye(d), (n, d, d)).copy()
                  if need_q else None)
        self.q_prev = self.q.copy() if need_q else None
        self.last_dw = np.zeros((n, d))
        self.t = 0.0
        self.step_index = 0
        self._canon = None
        self._rngs = [_path_rng(cfg.seed, int(pid)) for pid in self.path_ids]
        self._chunk = None
        self._chunk_pos = 0

    @property
    def canon(self):
        """Canonical coordinates of the current points (computed lazily).

        Step observers that need values at both ends of a step cache the
        previous array themselves; the walker only serves the current one.
        """
        if self._canon is None:
            self._canon = self.model.canonical(self.x, self.chart_state)
        return self._canon

    # -- noise ------------------------------------------------------------

    def _refill(self, steps_left: int) -> None:
        take = min(_CHUNK_STEPS, steps_left)
        d = self.model.dim
        chunk = np.empty((len(self._rngs), take, d))
        for i, rng in enumerate(self._rngs):
            chunk[i] = rng.standard_normal((take, d))
        self._chunk = chunk * math.sqrt(self.cfg.dt)
        self._chunk_pos = 0

    def next_noise(self, steps_left: int) -> np.ndarray:
        if self._chunk is None or self._chunk_pos >= self._chunk.shape[1]:
            self._refill(steps_left)
        z = self._chunk[:, self._chunk_pos, :]
        self._chunk_pos += 1
        return z

    # -- stepping ----------------------------------------------------------

    def step(self, z: np.ndarray) -> None:
        model, cfg = self.model, self.cfg
        dt = cfg.dt
        x = self.x
        self.x_prev = x.copy()
        self._canon = None

        fast = model.diag_sde(x)
        if fast is not None:
            drift, sig_diag = fast
            noise = z if sig_diag is None else sig_diag * z
            dx = noise if drift is None else drift * dt + noise
            if self.weighted:
                g_inv_diag = (np.ones_like(z) if sig_diag is None
                              else sig_diag ** 2)
                dx = dx - g_inv_diag * model.weight.dphi(x) * dt
            gamma = model.christoffel(x) if self.need_frames or self.need_q \
                else None
        else:
            g = model.metric(x)
            gamma = model.christoffel(x)
            g_inv = nu.inv(g)
            sigma = nu.noise_factor(g)
            drift = -0.5 * np.einsum("bij,bkij->bk", g_inv, gamma)
            if self.weighted:
                drift -= (g_inv @ model.weight.dphi(x)[..., None])[..., 0]
            noise = (sigma @ z[..., None])[..., 0]
            dx = drift * dt + noise

        if self.need_q:
            self.q_prev = self.q
            ric = (model.weighted_ricci(x) if self.weighted else model.ricci(x))
            r_frame = nu.sym(np.swapaxes(self.frames, -1, -2) @ ric @ self.frames)
            step_exp = nu.expm_sym(-0.5 * dt * r_frame)
            q_new = self.q @ step_exp

        if self.need_frames:
            self.last_dw = np.where(self.alive[:, None],
                                    nu.solve_mat_vec(self.frames, noise), 0.0)
            gamma_dx = np.einsum("bkij,bi->bkj", gamma, dx)
            d1 = -(gamma_dx @ self.frames)

        x_new = np.where(self.alive[:, None], x + dx, x)
        nan_mask = ~np.isfinite(x_new).all(axis=1)
        x_new[nan_mask] = x[nan_mask]

        if self.need_frames:
            gamma_new_dx = np.einsum("bkij,bi->bkj", model.christoffel(x_new), dx)
            d2 = -(gamma_new_dx @ (self.frames + d1))
            f_new = np.where(self.alive[:, None, None],
                             self.frames + 0.5 * (d1 + d2), self.frames)
        else:
            f_new = None

        x_new, f_new, self.chart_state, exited = model.chart_fix(
            x_new, f_new, self.chart_state)
        exited = exited & self.alive & ~nan_mask
        if np.any(exited):
            exited = self._retry_exited(exited, x_new, f_new)

        newly_dead = self.alive & (exited | nan_mask
                                   | (model.radial_coordinate(x_new) > cfg.r_max))
        if np.any(newly_dead):
            x_new[newly_dead] = self.x_prev[newly_dead]
            self.lifetime[newly_dead] = self.t + dt
            self.alive = self.alive & ~newly_dead
            if self.need_frames:
                self.last_dw[newly_dead] = 0.0

        if self.need_frames:
            g_new = model.metric(x_new)
            f_new = np.where(self.alive[:, None, None],
                             nu.gram_schmidt(f_new, g_new), f_new)
            self.frames = f_new
        if self.need_q:
            self.q = np.where(self.alive[:, None, None], q_new, self.q)

        self.x = x_new
        self.t += dt
        self.step_index += 1

    def _retry_exited(self, exited: np.ndarray, x_new: np.ndarray,
                      f_new: np.ndarray | None) -> np.ndarray:
        """Redo offending steps as four quarter-steps with fresh noise.

        Chart exits at sane step sizes are rare tail events; each retry draws
        from a dedicated stream keyed by (seed, path_id, step) so that the
        main per-path streams stay aligned across runs.
        """
        model, cfg = self.model, self.cfg
        still = np.zeros_like(exited)
        for i in np.where(exited)[0]:
            rng = _retry_rng(cfg.seed, int(self.path_ids[i]), self.step_index)
            ok = False
            for _attempt in range(4):
                pos = self.x_prev[i].copy()
                frame = self.frames[i].copy() if self.need_frames else None
                dead = False
                for _sub in range(4):
                    sub_dt = cfg.dt / 4.0
                    z = rng.standard_normal(model.dim) * math.sqrt(sub_dt)
                    g = model.metric(pos)
                    gam = model.christoffel(pos)
                    drift = -0.5 * np.einsum("ij,kij->k", nu.inv(g), gam)
                    if self.weighted:
                        drift -= nu.inv(g) @ model.weight.dphi(pos)
                    dx = drift * sub_dt + nu.noise_factor(g) @ z
                    nxt = pos + dx
                    if not bool(np.all(model.in_chart(nxt[None]))):
                        dead = True
                        break
                    if frame is not None:
                        d1 = -np.einsum("kij,i,ja->ka", gam, dx, frame)
                        gam2 = model.christoffel(nxt)
                        d2 = -np.einsum("kij,i,ja->ka", gam2, dx, frame + d1)
                        frame = frame + 0.5 * (d1 + d2)
                    pos = nxt
                if not dead:
                    x_new[i] = pos
                    if frame is not None:
                        f_new[i] = frame
                    ok = True
                    break
            if not ok:
                still[i] = True
        return still

    def update_frame_defect(self) -> None:
        if self.frames is None or not np.any(self.alive):
            return
        g = self.model.metric(self.x[self.alive])
        defect = nu.frame_defect(self.frames[self.alive], g)
        self.frame_defect_max = max(self.frame_defect_max, float(defect.max()))


def run_blocks(model: ManifoldModel, x0, cfg: SimConfig, n_steps: int,
               observer_factory, *, need_frames: bool = False,
               need_q: bool = False):
    """Run the ensemble in path blocks, collecting per-block observer output.

    ``observer_factory(walker)`` returns an object with ``after_step(walker)``
    and ``finish(walker) -> dict of per-path arrays``.  The per-path arrays of
    all blocks are concatenated in path-id order, so results do not depend on
    block size or worker count beyond float reassociation inside reductions.
    """
    cfg.validate()
    ids = np.arange(cfg.n_paths)
    blocks = [ids[i:i + cfg.block_size]
              for i in range(0, cfg.n_paths, cfg.block_size)]

    def run_one(block_ids):
        walker = BlockWalker(model, x0, cfg, block_ids,
                             need_frames=need_frames, need_q=need_q)
        obs = observer_factory(walker)
        for k in range(n_steps):
            z = walker.next_noise(n_steps - k)
            walker.step(z)
            obs.after_step(walker)
        return obs.finish(walker)

    if cfg.workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_one, blocks))
    else:
        results = [run_one(b) for b in blocks]

    merged: dict[str, np.ndarray] = {}
    for key in results[0]:
        parts = [r[key] for r in results]
        merged[key] = np.concatenate(parts, axis=0) if parts[0].ndim else \
            np.array(parts)
    return merged


class NullObserver:
    def __init__(self, walker):
        pass

    def after_step(self, walker):
        pass

    def finish(self, walker):
        return {"alive": walker.alive.copy(),
                "x_final": walker.x.copy(),
                "canon_final": np.asarray(walker.canon).copy()}


class RecordingObserver:
    """Stores the entire trajectory of a (small) block; feeds PathSample."""

    def __init__(self, walker):
        self.points = [walker.x.copy()]
        self.canon = [np.asarray(walker.canon).copy()]
        self.alive = [walker.alive.copy()]
        self.frames = [walker.frames.copy()] if walker.frames is not None else None
        self.qs = [walker.q.copy()] if walker.q is not None else None
        self.dws = []

    def after_step(self, walker):
        self.points.append(walker.x.copy())
        self.canon.append(np.asarray(walker.canon).copy())
        self.alive.append(walker.alive.copy())
        if self.frames is not None:
            self.frames.append(walker.frames.copy())
        if self.qs is not None:
            self.qs.append(walker.q.copy())
        self.dws.append(walker.last_dw.copy())

    def finish(self, walker):
        out = {
            "points": np.stack(self.points, axis=1),
            "canon": np.stack(self.canon, axis=1),
            "alive_steps": np.stack(self.alive, axis=1),
            "anti_dev": np.stack(self.dws, axis=1),
            "lifetime": walker.lifetime.copy(),
        }
        if self.frames is not None:
            out["frames"] = np.stack(self.frames, axis=1)
        if self.qs is not None:
            out["q_mats"] = np.stack(self.qs, axis=1)
        return out


def simulate_bm(model: ManifoldModel, x0, cfg: SimConfig,
                path_id: int = 0, *, with_q: bool = True) -> PathSample:
    """Simulate one Brownian path with full trajectory storage.

    The realization depends only on (seed, path_id) and the numeric
    parameters, never on how many other paths an ensemble carries.
    """
    cfg.validate()
    n_steps = cfg.steps_to(cfg.horizon)
    one = cfg.replace(n_paths=1, block_size=1)
    times = np.arange(n_steps + 1) * cfg.dt
    if n_steps == 0:
        x0 = np.asarray(x0, float)
        d = model.dim
        g0 = model.metric(x0[None])
        return PathSample(times=times, points=x0[None].copy(),
                          frames=nu.noise_factor(g0),
                          anti_dev=np.zeros((0, d)),
                          alive=np.array([True]), lifetime=np.inf,
                          seed=cfg.seed, path_id=path_id,
                          q_mats=np.eye(d)[None] if with_q else None,
                          canonical=np.asarray(
                              model.canonical(x0[None], model.new_chart_state(1))))
    out = run_blocks(model, x0, one, n_steps,
                     RecordingObserver, need_frames=True, need_q=with_q)
    # run_blocks keys by block; index path 0 of the single block
    return PathSample(
        times=times,
        points=out["points"][0],
        frames=out["frames"][0],
        anti_dev=out["anti_dev"][0],
        alive=out["alive_steps"][0],
        lifetime=float(out["lifetime"][0]),
        seed=cfg.seed,
        path_id=path_id,
        q_mats=out["q_mats"][0] if with_q else None,
        canonical=out["canon"][0],
    )


def stochastic_parallel_transport(sample: PathSample, v,
                                  step: int | None = None) -> TangentVector:
    """Transport a start-point tangent vector along a stored path.

    Applies the frame map F_t F_0^{-1} in chart components at the requested
    step (the final one by default).
    """
    comps = v.components if isinstance(v, TangentVector) else np.asarray(v, float)
    if step is None:
        step = len(sample.times) - 1
    if step >= len(sample.times) or not sample.alive[step]:
        raise DeadPathError(f"path not alive at step {step}")
    f0 = sample.frames[0]
    ft = sample.frames[step]
    out = ft @ nu.solve_mat_vec(f0, np.asarray(comps, float))
    return TangentVector(base=sample.points[step].copy(), components=out)


def integrate_q(model: ManifoldModel, sample: PathSample) -> np.ndarray:
    """Damping matrices along a stored path via the per-step exponential
    update, using the frame-pulled-back (weighted) Ricci curvature."""
    n = len(sample.times)
    d = sample.points.shape[1]
    dt = float(sample.times[1] - sample.times[0]) if n > 1 else 0.0
    qs = np.empty((n, d, d))
    qs[0] = np.eye(d)
    weighted = model.weight is not None
    for i in range(n - 1):
        if not sample.alive[i + 1]:
            qs[i + 1:] = qs[i]
            break
        x = sample.points[i]
        ric = (model.weighted_ricci(x) if weighted else model.ricci(x))
        frame = sample.frames[i]
        r_frame = nu.sym(frame.T @ ric @ frame)
        qs[i + 1] = qs[i] @ nu.expm_sym(-0.5 * dt * r_frame)
    return qs


# -- ensemble statistics ----------------------------------------------------


class _SurvivalObserver:
    def __init__(self, walker, snap_steps):
        self.snap_steps = snap_steps
        self.records = {}
        if 0 in snap_steps:
            self.records[0] = walker.alive.copy()

    def after_step(self, walker):
        if walker.step_index in self.snap_steps:
            self.records[walker.step_index] = walker.alive.copy()

    def finish(self, walker):
        return {f"alive_{k}": v for k, v in self.records.items()}


def survival_probability(model: ManifoldModel, x0, t: float,
                         cfg: SimConfig) -> EstimateResult:
    """Fraction of paths alive at time t, with binomial standard error."""
    cfg.validate()
    if t > cfg.horizon + 1e-15:
        raise ConfigError("query time beyond configured horizon")
    n_steps = cfg.steps_to(t)
    if n_steps == 0:
        return EstimateResult(1.0, 0.0, cfg.n_paths, cfg.seed, cfg.dt)
    out = run_blocks(model, x0, cfg, n_steps,
                     lambda w: _SurvivalObserver(w, {n_steps}))
    alive = out[f"alive_{n_steps}"]
    p = float(alive.mean())
    stderr = math.sqrt(max(p * (1.0 - p), 0.0) / alive.size)
    return EstimateResult(p, stderr, alive.size, cfg.seed, cfg.dt)


class _ExitObserver:
    def __init__(self, walker, center, eps):
        self.center = np.asarray(center, float)
        self.eps = eps
        self.exit_step = np.full(walker.alive.shape, np.iinfo(np.int64).max,
                                 dtype=np.int64)

    def after_step(self, walker):
        dist = walker.model.canonical_distance(
            np.asarray(walker.canon), self.center)
        fresh = (dist > self.eps) & (self.exit_step == np.iinfo(np.int64).max)
        # a dead path has left the ball for good measure as well
        dead_now = (~walker.alive) & (self.exit_step == np.iinfo(np.int64).max)
        self.exit_step[fresh | dead_now] = walker.step_index

    def finish(self, walker):
        return {"exit_step": self.exit_step}


def exit_time_tail(model: ManifoldModel, x0, eps: float, t_grid,
                   cfg: SimConfig):
    """Empirical tail of the first exit time from the eps-ball around x0.

    Returns ``(table, c_hat)`` where table rows are (t, probability, stderr)
    and c_hat is the through-origin fit of log p against -1/t over the three
    smallest grid times with nonzero exit counts.
    """
    cfg.validate()
    if eps <= 0:
        raise ConfigError("ball radius must be positive")
    t_grid = np.sort(np.asarray(t_grid, float))
    n_steps = cfg.steps_to(float(t_grid[-1]))
    center = np.asarray(
        model.canonical(np.asarray(x0, float)[None],
                        model.new_chart_state(1)))[0]
    out = run_blocks(model, x0, cfg, n_steps,
                     lambda w: _ExitObserver(w, center, eps))
    exit_step = out["exit_step"]
    rows = []
    for t in t_grid:
        k = cfg.steps_to(float(t))
        p = float((exit_step <= k).mean())
        stderr = math.sqrt(max(p * (1 - p), 0.0) / exit_step.size)
        rows.append((float(t), p, stderr))
    nonzero = [(t, p) for t, p, _ in rows if p > 0.0]
    if not nonzero:
        raise InsufficientSamples("no exits observed on the whole grid")
    smallest = nonzero[:3]
    ts = np.array([t for t, _ in smallest])
    logs = np.array([math.log(p) for _, p in smallest])
    c_hat = -float(np.sum(logs / ts) / np.sum(1.0 / ts ** 2))
    return rows, c_hat
