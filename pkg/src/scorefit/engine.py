"""Score-guided refinement: invert to a small noise level, then denoise with guidance.

Every driver reduces to :func:`run_guided`, which advances a batch of
latents in lockstep on one timestep grid. Targets are partitioned into
groups sharing a guidance loss (one target per group for independent fits,
all views or frames in one group for the coupled drivers). Early stopping
is decided per group.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import guidance as gd
from .camera import Camera
from .denoiser import NoisePredictor
from .diffusion import ddim_invert, ddim_step, predict_x0, timestep_grid
from .errors import ConfigError, DimensionMismatch, FormatError, NonFinite, TooFewFrames, TooFewViews

STOP_THRESHOLD = "threshold"
STOP_SMAX = "S_max"


@dataclass(frozen=True)
class EngineConfig:
    tau: int = 50
    dt: int = 2
    s_max: int = 10
    lambda_thr: float = 1e-5
    stop_mode: str = "absolute"
    tau_mv: int = 100
    dt_mv: int = 10
    weights: gd.GuidanceWeights = field(default_factory=gd.GuidanceWeights)
    optimize_camera: bool = True
    gamma_step: float = 1.0  # fraction of the damped Gauss-Newton step
    gamma_iters: int = 10
    gamma_damping: float = 1e-3

    def validate(self, T=1000):
        for tau, dt in ((self.tau, self.dt), (self.tau_mv, self.dt_mv)):
            if not 0 < dt <= tau <= T:
                raise ConfigError(f"need 0 < dt <= tau <= T, got dt={dt}, tau={tau}, T={T}")
        if self.s_max < 1:
            raise ConfigError("s_max must be >= 1")
        if not self.lambda_thr > 0:
            raise ConfigError("lambda_thr must be positive")
        if self.stop_mode not in ("absolute", "relative"):
            raise ConfigError(f"stop_mode must be 'absolute' or 'relative', got {self.stop_mode!r}")
        if self.gamma_iters < 0 or self.gamma_step < 0:
            raise ConfigError("camera step settings must be nonnegative")
        return self


@dataclass
class RefineResult:
    pose: np.ndarray  # (n, 144) final latents
    cameras: list  # final camera per target (None when unused)
    loss_trace: list  # per group: list of guidance losses at every inner step evaluated
    outer_losses: list  # per group: loss at the estimate entering each outer iteration, plus the final one
    stop_reason: list  # per group
    iterations: list  # per group: outer iterations run
    groups: list = field(default_factory=list)

    def for_target(self, i):
        g = next(k for k, idx in enumerate(self.groups) if i in idx)
        return {
            "pose": self.pose[i],
            "camera": self.cameras[i],
            "loss_trace": list(self.loss_trace[g]),
            "outer_losses": list(self.outer_losses[g]),
            "stop_reason": self.stop_reason[g],
            "iterations": self.iterations[g],
        }


def _stop(cfg, loss, prev):
    if cfg.stop_mode == "absolute":
        return loss < cfg.lambda_thr
    if prev is None:
        return False
    return abs(prev - loss) / max(abs(prev), 1e-300) < cfg.lambda_thr


def run_guided(sched, eps_fn, x_init, guide, cfg, groups=None, tau=None, dt=None, on_step=None, guided=True):
    """Outer/inner refinement loop.

    ``guide(x0_hat, t, active)`` returns ``(group_losses (G,), rho_grad (n, D))``
    where ``rho_grad`` already carries the step sizes. It may update state
    such as camera translations; ``t`` is ``None`` for bookkeeping calls that
    must not update state. With ``guided=False`` a single unguided pass runs
    without early stopping: further passes would only repeat the round trip.
    """
    x_cur = np.array(np.atleast_2d(x_init), dtype=np.float64)
    n = x_cur.shape[0]
    groups = [list(g) for g in (groups if groups is not None else [[i] for i in range(n)])]
    G = len(groups)
    tau = cfg.tau if tau is None else tau
    dt = cfg.dt if dt is None else dt
    grid = timestep_grid(tau, dt)
    down = list(zip(grid[::-1][:-1], grid[::-1][1:]))

    member = np.zeros((G, n), dtype=bool)
    for g, idx in enumerate(groups):
        member[g, idx] = True
    active = np.ones(G, dtype=bool)
    reasons = [STOP_SMAX] * G
    iters = [0] * G
    traces = [[] for _ in range(G)]
    prev = [None] * G

    losses0, _ = guide(x_cur, None, active)
    outer = [[float(v)] for v in losses0]

    for s in range(cfg.s_max if guided else 1):
        rows = member[active].any(axis=0)
        x = ddim_invert(sched, eps_fn, x_cur[rows], tau, dt)
        x_full = x_cur.copy()
        x_full[rows] = x
        x = x_full
        for g in np.flatnonzero(active):
            iters[g] = s + 1
        for t, t_prev in down:
            rows = member[active].any(axis=0)
            eps = np.zeros_like(x)
            eps[rows] = eps_fn(x[rows], t)
            x0_hat = predict_x0(sched, x, t, eps)
            losses, rho_grad = guide(x0_hat, t, active)
            for g in np.flatnonzero(active):
                val = float(losses[g])
                traces[g].append(val)
                if guided and _stop(cfg, val, prev[g]):
                    active[g] = False
                    reasons[g] = STOP_THRESHOLD
                    idx = groups[g]
                    x_cur[idx] = x0_hat[idx]
                    outer[g].append(val)
                prev[g] = val
            rows = member[active].any(axis=0)
            if not rows.any():
                break
            eps_mod = eps[rows] + sched.sqrt_1mab(t) / sched.sqrt_ab(t) * rho_grad[rows]
            x[rows] = ddim_step(sched, x[rows], t, t_prev, eps_mod)
            if not np.all(np.isfinite(x[rows])):
                raise NonFinite(f"non-finite latent at outer iteration {s + 1}, t={t_prev}", (s + 1, t_prev))
            if on_step is not None:
                on_step(s, t, x)
        rows = member[active].any(axis=0)
        x_cur[rows] = x[rows]
        if rows.any():
            losses, _ = guide(x_cur, None, active)
            for g in np.flatnonzero(active):
                outer[g].append(float(losses[g]))
        if not active.any():
            break
    return x_cur, traces, outer, reasons, iters, groups


# ------------------------------------------------------------------ guidance


class KeypointGuide:
    """Reprojection guidance for independent targets, with optional camera updates."""

    def __init__(self, model, betas, cams, y_kp, y_conf, rho, cfg, backend=None):
        self.n = len(cams)
        betas = np.atleast_2d(np.asarray(betas, dtype=np.float64))
        if betas.shape[0] == 1:
            betas = np.repeat(betas, self.n, axis=0)
        self.maps = {}
        self.map_index = []
        for b in betas:
            key = b.tobytes()
            if key not in self.maps:
                self.maps[key] = model.joint_map(b)
            self.map_index.append(key)
        self.focal, self.pp, self.gamma = gd.camera_arrays(list(cams), self.n)
        self.y_kp = np.asarray(y_kp, dtype=np.float64).reshape(self.n, -1, 2)
        self.y_conf = np.asarray(y_conf, dtype=np.float64).reshape(self.n, -1)
        if np.any(self.y_conf < 0) or np.any(self.y_conf > 1):
            raise FormatError("keypoint confidences must lie in [0, 1]")
        self.rho = rho
        self.cfg = cfg
        self.backend = backend

    def joints_and_jacobian(self, x, rows):
        K = self.y_kp.shape[1]
        joints = np.empty((len(rows), K, 3))
        jac = np.empty((len(rows), 3 * K, x.shape[1]))
        keys = [self.map_index[i] for i in rows]
        for key in dict.fromkeys(keys):
            sel = [j for j, k in enumerate(keys) if k == key]
            joints[sel], jac[sel] = self.maps[key].joints_and_jacobian(x[[rows[j] for j in sel]], backend=self.backend)
        return joints, jac

    def evaluate(self, x, rows, update_camera):
        rows = list(rows)
        joints, jac = self.joints_and_jacobian(x, rows)
        args = (self.focal[rows], self.pp[rows], self.gamma[rows], self.y_kp[rows], self.y_conf[rows])
        loss, gx, _, _, _ = gd.reprojection_terms(joints, jac, *args)
        if update_camera and self.cfg.optimize_camera and self.cfg.gamma_iters:
            self.gamma[rows] = self._fit_gamma(joints, rows)
        return loss, gx

    def _fit_gamma(self, joints, rows):
        gamma = self.gamma[rows].copy()
        f, pp, y, w = self.focal[rows], self.pp[rows], self.y_kp[rows], self.y_conf[rows]
        for _ in range(self.cfg.gamma_iters):
            p = joints + gamma[:, None, :]
            z = p[..., 2]
            uv = f[:, None, None] * p[..., :2] / z[..., None] + pp[:, None, :]
            r = uv - y
            Jp = np.zeros(p.shape[:-1] + (2, 3))
            Jp[..., 0, 0] = Jp[..., 1, 1] = f[:, None] / z
            Jp[..., 0, 2] = -f[:, None] * p[..., 0] / z**2
            Jp[..., 1, 2] = -f[:, None] * p[..., 1] / z**2
            H = np.einsum("nk,nkia,nkib->nab", w, Jp, Jp)
            g = np.einsum("nk,nkia,nki->na", w, Jp, r)
            H = H + self.cfg.gamma_damping * np.trace(H, axis1=1, axis2=2)[:, None, None] / 3 * np.eye(3)
            ok = np.trace(H, axis1=1, axis2=2) > 0
            step = np.zeros_like(gamma)
            if ok.any():
                step[ok] = np.linalg.solve(H[ok], g[ok][..., None])[..., 0]
            new = gamma - self.cfg.gamma_step * step
            # never let the body cross the camera plane
            min_z = (joints[..., 2] + new[:, None, 2]).min(axis=1)
            new[min_z <= 0.05, 2] = gamma[min_z <= 0.05, 2]
            gamma = new
        return gamma

    def cameras(self, template):
        return [replace(c, translation=tuple(float(v) for v in g)) for c, g in zip(template, self.gamma)]


def _observation_arrays(obs, n):
    if obs is None:
        return None, None
    if isinstance(obs, gd.KeypointObservation):
        y, w = obs.y_kp, obs.y_conf
    else:
        y, w = obs
    y = np.asarray(y, dtype=np.float64).reshape(n, -1, 2)
    w = np.asarray(w, dtype=np.float64).reshape(n, -1)
    return y, w


def _as_cams(cam, n):
    if cam is None:
        return None
    if isinstance(cam, Camera):
        return [cam] * n
    cams = list(cam)
    if len(cams) != n:
        raise DimensionMismatch(f"{len(cams)} cameras for {n} targets")
    return cams


def _batch_inputs(x_reg, c):
    x = np.asarray(x_reg, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    c = np.asarray(c, dtype=np.float64)
    c = np.broadcast_to(c, (x.shape[0], c.shape[-1])) if c.ndim == 1 else c
    if c.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"{c.shape[0]} feature rows for {x.shape[0]} targets")
    return single, x, c


# ------------------------------------------------------------------ drivers


def _run_with_rows(sched, params, c, x, guide_fn, cfg, groups, tau, dt, guided=True):
    """Run the loop with a noise predictor whose conditioning follows active rows."""
    n = x.shape[0]
    member = np.zeros((len(groups), n), dtype=bool)
    for g, idx in enumerate(groups):
        member[g, idx] = True
    state = {"active": np.ones(len(groups), dtype=bool)}

    if callable(params):
        eps_fn = params
    else:

        def eps_fn(xs, t):
            rows = member[state["active"]].any(axis=0)
            cc = c if xs.shape[0] == n else c[rows]
            return NoisePredictor(params, cc)(xs, t)

    def guide(x0_hat, t, active):
        state["active"] = active
        return guide_fn(x0_hat, t, active, member)

    return run_guided(sched, eps_fn, x, guide, cfg, groups=groups, tau=tau, dt=dt, guided=guided)


def refine(params, sched, cfg, x_reg, c, obs=None, beta=None, model=None, cam=None, backend=None):
    """Fit independent targets to 2D keypoints.

    ``params`` is a denoiser parameter set or any ``eps_fn(x, t)`` callable.
    ``x_reg`` is one pose or a batch; ``obs`` holds keypoints and confidences
    per target; ``cam`` is one camera or one per target; ``beta`` is a shape
    vector or one per target. Without ``obs`` the loop runs unguided.
    """
    cfg.validate(sched.T)
    single, x, c = _batch_inputs(x_reg, c)
    n = x.shape[0]
    y, w = _observation_arrays(obs, n)
    cams = _as_cams(cam, n)
    rho = cfg.weights.rho_repr if cfg.weights.use_repr else 0.0
    kg = None
    if y is not None:
        if model is None or cams is None:
            raise ConfigError("keypoint guidance needs a body model and cameras")
        kg = KeypointGuide(model, np.zeros(model.n_shape) if beta is None else beta, cams, y, w, rho, cfg, backend)

    def guide_fn(x0_hat, t, active, member):
        G = member.shape[0]
        losses = np.zeros(G)
        grad = np.zeros_like(x0_hat)
        if kg is None:
            return losses, grad
        rows = np.flatnonzero(member[active].any(axis=0))
        if rows.size == 0:
            return losses, grad
        loss, gx = kg.evaluate(x0_hat, rows, update_camera=t is not None)
        full = np.zeros(x0_hat.shape[0])
        full[rows] = loss
        grad[rows] = rho * gx
        return member @ full, grad

    groups = [[i] for i in range(n)]
    guided = kg is not None and rho > 0
    xf, traces, outer, reasons, iters, groups = _run_with_rows(
        sched, params, c, x, guide_fn, cfg, groups, cfg.tau, cfg.dt, guided
    )
    cams_out = kg.cameras(cams) if kg is not None else (cams or [None] * n)
    res = RefineResult(xf, cams_out, traces, outer, reasons, iters, groups)
    if single:
        res.pose = xf[0]
    return res


def refine_multiview(params, sched, cfg, x_reg, c, obs=None, beta=None, model=None, cams=None, backend=None):
    """Refine ``N >= 2`` views of one person with cross-view body-pose consistency.

    Only the body-pose entries receive the consistency gradient. Optional
    per-view keypoints add reprojection guidance.
    """
    cfg.validate(sched.T)
    _, x, c = _batch_inputs(x_reg, c)
    N = x.shape[0]
    if N < 2:
        raise TooFewViews(f"multi-view refinement needs at least 2 views, got {N}")
    rho_mv = cfg.weights.rho_mv if cfg.weights.use_mv else 0.0
    rho_kp = cfg.weights.rho_repr if cfg.weights.use_repr else 0.0
    y, w = _observation_arrays(obs, N)
    cams = _as_cams(cams, N)
    kg = None
    if y is not None:
        kg = KeypointGuide(model, np.zeros(model.n_shape) if beta is None else beta, cams, y, w, rho_kp, cfg, backend)

    def guide_fn(x0_hat, t, active, member):
        grad = np.zeros_like(x0_hat)
        if not active[0]:
            return np.zeros(1), grad
        loss, gb = gd.loss_mv(x0_hat[:, gd.BODY_SLICE])
        grad[:, gd.BODY_SLICE] = rho_mv * gb
        if kg is not None:
            lk, gk = kg.evaluate(x0_hat, range(N), update_camera=t is not None)
            loss += float(lk.sum())
            grad += rho_kp * gk
        return np.array([loss]), grad

    guided = rho_mv > 0 or (kg is not None and rho_kp > 0)
    xf, traces, outer, reasons, iters, groups = _run_with_rows(
        sched, params, c, x, guide_fn, cfg, [list(range(N))], cfg.tau_mv, cfg.dt_mv, guided
    )
    cams_out = kg.cameras(cams) if kg is not None else (cams or [None] * N)
    return RefineResult(xf, cams_out, traces, outer, reasons, iters, groups)


def refine_sequence(params, sched, cfg, x_reg, c, obs=None, beta=None, model=None, cams=None, backend=None):
    """Refine ``N >= 2`` frames with temporal smoothness and optional keypoints."""
    cfg.validate(sched.T)
    _, x, c = _batch_inputs(x_reg, c)
    N = x.shape[0]
    if N < 2:
        raise TooFewFrames(f"sequence refinement needs at least 2 frames, got {N}")
    rho_t = cfg.weights.rho_temp if cfg.weights.use_temp else 0.0
    rho_kp = cfg.weights.rho_repr if cfg.weights.use_repr else 0.0
    y, w = _observation_arrays(obs, N)
    cams = _as_cams(cams, N)
    kg = None
    if y is not None:
        kg = KeypointGuide(model, np.zeros(model.n_shape) if beta is None else beta, cams, y, w, rho_kp, cfg, backend)

    def guide_fn(x0_hat, t, active, member):
        if not active[0]:
            return np.zeros(1), np.zeros_like(x0_hat)
        loss, g = gd.loss_temp(x0_hat)
        grad = rho_t * g
        if kg is not None:
            lk, gk = kg.evaluate(x0_hat, range(N), update_camera=t is not None)
            loss += float(lk.sum())
            grad = grad + rho_kp * gk
        return np.array([loss]), grad

    guided = rho_t > 0 or (kg is not None and rho_kp > 0)
    xf, traces, outer, reasons, iters, groups = _run_with_rows(
        sched, params, c, x, guide_fn, cfg, [list(range(N))], cfg.tau, cfg.dt, guided
    )
    cams_out = kg.cameras(cams) if kg is not None else (cams or [None] * N)
    return RefineResult(xf, cams_out, traces, outer, reasons, iters, groups)
