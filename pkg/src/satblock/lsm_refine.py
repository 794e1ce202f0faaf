"""Per-track least-squares matching with geometric guidance.

For each non-reference observation ``j`` the window pixel at reference offset
``d = (dx, dy)`` is compared with the warped sample::

    f = Ib(Pb + d) - h0 - h1 * Ij(xj + tx + a1*dx + a2*dy, yj + ty + b1*dy + b2*dx)

where ``tx``/``ty`` are the current image-coordinate corrections (the affine
correction evaluated at the reference point). Before the first iteration
every window of image ``j`` is mapped linearly onto the mean and standard
deviation of the reference window (and both are centered on the reference
mean), so ``h0 = 0`` and ``h1 = 1`` start every refinement. Residuals stay
in the reference image's intensity units, which lets well-textured windows
outweigh the geometric terms while weak texture leans on them.

Steps are Gauss-Newton with Marquardt damping ``lambda * diag(N)``. Lambda
starts at 0. A step that does not lower the total weighted cost is retried
with ten times the damping. Accepted steps adjust lambda by the ratio of
actual to predicted cost reduction: below 0.25 it grows tenfold, above 0.75
it shrinks tenfold.
Both modes share the solver, so with zero geometric weight and a pinned
ground point the two produce identical iterates.

The geometric variant adds, for every active observation, the pixel
residual between its corrected point and the projection of the track's
ground point (weight ``W_reproj``) and a pseudo-observation pinning the
ground point to its adjusted position (weight ``W_VGCP``). Ground offsets
in that pseudo-observation are scaled to pixel-equivalent units with the
RMS projection Jacobian of the track.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import kernels
from .errors import UndefinedCorrelationError
from .geo_rpc import GroundPoint
from .raster import ImageRaster, window_offsets, window_stats
from .tracks import DIVERGED, Observation, Track, as_camera_set, corrected_point, reproj_stats, sym_condition

CONVERGED = "converged"

MAX_ITER = 30
SHIFT_TOL = 0.01
ZNCC_DROPS = 3
# a fall in mean ZNCC smaller than this is numerical drift, not degradation
ZNCC_DROP_TOL = 1e-3
SINGULAR_CONDITION = 1e14


@dataclass(frozen=True)
class WeightConfig:
    P: float = 0.5
    sigma: float = 2.0
    w: int = 11

    def __post_init__(self):
        if not self.P > 0:
            raise ValueError("P must be > 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.w < 3 or self.w % 2 == 0:
            raise ValueError(f"window size must be odd and >= 3, got {self.w}")


@dataclass(frozen=True)
class WeightSet:
    w_max: float
    w_reproj: float
    w_vgcp: float
    eps: float
    n: int


def compute_weights(stats, cfg: WeightConfig) -> WeightSet:
    """Geometric and ground-anchor weights of one track.

    ``stats`` is a :class:`~satblock.tracks.ReprojStats` (or anything with
    ``eps`` and ``n``).
    """
    n, eps = int(stats.n), float(stats.eps)
    if n < 2:
        raise ValueError(f"need n >= 2 rays, got {n}")
    w_max = cfg.P * cfg.w * cfg.w * (n - 1) / 2.0
    w_reproj = w_max * math.exp(-eps * eps / cfg.sigma)
    return WeightSet(w_max, w_reproj, w_max - w_reproj, eps, n)


@dataclass(frozen=True)
class LsmConfig:
    weights: WeightConfig = field(default_factory=WeightConfig)
    max_iter: int = MAX_ITER
    shift_tol: float = SHIFT_TOL
    zncc_drops: int = ZNCC_DROPS
    zncc_drop_tol: float = ZNCC_DROP_TOL
    weight_override: WeightSet | None = None
    pin_ground: bool = False
    record_history: bool = False

    @property
    def w(self) -> int:
        return self.weights.w


@dataclass
class LsmResult:
    track_id: object
    status: str
    iterations: int
    params: dict = field(default_factory=dict)  # image id -> (a0, a1, a2, b0, b1, b2, h0, h1)
    ground: GroundPoint | None = None
    deactivated: list = field(default_factory=list)
    zncc_before: float = float("nan")
    zncc_after: float = float("nan")
    zncc_scores: dict = field(default_factory=dict)
    eps_before: float = float("nan")
    weights: WeightSet | None = None
    reason: str = ""
    history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


class _ObsState:
    __slots__ = ("obs", "img", "mean", "inv_sd", "theta")

    def __init__(self, obs: Observation, img: np.ndarray, ref: Observation):
        self.obs = obs
        self.img = img
        cx, cy = corrected_point(obs, ref)
        self.theta = np.array([cx - obs.x, obs.a1, obs.a2, cy - obs.y, obs.b1, obs.b2, 0.0, 1.0])
        self.mean = 0.0
        self.inv_sd = 1.0

    def to_params(self, ref: Observation) -> tuple[float, ...]:
        tx, a1, a2, ty, b1, b2, h0, h1 = (float(v) for v in self.theta)
        return (tx - a1 * ref.x - a2 * ref.y, a1, a2, ty - b1 * ref.y - b2 * ref.x, b1, b2, h0, h1)


def _diverged(track: Track, reason: str, iterations: int = 0, **extra) -> LsmResult:
    return LsmResult(track.track_id, DIVERGED, iterations, ground=track.ground, reason=reason, **extra)


def _warped_zncc(ref_vals: np.ndarray, ref_sd: float, warped: np.ndarray) -> float:
    """ZNCC against the (already centered) reference samples."""
    c = warped - warped.mean()
    sd = math.sqrt(float(c @ c) / c.size)
    if sd <= 1e-12 * max(1.0, ref_sd):
        return 0.0
    return float(ref_vals @ c) / (c.size * sd * ref_sd)


def _refine(track: Track, cameras, rasters: Mapping[int, ImageRaster], cfg: LsmConfig, geometric: bool) -> LsmResult:
    w = cfg.w
    dx, dy = window_offsets(w)
    active = track.active_observations()
    if len(active) < 2:
        return _diverged(track, "fewer than two active observations")
    ref = track.reference_observation()
    if ref is None or not ref.active:
        return _diverged(track, "no active reference observation")

    # reference window, normalized once
    ref_raw = kernels.sample_points(rasters[ref.image_id].data, ref.x + dx, ref.y + dy)
    if ref_raw is None:
        return _diverged(track, "reference window leaves the raster")
    try:
        rmean, rsd = window_stats(ref_raw)
    except UndefinedCorrelationError:
        return _diverged(track, "reference window has zero variance")
    ref_vals = ref_raw - rmean

    states: list[_ObsState] = []
    deactivated = []
    for o in active:
        if o.image_id == ref.image_id:
            continue
        st = _ObsState(o, rasters[o.image_id].data, ref)
        tx, a1, a2, ty, b1, b2 = st.theta[:6]
        raw = kernels.sample_points(st.img, o.x + tx + a1 * dx + a2 * dy, o.y + ty + b1 * dy + b2 * dx)
        try:
            if raw is None:
                raise UndefinedCorrelationError("window leaves the raster")
            m, sd = window_stats(raw)
        except UndefinedCorrelationError:
            deactivated.append(o.image_id)
            continue
        st.mean, st.inv_sd = m, rsd / sd
        states.append(st)
    if not states:
        return _diverged(track, "fewer than two usable windows", deactivated=deactivated)

    nobs = len(states)
    ground_free = geometric and not cfg.pin_ground
    nunk = 8 * nobs + (3 if ground_free else 0)
    g_col = 8 * nobs

    weights = None
    if geometric:
        cams = as_camera_set(cameras)
        if track.ground is None:
            return _diverged(track, "track is not triangulated", deactivated=deactivated)
        geo_obs = [ref] + [s.obs for s in states]
        rows = cams.rows(o.image_id for o in geo_obs)
        gh0 = cams.frame.to_frame(track.ground)
        if cfg.weight_override is not None:
            weights = cfg.weight_override
        else:
            probe = Track(track.track_id, geo_obs, ref.image_id, track.ground)
            weights = compute_weights(reproj_stats(probe, cams), cfg.weights)
        _, J0 = cams.project(rows, np.broadcast_to(gh0, (len(geo_obs), 3)))
        vg_scale = np.sqrt(np.mean(np.sum(J0 * J0, axis=1), axis=0))

    history = []

    def fail(reason: str, it: int) -> LsmResult:
        return _diverged(
            track,
            reason,
            it,
            deactivated=deactivated,
            weights=weights,
            history=history,
            eps_before=weights.eps if weights is not None else float("nan"),
        )

    def evaluate(thetas: np.ndarray, g: np.ndarray | None):
        """Normal equations, cost and per-view ZNCC at a parameter state."""
        N = np.zeros((nunk, nunk))
        rhs = np.zeros(nunk)
        cost = 0.0
        zs = []
        for k, st in enumerate(states):
            out = kernels.lsm_accumulate(st.img, st.mean, st.inv_sd, st.obs.x, st.obs.y, thetas[k], dx, dy, ref_vals)
            if out is None:
                return None
            JtJ, Jtr, c, warped = out
            sl = slice(8 * k, 8 * k + 8)
            N[sl, sl] += JtJ
            rhs[sl] -= Jtr
            cost += c
            zs.append(_warped_zncc(ref_vals, rsd, warped))
        if geometric:
            pix, J = cams.project(rows, np.broadcast_to(g if ground_free else gh0, (len(geo_obs), 3)))
            corr = np.empty_like(pix)
            corr[0] = (ref.x, ref.y)
            corr[1:, 0] = xs + thetas[:, 0]
            corr[1:, 1] = ys + thetas[:, 3]
            e = corr - pix
            W = weights.w_reproj
            cost += W * float(np.sum(e * e))
            ix, iy = 8 * np.arange(nobs), 8 * np.arange(nobs) + 3
            N[ix, ix] += W
            N[iy, iy] += W
            rhs[ix] -= W * e[1:, 0]
            rhs[iy] -= W * e[1:, 1]
            if ground_free:
                gs = slice(g_col, g_col + 3)
                N[gs, gs] += W * np.einsum("kai,kaj->ij", J, J)
                rhs[gs] += W * np.einsum("kai,ka->i", J, e)
                N[ix, gs] -= W * J[1:, 0]
                N[iy, gs] -= W * J[1:, 1]
                N[gs, ix] -= W * J[1:, 0].T
                N[gs, iy] -= W * J[1:, 1].T
                Wv = weights.w_vgcp
                v = vg_scale * (g - gh0)
                cost += Wv * float(v @ v)
                N[gs, gs] += Wv * np.diag(vg_scale * vg_scale)
                rhs[gs] -= Wv * vg_scale * v
        return N, rhs, cost, float(np.mean(zs))

    xs = np.array([st.obs.x for st in states])
    ys = np.array([st.obs.y for st in states])
    thetas = np.array([st.theta for st in states])
    t0 = thetas[:, [0, 3]].copy()
    gh = gh0.copy() if ground_free else None

    def snapshot():
        vec = thetas.ravel().copy()
        if ground_free:
            vec = np.concatenate([vec, gh])
        history.append(vec)

    if cfg.record_history:
        snapshot()

    cur = evaluate(thetas, gh)
    if cur is None:
        return fail("window left the raster", 0)
    zncc_first = zncc_prev = cur[3]
    drops = 0
    lam = 0.0
    status, reason, it = DIVERGED, "iteration cap reached", cfg.max_iter
    for it in range(1, cfg.max_iter + 1):
        N, rhs, cost, _ = cur
        A = N + lam * np.diag(np.diag(N)) if lam else N
        try:
            delta = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            return fail("singular normal equations", it)
        if not np.all(np.isfinite(delta)) or sym_condition(A) > SINGULAR_CONDITION:
            return fail("singular normal equations", it)
        step = delta[: 8 * nobs].reshape(nobs, 8)
        max_shift = float(np.max(np.hypot(step[:, 0], step[:, 3])))
        trial_t = thetas + step
        trial_g = gh + delta[g_col:] if ground_free else None
        trial = evaluate(trial_t, trial_g)
        if trial is None or trial[2] >= cost:
            # no descent (a window outside the raster counts as infinite cost):
            # either already at the minimum or the step needs damping
            if trial is not None and max_shift < cfg.shift_tol:
                status, reason = CONVERGED, ""
                break
            lam = max(10.0 * lam, 1e-3)
            continue
        predicted = float(delta @ (2.0 * rhs - N @ delta))
        gain = (cost - trial[2]) / predicted if predicted > 0 else 0.0
        thetas, gh, cur = trial_t, trial_g, trial
        if gain < 0.25:
            # poor agreement with the quadratic model (e.g. across interpolation kinks)
            lam = max(10.0 * lam, 1e-3)
        elif gain > 0.75:
            lam = lam / 10.0 if lam > 1e-6 else 0.0
        if cfg.record_history:
            snapshot()
        if float(np.max(np.hypot(*(thetas[:, [0, 3]] - t0).T))) > w:
            return fail("correction exceeded the window size", it)
        cx, cy = xs + thetas[:, 0], ys + thetas[:, 3]
        for k, st in enumerate(states):
            img = rasters[st.obs.image_id]
            if not (0.0 <= cx[k] <= img.width - 1 and 0.0 <= cy[k] <= img.height - 1):
                return fail("corrected point left the raster", it)
        if cur[3] < zncc_prev - cfg.zncc_drop_tol:
            drops += 1
            if drops >= cfg.zncc_drops:
                return fail("mean ZNCC fell on consecutive iterations", it)
        else:
            drops = 0
        zncc_prev = cur[3]
        if max_shift < cfg.shift_tol:
            status, reason = CONVERGED, ""
            break

    if status != CONVERGED:
        return fail(reason, it)
    for st, th in zip(states, thetas):
        st.theta = th

    scores = {}
    for st in states:
        tx, a1, a2, ty, b1, b2 = st.theta[:6]
        vals = kernels.sample_points(st.img, st.obs.x + tx + a1 * dx + a2 * dy, st.obs.y + ty + b1 * dy + b2 * dx)
        if vals is None:
            return fail("final window leaves the raster", it)
        scores[st.obs.image_id] = _warped_zncc(ref_vals, rsd, (vals - st.mean) * st.inv_sd)

    params = {ref.image_id: (ref.a0, ref.a1, ref.a2, ref.b0, ref.b1, ref.b2, ref.h0, ref.h1)}
    for st in states:
        params[st.obs.image_id] = st.to_params(ref)
    ground = track.ground
    if ground_free:
        ground = GroundPoint(*(float(v) for v in cams.frame.from_frame(gh)))
    return LsmResult(
        track.track_id,
        CONVERGED,
        it,
        params=params,
        ground=ground,
        deactivated=deactivated,
        zncc_before=zncc_first,
        zncc_after=float(np.mean(list(scores.values()))),
        zncc_scores=scores,
        eps_before=weights.eps if weights is not None else float("nan"),
        weights=weights,
        history=history,
    )


def refine_track(track: Track, cameras, rasters: Mapping[int, ImageRaster], cfg: LsmConfig) -> LsmResult:
    """Geometrically constrained refinement of one track (pure; see :func:`apply_result`)."""
    return _refine(track, cameras, rasters, cfg, geometric=True)


def refine_track_classic(track: Track, rasters: Mapping[int, ImageRaster], cfg: LsmConfig) -> LsmResult:
    """Photo-consistency-only refinement (no geometry, ground untouched)."""
    return _refine(track, None, rasters, replace(cfg, weight_override=None), geometric=False)


def apply_result(track: Track, result: LsmResult) -> None:
    """Write a converged result back into ``track``; mark diverged tracks."""
    if not result.converged:
        track.status = DIVERGED
        return
    for o in track.observations:
        if o.image_id in result.params:
            o.a0, o.a1, o.a2, o.b0, o.b1, o.b2, o.h0, o.h1 = result.params[o.image_id]
        if o.image_id in result.deactivated:
            o.status = DIVERGED
    track.ground = result.ground
