"""Joint estimation of per-image constant biases and per-track ground points.

Residuals are kept in pixels: for an active observation of image ``j``::

    r = corrected_point + (x0_j, y0_j) - (S * R(ground) + O)

so the bias partials are the identity and the ground partials are the
negated projection Jacobian. One anchor image has its bias held at zero.

Fixing one image leaves a third gauge freedom when the cameras are close to
affine: moving every ground point along the anchor's viewing ray shifts
each other image by a constant that its bias absorbs. With
``GaugeConfig.depth_datum`` the biases are additionally constrained to
have no component along that image motion (see :func:`depth_datum`).
The normal equations are solved by eliminating the 3x3 point blocks (Schur
complement) and back-substituting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import AdjustmentDivergenceError, DegenerateGeometryError, EmptySystemError, GaugeError
from .geo_rpc import BiasCorrection, CameraSet, GroundPoint
from .tracks import Track, as_camera_set, corrected_points, rmse_eps, sym_condition, triangulate

log = logging.getLogger(__name__)

MAX_ITER = 20
BIAS_TOL = 1e-4
GROUND_TOL = 1e-9
MAX_BLOCK_CONDITION = 1e12


@dataclass(frozen=True)
class GaugeConfig:
    anchor: int | None = None
    depth_datum: bool = True


@dataclass(frozen=True)
class AdjustConfig:
    max_iter: int = MAX_ITER
    bias_tol: float = BIAS_TOL
    ground_tol: float = GROUND_TOL


@dataclass
class NormalSystem:
    """Block normal equations of one linearization.

    ``cam_ids`` lists the free (non-anchor) images; observation ``k`` links
    track row ``obs_track[k]`` with free camera ``obs_cam[k]`` (-1 for the
    anchor). ``W[k]`` is the 2x3 camera/point coupling block of that
    observation.
    """

    cam_ids: list[int]
    track_ids: list
    U: np.ndarray  # (T, 3, 3)
    V: np.ndarray  # (C, 2, 2)
    W: np.ndarray  # (M, 2, 3)
    obs_track: np.ndarray
    obs_cam: np.ndarray
    rhs_cam: np.ndarray  # (C, 2)
    rhs_pt: np.ndarray  # (T, 3)
    cost: float
    residuals: np.ndarray  # (M, 2)
    constraint: np.ndarray | None = None  # (2C,) unit vector; camera steps stay orthogonal to it

    @property
    def n_cam_unknowns(self) -> int:
        return 2 * len(self.cam_ids)

    @property
    def n_point_unknowns(self) -> int:
        return 3 * len(self.track_ids)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full normal matrix and right-hand side, cameras first."""
        C, T = len(self.cam_ids), len(self.track_ids)
        n = 2 * C + 3 * T
        A = np.zeros((n, n))
        for c in range(C):
            A[2 * c : 2 * c + 2, 2 * c : 2 * c + 2] = self.V[c]
        for t in range(T):
            o = 2 * C + 3 * t
            A[o : o + 3, o : o + 3] = self.U[t]
        for k, (t, c) in enumerate(zip(self.obs_track, self.obs_cam)):
            if c < 0:
                continue
            o = 2 * C + 3 * t
            A[2 * c : 2 * c + 2, o : o + 3] += self.W[k]
            A[o : o + 3, 2 * c : 2 * c + 2] += self.W[k].T
        b = np.concatenate([self.rhs_cam.ravel(), self.rhs_pt.ravel()])
        return A, b

    def camera_basis(self) -> np.ndarray | None:
        """Orthonormal basis of admissible camera steps (``None`` if unconstrained)."""
        if self.constraint is None:
            return None
        cached = getattr(self, "_basis", None)
        if cached is None:
            c = self.constraint.reshape(1, -1)
            cached = np.linalg.svd(c)[2][1:].T
            self._basis = cached
        return cached


@dataclass
class AdjustResult:
    biases: dict[int, BiasCorrection]
    ground: dict
    iterations: int
    internal_rmse: float
    converged: bool
    anchor: int
    track_eps: dict = field(default_factory=dict)


def default_anchor(tracks: Iterable[Track]) -> int:
    """Image with the most active observations; lowest id on ties."""
    counts: dict[int, int] = {}
    for t in tracks:
        if not t.active:
            continue
        for o in t.active_observations():
            counts[o.image_id] = counts.get(o.image_id, 0) + 1
    if not counts:
        raise EmptySystemError("no active observations")
    best = max(counts.values())
    return min(i for i, c in counts.items() if c == best)


def depth_datum(cameras, anchor: int) -> dict[int, np.ndarray]:
    """Per-image pixel motion caused by a unit ground shift along the anchor ray.

    Evaluated at the ground frame origin. The anchor's own entry is zero.
    """
    cams = as_camera_set(cameras)
    rows = np.arange(len(cams.ids))
    _, J = cams.project(rows, np.zeros((len(rows), 3)))
    n = np.linalg.svd(J[cams.index[anchor]])[2][-1]
    g = J @ n
    g[cams.index[anchor]] = 0.0
    return {i: g[k] for k, i in enumerate(cams.ids)}


def _constraint(cams: CameraSet, cam_ids: list[int], anchor: int, gauge: GaugeConfig):
    if not gauge.depth_datum or not cam_ids:
        return None
    d = depth_datum(cams, anchor)
    c = np.concatenate([d[i] for i in cam_ids])
    norm = float(np.linalg.norm(c))
    if norm == 0.0:
        return None
    return c / norm


class _Layout:
    """Flattened observation arrays for the active tracks."""

    def __init__(self, tracks: list[Track], cams: CameraSet, anchor: int):
        self.tracks = tracks
        self.cam_ids = [i for i in cams.ids if i != anchor]
        cam_pos = {i: k for k, i in enumerate(self.cam_ids)}
        pts, rows, obs_track, obs_cam = [], [], [], []
        for ti, t in enumerate(tracks):
            obs = t.active_observations()
            pts.append(corrected_points(t, obs))
            for o in obs:
                rows.append(cams.index[o.image_id])
                obs_track.append(ti)
                obs_cam.append(cam_pos.get(o.image_id, -1))
        self.points = np.concatenate(pts) if pts else np.zeros((0, 2))
        self.rows = np.asarray(rows, dtype=np.intp)
        self.obs_track = np.asarray(obs_track, dtype=np.intp)
        self.obs_cam = np.asarray(obs_cam, dtype=np.intp)
        self.free = self.obs_cam >= 0


def _evaluate(layout: _Layout, cams: CameraSet, bias: np.ndarray, gh: np.ndarray, jacobian=True):
    cams_b = _with_bias_array(cams, bias)
    out = cams_b.project(layout.rows, gh[layout.obs_track], jacobian=jacobian)
    if jacobian:
        pix, J = out
        return layout.points - pix, J
    return layout.points - out


def _with_bias_array(cams: CameraSet, bias: np.ndarray) -> CameraSet:
    new = object.__new__(CameraSet)
    new.__dict__.update(cams.__dict__)
    new.bias = bias
    return new


def _assemble(layout: _Layout, r: np.ndarray, J: np.ndarray, constraint=None) -> NormalSystem:
    T, C = len(layout.tracks), len(layout.cam_ids)
    Jp = -J  # d r / d ground
    U = np.zeros((T, 3, 3))
    np.add.at(U, layout.obs_track, np.einsum("kai,kaj->kij", Jp, Jp))
    rhs_pt = np.zeros((T, 3))
    np.add.at(rhs_pt, layout.obs_track, -np.einsum("kai,ka->ki", Jp, r))
    V = np.zeros((C, 2, 2))
    rhs_cam = np.zeros((C, 2))
    free = layout.free
    counts = np.bincount(layout.obs_cam[free], minlength=C).astype(float)
    V[:, 0, 0] = counts
    V[:, 1, 1] = counts
    np.add.at(rhs_cam, layout.obs_cam[free], -r[free])
    return NormalSystem(
        cam_ids=list(layout.cam_ids),
        track_ids=[t.track_id for t in layout.tracks],
        U=U,
        V=V,
        W=Jp,
        obs_track=layout.obs_track,
        obs_cam=layout.obs_cam,
        rhs_cam=rhs_cam,
        rhs_pt=rhs_pt,
        cost=float(np.sum(r * r)),
        residuals=r,
        constraint=constraint,
    )


def _active(tracks: Iterable[Track]) -> list[Track]:
    return [t for t in tracks if t.active and len(t.active_observations()) >= 2]


def build_system(tracks: Iterable[Track], cameras, gauge: GaugeConfig = GaugeConfig()) -> NormalSystem:
    cams = as_camera_set(cameras)
    active = _active(tracks)
    if not active:
        raise EmptySystemError("no active tracks with two or more observations")
    anchor = gauge.anchor if gauge.anchor is not None else default_anchor(active)
    if anchor not in cams.index:
        raise ValueError(f"anchor image {anchor} is not among the cameras")
    for t in active:
        if t.ground is None:
            t.ground = triangulate(t, cams)
    layout = _Layout(active, cams, anchor)
    gh = np.array([cams.frame.to_frame(t.ground) for t in active])
    r, J = _evaluate(layout, cams, cams.bias, gh)
    return _assemble(layout, r, J, _constraint(cams, layout.cam_ids, anchor, gauge))


def solve_schur(sys: NormalSystem, damping: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Solve the block normal equations by point elimination.

    Returns camera updates ``(C, 2)`` and point updates ``(T, 3)``.
    ``damping`` adds a Marquardt term ``damping * diag`` to every block.
    """
    U = sys.U
    V = sys.V
    if damping:
        U = U + damping * U * np.eye(3)
        V = V + damping * V * np.eye(2)
    C, T = len(sys.cam_ids), len(sys.track_ids)
    conds = sym_condition(U)
    bad = np.flatnonzero(~(conds <= MAX_BLOCK_CONDITION))
    if bad.size:
        tid = sys.track_ids[bad[0]]
        raise DegenerateGeometryError(f"point block of track {tid} is singular (cond {conds[bad[0]]:.3g})", tid)
    Uinv = np.linalg.inv(U)
    bp_solved = np.einsum("tij,tj->ti", Uinv, sys.rhs_pt)
    free = sys.obs_cam >= 0
    S = np.zeros((2 * C, 2 * C))
    rhs = sys.rhs_cam.ravel().copy()
    if C:
        for c in range(C):
            S[2 * c : 2 * c + 2, 2 * c : 2 * c + 2] = V[c]
        Y = np.einsum("kij,kjl->kil", sys.W, Uinv[sys.obs_track])  # (M, 2, 3)
        fk = np.flatnonzero(free)
        red = np.zeros((C, 2))
        np.add.at(red, sys.obs_cam[fk], np.einsum("kij,kj->ki", sys.W[fk], bp_solved[sys.obs_track[fk]]))
        rhs -= red.ravel()
        pa, pb = _pairs(sys)
        blocks = np.einsum("kij,klj->kil", Y[pa], sys.W[pb])  # (P, 2, 2)
        ca, cb = sys.obs_cam[pa], sys.obs_cam[pb]
        S4 = S.reshape(C, 2, C, 2)
        np.subtract.at(S4, (ca, slice(None), cb, slice(None)), blocks)
        S = S4.reshape(2 * C, 2 * C)
        Z = sys.camera_basis()
        if Z is not None:
            S, rhs = Z.T @ S @ Z, Z.T @ rhs
        try:
            L = np.linalg.cholesky(S)
            dc = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        except np.linalg.LinAlgError as exc:
            raise GaugeError("reduced camera system is singular; is the datum fixed?") from exc
        if Z is not None:
            dc = Z @ dc
        dc = dc.reshape(C, 2)
    else:
        dc = np.zeros((0, 2))
    back = np.zeros((T, 3))
    if C:
        fk = np.flatnonzero(free)
        np.add.at(back, sys.obs_track[fk], np.einsum("kij,ki->kj", sys.W[fk], dc[sys.obs_cam[fk]]))
    dp = np.einsum("tij,tj->ti", Uinv, sys.rhs_pt - back)
    return dc, dp


def _pairs(sys: NormalSystem):
    cached = getattr(sys, "_pair_cache", None)
    if cached is not None:
        return cached
    order = np.argsort(sys.obs_track, kind="stable")
    tr = sys.obs_track[order]
    pa, pb = [], []
    bounds = np.flatnonzero(np.diff(tr)) + 1
    for grp in np.split(order, bounds):
        grp = grp[sys.obs_cam[grp] >= 0]
        if grp.size:
            a, b = np.meshgrid(grp, grp, indexing="ij")
            pa.append(a.ravel())
            pb.append(b.ravel())
    out = (
        np.concatenate(pa) if pa else np.zeros(0, dtype=np.intp),
        np.concatenate(pb) if pb else np.zeros(0, dtype=np.intp),
    )
    sys._pair_cache = out
    return out


def solve_dense(sys: NormalSystem, damping: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Reference solve of the full normal matrix (tests and small problems)."""
    A, b = sys.dense()
    if damping:
        A = A + damping * np.diag(np.diag(A))
    C = len(sys.cam_ids)
    Z = sys.camera_basis()
    if Z is None:
        x = np.linalg.solve(A, b)
    else:
        n_pt = A.shape[0] - 2 * C
        T = np.zeros((A.shape[0], Z.shape[1] + n_pt))
        T[: 2 * C, : Z.shape[1]] = Z
        T[2 * C :, Z.shape[1] :] = np.eye(n_pt)
        x = T @ np.linalg.solve(T.T @ A @ T, T.T @ b)
    return x[: 2 * C].reshape(C, 2), x[2 * C :].reshape(-1, 3)


def run_bias_adjustment(
    tracks: Iterable[Track],
    cameras,
    gauge: GaugeConfig = GaugeConfig(),
    config: AdjustConfig = AdjustConfig(),
) -> AdjustResult:
    """Damped Gauss-Newton over biases and ground points.

    Input tracks are not modified; see :func:`apply_adjustment`.
    """
    cams = as_camera_set(cameras)
    active = _active(tracks)
    if not active:
        raise EmptySystemError("no active tracks with two or more observations")
    anchor = gauge.anchor if gauge.anchor is not None else default_anchor(active)
    if anchor not in cams.index:
        raise ValueError(f"anchor image {anchor} is not among the cameras")

    bias = cams.bias.copy()
    bias[cams.index[anchor]] = 0.0
    cams = _with_bias_array(cams, bias)
    gh = []
    for t in active:
        g = t.ground if t.ground is not None else triangulate(t, cams)
        gh.append(cams.frame.to_frame(g))
    gh = np.array(gh)
    layout = _Layout(active, cams, anchor)
    free_rows = np.array([cams.index[i] for i in layout.cam_ids], dtype=np.intp)
    constraint = _constraint(cams, layout.cam_ids, anchor, gauge)
    if constraint is not None:
        # start from admissible biases
        b = bias[free_rows].ravel()
        bias[free_rows] = (b - constraint * float(constraint @ b)).reshape(-1, 2)

    r, J = _evaluate(layout, cams, bias, gh)
    sys = _assemble(layout, r, J, constraint)
    lam = 0.0
    converged = False
    grows = 0
    it = 0
    for it in range(1, config.max_iter + 1):
        while True:
            dc, dp = solve_schur(sys, lam)
            nb = bias.copy()
            nb[free_rows] += dc
            ng = gh + dp
            nr, nJ = _evaluate(layout, cams, nb, ng)
            ncost = float(np.sum(nr * nr))
            if ncost <= sys.cost * (1 + 1e-12) + 1e-18:
                break
            lam = max(lam * 10.0, 1e-6)
            if lam > 1e10:
                break
        if ncost > sys.cost * (1 + 1e-12) + 1e-18:
            grows += 1
            if grows >= 3:
                raise AdjustmentDivergenceError("bias adjustment residual grew on 3 consecutive iterations")
            break
        grows = 0
        bias, gh = nb, ng
        sys = _assemble(layout, nr, nJ, constraint)
        lam = lam / 10.0 if lam >= 1e-5 else 0.0
        step_b = float(np.max(np.abs(dc))) if dc.size else 0.0
        step_g = float(np.max(np.abs(dp)))
        log.debug("BA iteration %d cost %.6g bias step %.3g ground step %.3g", it, ncost, step_b, step_g)
        if step_b < config.bias_tol and step_g < config.ground_tol:
            converged = True
            break

    res = sys.residuals
    eps = {}
    start = 0
    for t in active:
        n = len(t.active_observations())
        eps[t.track_id] = rmse_eps(res[start : start + n])
        start += n
    biases = {i: BiasCorrection(float(bias[k, 0]), float(bias[k, 1])) for k, i in enumerate(cams.ids)}
    biases[anchor] = BiasCorrection(0.0, 0.0)
    ground = {t.track_id: GroundPoint(*(float(v) for v in cams.frame.from_frame(g))) for t, g in zip(active, gh)}
    return AdjustResult(
        biases=biases,
        ground=ground,
        iterations=it,
        internal_rmse=float(np.mean(list(eps.values()))),
        converged=converged,
        anchor=anchor,
        track_eps=eps,
    )


def apply_adjustment(tracks: Iterable[Track], result: AdjustResult) -> None:
    for t in tracks:
        if t.track_id in result.ground:
            t.ground = result.ground[t.track_id]


def adjusted_cameras(cameras, result: AdjustResult) -> CameraSet:
    return as_camera_set(cameras).with_biases(result.biases)


def adjustment_report(result: AdjustResult, bins: int = 10) -> dict:
    eps = np.array(list(result.track_eps.values()))
    hi = float(eps.max()) if eps.size else 1.0
    counts, edges = np.histogram(eps, bins=bins, range=(0.0, hi if hi > 0 else 1.0))
    return {
        "anchor": result.anchor,
        "biases": {str(i): [b.x0, b.y0] for i, b in sorted(result.biases.items())},
        "iterations": result.iterations,
        "converged": result.converged,
        "internal_rmse_px": result.internal_rmse,
        "eps_histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }

