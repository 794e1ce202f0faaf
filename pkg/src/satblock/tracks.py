"""Multi-view tracks: data model, triangulation, reprojection statistics,
reference-image selection and outlier filtering.

An observation's image-coordinate correction is an affine function of the
reference image coordinates ``(x_b, y_b)``::

    dx = a0 + a1 * x_b + a2 * y_b
    dy = b0 + b1 * y_b + b2 * x_b

``a1`` and ``b1`` are the along-axis terms, so the neutral state is
``{a0, a1, a2} = {-x_b, 1, 0}`` and ``{b0, b1, b2} = {-y_b, 1, 0}``.
The reference observation is never corrected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InverseDivergenceError,
    SatblockError,
    SceneFormatError,
    SelectionError,
    UndefinedCorrelationError,
    UnderdeterminedError,
)
from .geo_rpc import CameraSet, GroundPoint, ImagePoint, backward_project, format_number
from .raster import ImageRaster, SamplingError, extract_window, zncc

ACTIVE, DIVERGED, OUTLIER = "active", "diverged", "outlier"
REMOVED = "removed"

TRIANGULATE_MAX_ITER = 20
TRIANGULATE_TOL = 1e-10
MAX_CONDITION = 1e12


@dataclass
class Observation:
    image_id: int
    x: float
    y: float
    a0: float = 0.0
    a1: float = 0.0
    a2: float = 0.0
    b0: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    h0: float = 0.0
    h1: float = 1.0
    status: str = ACTIVE

    @property
    def active(self) -> bool:
        return self.status == ACTIVE

    @property
    def affine(self) -> tuple[float, ...]:
        return (self.a0, self.a1, self.a2, self.b0, self.b1, self.b2)

    def reset_parameters(self, x_b: float, y_b: float) -> None:
        self.a0, self.a1, self.a2 = -x_b, 1.0, 0.0
        self.b0, self.b1, self.b2 = -y_b, 1.0, 0.0
        self.h0, self.h1 = 0.0, 1.0


@dataclass
class Track:
    track_id: int | str
    observations: list[Observation]
    reference: int | None = None
    ground: GroundPoint | None = None
    provenance: str = "ingested"
    status: str = ACTIVE

    def __post_init__(self):
        self.observations = sorted(self.observations, key=lambda o: o.image_id)
        ids = [o.image_id for o in self.observations]
        if len(set(ids)) != len(ids):
            raise ValueError(f"track {self.track_id} observes an image twice")

    def obs(self, image_id: int) -> Observation:
        for o in self.observations:
            if o.image_id == image_id:
                return o
        raise KeyError(image_id)

    def active_observations(self) -> list[Observation]:
        return [o for o in self.observations if o.active]

    @property
    def active(self) -> bool:
        return self.status == ACTIVE

    def reference_observation(self) -> Observation | None:
        return None if self.reference is None else self.obs(self.reference)

    def set_reference(self, image_id: int) -> None:
        """Select ``image_id`` as reference and reset all corrections to neutral."""
        ref = self.obs(image_id)
        self.reference = image_id
        for o in self.observations:
            o.reset_parameters(ref.x, ref.y)


@dataclass
class ReprojStats:
    residuals: np.ndarray  # (n, 2) pixels, corrected point minus projection
    n: int
    eps: float


def rmse_eps(residuals) -> float:
    """Reprojection RMSE with 1.5 subtracted from the ray count."""
    d = np.asarray(residuals, dtype=float).reshape(-1, 2)
    n = d.shape[0]
    if n < 2:
        raise UnderdeterminedError(f"need >= 2 rays for an RMSE, got {n}")
    return math.sqrt(float(np.sum(d * d)) / (n - 1.5))


def corrected_point(obs: Observation, ref: Observation | None) -> ImagePoint:
    if ref is None or obs.image_id == ref.image_id:
        return ImagePoint(obs.x, obs.y)
    dx = obs.a0 + obs.a1 * ref.x + obs.a2 * ref.y
    dy = obs.b0 + obs.b1 * ref.y + obs.b2 * ref.x
    return ImagePoint(obs.x + dx, obs.y + dy)


def corrected_points(track: Track, observations: Iterable[Observation] | None = None) -> np.ndarray:
    ref = track.reference_observation()
    obs = track.active_observations() if observations is None else observations
    return np.array([corrected_point(o, ref) for o in obs], dtype=float).reshape(-1, 2)


def sym_condition(A: np.ndarray):
    """2-norm condition number of symmetric matrices (stacked on leading axes).

    Equal to ``np.linalg.cond`` for symmetric input at about half the cost.
    """
    w = np.abs(np.linalg.eigvalsh(A))
    lo, hi = w.min(axis=-1), w.max(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf)


def as_camera_set(cameras) -> CameraSet:
    if isinstance(cameras, CameraSet):
        return cameras
    return CameraSet(cameras)


def _initial_ground(track: Track, cams: CameraSet, obs: list[Observation], pts: np.ndarray) -> np.ndarray:
    if track.ground is not None:
        return cams.frame.to_frame(track.ground)
    h0 = float(cams.frame.offset[2])
    cam = cams.cameras[obs[0].image_id]
    try:
        g = backward_project(cam.model, cam.bias, ImagePoint(*pts[0]), h0)
    except InverseDivergenceError:
        return np.zeros(3)
    return cams.frame.to_frame(g)


def triangulate(track: Track, cameras, tol: float = TRIANGULATE_TOL) -> GroundPoint:
    """Least-squares ground point of the active, corrected observations.

    Gauss-Newton in frame-normalized ground coordinates with a Levenberg
    safeguard whenever a step would increase the residual.
    """
    cams = as_camera_set(cameras)
    obs = track.active_observations()
    if len(obs) < 2:
        raise UnderdeterminedError(f"track {track.track_id} has {len(obs)} active rays")
    pts = corrected_points(track, obs)
    rows = cams.rows(o.image_id for o in obs)
    gh = _initial_ground(track, cams, obs, pts)

    pix, J = cams.project(rows, np.broadcast_to(gh, (len(obs), 3)))
    r = (pts - pix).ravel()
    cost = float(r @ r)
    lam = 0.0
    for _ in range(TRIANGULATE_MAX_ITER):
        A = J.reshape(-1, 3)
        N = A.T @ A
        if sym_condition(N) > MAX_CONDITION:
            raise DegenerateGeometryError(f"track {track.track_id}: ray geometry is degenerate", track.track_id)
        g = A.T @ r
        accepted = False
        while lam <= 1e8:
            step = np.linalg.solve(N + lam * np.diag(np.diag(N)), g)
            cand = gh + step
            cpix, cJ = cams.project(rows, np.broadcast_to(cand, (len(obs), 3)))
            cr = (pts - cpix).ravel()
            ccost = float(cr @ cr)
            if ccost <= cost:
                accepted = True
                break
            lam = max(lam * 10.0, 1e-3)
        if not accepted:
            break
        gh, r, J, cost = cand, cr, cJ, ccost
        lam = lam / 10.0 if lam >= 1e-5 else 0.0
        if np.max(np.abs(step)) < tol:
            break
    g = cams.frame.from_frame(gh)
    if not np.all(np.isfinite(g)):
        raise DegenerateGeometryError(f"track {track.track_id}: triangulation produced non-finite ground", track.track_id)
    return GroundPoint(*(float(v) for v in g))


def reproj_stats(track: Track, cameras) -> ReprojStats:
    cams = as_camera_set(cameras)
    obs = track.active_observations()
    if len(obs) < 2:
        raise UnderdeterminedError(f"track {track.track_id} has {len(obs)} active rays")
    if track.ground is None:
        raise SatblockError(f"track {track.track_id} is not triangulated")
    pts = corrected_points(track, obs)
    rows = cams.rows(o.image_id for o in obs)
    gh = cams.frame.to_frame(track.ground)
    pix = cams.project(rows, np.broadcast_to(gh, (len(obs), 3)), jacobian=False)
    d = pts - pix
    return ReprojStats(d, len(obs), rmse_eps(d))


def select_reference(track: Track, rasters: Mapping[int, ImageRaster], w: int) -> int:
    """Image whose windows correlate best, summed over all pairings.

    Each pairwise ZNCC is credited to both images; ties go to the lowest id.
    Pairings involving a zero-variance window are skipped.
    """
    obs = sorted(track.active_observations(), key=lambda o: o.image_id)
    if len(obs) < 2:
        raise SelectionError(f"track {track.track_id} has fewer than 2 observations")
    ref = track.reference_observation()
    windows = {}
    for o in obs:
        try:
            windows[o.image_id] = extract_window(rasters[o.image_id], corrected_point(o, ref), w)
        except SamplingError as exc:
            raise SelectionError(f"track {track.track_id}: {exc}") from exc
    score = {o.image_id: 0.0 for o in obs}
    used = 0
    for i, oi in enumerate(obs):
        for oj in obs[i + 1 :]:
            try:
                s = zncc(windows[oi.image_id], windows[oj.image_id])
            except UndefinedCorrelationError:
                continue
            score[oi.image_id] += s
            score[oj.image_id] += s
            used += 1
    if used == 0:
        raise SelectionError(f"track {track.track_id}: every window pairing is undefined")
    best = max(score.values())
    return min(i for i, s in score.items() if s == best)


def filter_outliers(tracks: Iterable[Track], cameras, threshold: float = 2.0) -> int:
    """Flag views whose reprojection residual exceeds ``threshold`` pixels.

    Each active track is re-intersected from its current corrected points
    with the given cameras. Returns the number of flagged views; tracks
    left with fewer than two active views are removed.
    """
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    cams = as_camera_set(cameras)
    flagged = 0
    for t in tracks:
        if not t.active:
            continue
        try:
            t.ground = triangulate(t, cams)
            st = reproj_stats(t, cams)
        except (DegenerateGeometryError, UnderdeterminedError):
            t.status = REMOVED
            continue
        mags = np.hypot(st.residuals[:, 0], st.residuals[:, 1])
        for o, m in zip(t.active_observations(), mags):
            if m > threshold:
                o.status = OUTLIER
                flagged += 1
        if len(t.active_observations()) < 2:
            t.status = REMOVED
    return flagged


# ---------------------------------------------------------------------------
# tracks JSON-lines
# ---------------------------------------------------------------------------


def _num(v: float) -> float:
    return float(format_number(v))


def track_to_json(track: Track, include_ground: bool = True) -> str:
    rec = {
        "id": track.track_id,
        "observations": [{"image": o.image_id, "x": _num(o.x), "y": _num(o.y)} for o in track.observations],
    }
    if include_ground and track.ground is not None:
        rec["ground"] = [_num(v) for v in track.ground]
    return json.dumps(rec, separators=(",", ":"))


def track_from_record(rec: dict, provenance: str = "ingested") -> Track:
    obs = [Observation(int(o["image"]), float(o["x"]), float(o["y"])) for o in rec["observations"]]
    ground = rec.get("ground")
    if ground is not None:
        ground = GroundPoint(*(float(v) for v in ground))
    return Track(rec["id"], obs, ground=ground, provenance=provenance)


def write_tracks(path, tracks: Iterable[Track]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tracks:
            fh.write(track_to_json(t) + "\n")


def read_tracks(path, provenance: str = "ingested") -> list[Track]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                track = track_from_record(rec, provenance)
            except (ValueError, KeyError, TypeError) as exc:
                raise SceneFormatError(f"bad track record: {exc}", path, lineno) from exc
            if len(track.observations) < 2:
                raise SceneFormatError(f"track {track.track_id} has fewer than 2 observations", path, lineno)
            out.append(track)
    return out


def clone_tracks(tracks: Iterable[Track]) -> list[Track]:
    return [
        Track(
            t.track_id,
            [Observation(**o.__dict__) for o in t.observations],
            t.reference,
            t.ground,
            t.provenance,
            t.status,
        )
        for t in tracks
    ]


def count_status(tracks: Iterable[Track]) -> dict[str, int]:
    counts = {ACTIVE: 0, DIVERGED: 0, REMOVED: 0}
    for t in tracks:
        counts[t.status] = counts.get(t.status, 0) + 1
    return counts

