"""Mode runners (BA, LSM+BA, unified), accuracy evaluation and window sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .block_adjust import (
    AdjustConfig,
    GaugeConfig,
    adjusted_cameras,
    apply_adjustment,
    default_anchor,
    run_bias_adjustment,
)
from .errors import EvaluationError, PipelineError, SatblockError, SelectionError
from .geo_rpc import BiasCorrection, CameraSet, RpcModel, biased_cameras, format_number
from .lsm_refine import LsmConfig, WeightConfig, apply_result, refine_track, refine_track_classic
from .raster import ImageRaster
from .tracks import (
    DIVERGED,
    OUTLIER,
    REMOVED,
    Track,
    clone_tracks,
    filter_outliers,
    reproj_stats,
    select_reference,
    triangulate,
)

log = logging.getLogger(__name__)

MODES = ("ba", "lsm_ba", "unified")
CSV_HEADER = ("mode", "window", "internal_rmse_px", "external_rmse_px", "diverged", "outliers")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "unified"
    window: int = 11
    outlier_threshold: float = 2.0
    max_outer: int = 5
    outer_tol: float = 1e-3
    P: float = 0.5
    sigma: float = 2.0
    gauge: GaugeConfig = field(default_factory=GaugeConfig)
    adjust: AdjustConfig = field(default_factory=AdjustConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if not self.outlier_threshold > 0:
            raise ValueError("outlier threshold must be > 0")
        if self.max_outer < 0:
            raise ValueError("max_outer must be >= 0")

    def lsm_config(self) -> LsmConfig:
        return LsmConfig(weights=WeightConfig(self.P, self.sigma, self.window))


@dataclass
class SceneData:
    """Inputs of a run: models, rasters, adjustment tracks and optional check tracks."""

    models: dict[int, RpcModel]
    rasters: dict[int, ImageRaster]
    tracks: list[Track]
    check_tracks: list[Track] = field(default_factory=list)
    initial_biases: dict[int, BiasCorrection] | None = None

    @classmethod
    def from_synth(cls, scene) -> "SceneData":
        return cls(dict(scene.models), dict(scene.rasters), clone_tracks(scene.tracks), clone_tracks(scene.check_tracks))


def _n(v):
    if v is None:
        return None
    v = float(v)
    return v if not math.isfinite(v) else float(format_number(v))


@dataclass
class RunReport:
    mode: str
    window: int
    internal_rmse_history: list[float]
    external_rmse: float | None
    diverged: int
    outliers: int
    removed: int
    anchor: int
    biases: dict[int, BiasCorrection]
    outer_iterations: int
    wall_clock: float = 0.0
    track_records: list[dict] = field(default_factory=list)

    @property
    def internal_rmse(self) -> float:
        return self.internal_rmse_history[-1]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "window": self.window,
            "internal_rmse_px": _n(self.internal_rmse),
            "internal_rmse_history": [_n(v) for v in self.internal_rmse_history],
            "external_rmse_px": _n(self.external_rmse),
            "diverged": self.diverged,
            "outliers": self.outliers,
            "removed": self.removed,
            "anchor": self.anchor,
            "biases": {str(i): [_n(b.x0), _n(b.y0)] for i, b in sorted(self.biases.items())},
            "outer_iterations": self.outer_iterations,
            "wall_clock_s": _n(self.wall_clock),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            mode=d["mode"],
            window=int(d["window"]),
            internal_rmse_history=[float(v) for v in d["internal_rmse_history"]],
            external_rmse=None if d.get("external_rmse_px") is None else float(d["external_rmse_px"]),
            diverged=int(d["diverged"]),
            outliers=int(d["outliers"]),
            removed=int(d["removed"]),
            anchor=int(d["anchor"]),
            biases={int(k): BiasCorrection(float(v[0]), float(v[1])) for k, v in d["biases"].items()},
            outer_iterations=int(d["outer_iterations"]),
            wall_clock=float(d.get("wall_clock_s", 0.0)),
        )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _live(tracks: list[Track]) -> list[Track]:
    return [t for t in tracks if t.active and len(t.active_observations()) >= 2]


def _triangulate_all(tracks: list[Track], cams: CameraSet) -> None:
    for t in _live(tracks):
        try:
            t.ground = triangulate(t, cams)
        except SatblockError as exc:
            log.debug("track %s removed: %s", t.track_id, exc)
            t.status = REMOVED


def _adjust(tracks: list[Track], cams: CameraSet, cfg: PipelineConfig, gauge: GaugeConfig):
    live = _live(tracks)
    if not live:
        raise PipelineError("every track diverged or was removed")
    res = run_bias_adjustment(live, cams, gauge, cfg.adjust)
    apply_adjustment(live, res)
    return res, adjusted_cameras(cams, res)


def _ensure_reference(t: Track, rasters, w: int) -> None:
    ref = t.reference_observation()
    if ref is None or not ref.active:
        t.set_reference(select_reference(t, rasters, w))


def _record(rec: dict, t: Track, res) -> None:
    rec.update(
        status=res.status,
        iterations=res.iterations,
        eps_before=_n(res.eps_before) if math.isfinite(res.eps_before) else None,
        zncc_before=_n(res.zncc_before) if math.isfinite(res.zncc_before) else None,
        zncc_after=_n(res.zncc_after) if math.isfinite(res.zncc_after) else None,
    )


def _refine_all(tracks: list[Track], cams, rasters, cfg: PipelineConfig, records: dict, classic: bool) -> int:
    """Refine every live track; returns how many were dropped as diverged.

    A track that already converged in an earlier round keeps its last
    converged corrections when a later re-refinement diverges (the solver
    leaves parameters untouched in that case); only tracks that never
    converged are dropped.
    """
    lsm = cfg.lsm_config()
    dropped = 0
    for t in _live(tracks):
        rec = records.setdefault(t.track_id, {"track": t.track_id})
        try:
            _ensure_reference(t, rasters, cfg.window)
        except SelectionError as exc:
            t.status = DIVERGED
            rec.update(status=DIVERGED, reason=str(exc))
            dropped += 1
            continue
        res = refine_track_classic(t, rasters, lsm) if classic else refine_track(t, cams, rasters, lsm)
        _record(rec, t, res)
        rec["rounds"] = rec.get("rounds", 0) + 1
        if res.converged:
            rec["converged_rounds"] = rec.get("converged_rounds", 0) + 1
            rec.pop("reason", None)
            apply_result(t, res)
            continue
        rec["reason"] = res.reason
        if not rec.get("converged_rounds"):
            apply_result(t, res)
            dropped += 1
    return dropped


def evaluate_external(check_tracks: Sequence[Track], cameras) -> float:
    """Mean reprojection RMSE (px) of independently intersected check tracks."""
    if not check_tracks:
        raise EvaluationError("no check tracks to evaluate")
    cams = cameras if isinstance(cameras, CameraSet) else CameraSet(cameras)
    eps = []
    for t in clone_tracks(check_tracks):
        t.ground = None
        t.ground = triangulate(t, cams)
        eps.append(reproj_stats(t, cams).eps)
    return float(np.mean(eps))


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def run(scene: SceneData, cfg: PipelineConfig) -> RunReport:
    """Run one mode on a scene; the scene's tracks are left untouched."""
    t0 = time.perf_counter()
    if len(scene.models) < 2:
        raise PipelineError("need at least two images")
    if not scene.tracks:
        raise PipelineError("need at least one track")
    tracks = clone_tracks(scene.tracks)
    cams = CameraSet(biased_cameras(scene.models, scene.initial_biases))
    records: dict = {}
    # the datum is chosen once so every adjustment of the run shares it
    anchor = cfg.gauge.anchor if cfg.gauge.anchor is not None else default_anchor(tracks)
    if anchor not in scene.models:
        raise PipelineError(f"anchor image {anchor} is not among the images")
    gauge = replace(cfg.gauge, anchor=anchor)

    if cfg.mode == "lsm_ba":
        _refine_all(tracks, cams, scene.rasters, cfg, records, classic=True)

    _triangulate_all(tracks, cams)
    res, cams = _adjust(tracks, cams, cfg, gauge)
    history = [res.internal_rmse]

    outer = 0
    rounds = cfg.max_outer if cfg.mode == "unified" else 0
    for outer in range(1, rounds + 1):
        _refine_all(tracks, cams, scene.rasters, cfg, records, classic=False)
        # refinement moves points away from errors the biases had absorbed,
        # so residuals are judged only after re-adjusting the refined block
        _, cams = _adjust(tracks, cams, cfg, gauge)
        filter_outliers(_live(tracks), cams, cfg.outlier_threshold)
        res, cams = _adjust(tracks, cams, cfg, gauge)
        history.append(res.internal_rmse)
        log.info("outer iteration %d: internal RMSE %.6f px", outer, res.internal_rmse)
        if abs(history[-2] - history[-1]) < cfg.outer_tol:
            break
    if rounds == 0:
        # no refinement round: filter the bias-corrected block once and re-adjust
        filter_outliers(_live(tracks), cams, cfg.outlier_threshold)
        res, cams = _adjust(tracks, cams, cfg, gauge)
        history.append(res.internal_rmse)

    for t in tracks:
        rec = records.setdefault(t.track_id, {"track": t.track_id})
        rec["final_status"] = t.status
        rec["eps_after"] = _n(res.track_eps[t.track_id]) if t.track_id in res.track_eps else None

    external = evaluate_external(scene.check_tracks, cams) if scene.check_tracks else None
    return RunReport(
        mode=cfg.mode,
        window=cfg.window,
        internal_rmse_history=history,
        external_rmse=external,
        diverged=sum(t.status == DIVERGED for t in tracks),
        outliers=sum(o.status == OUTLIER for t in tracks for o in t.observations),
        removed=sum(t.status == REMOVED for t in tracks),
        anchor=res.anchor,
        biases=res.biases,
        outer_iterations=outer,
        wall_clock=time.perf_counter() - t0,
        track_records=[records[k] for k in sorted(records, key=lambda k: (str(type(k)), k))],
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompareRow:
    mode: str
    window: int | None
    internal_rmse: float | None
    external_rmse: float | None
    diverged: int | None
    outliers: int | None
    error: str = ""

    def cells(self) -> list[str]:
        if self.error:
            return [self.mode, "" if self.window is None else str(self.window)] + ["failed"] * 4

        def num(v):
            return "" if v is None else format_number(v)

        return [
            self.mode,
            "" if self.window is None else str(self.window),
            num(self.internal_rmse),
            num(self.external_rmse),
            str(self.diverged),
            str(self.outliers),
        ]


def compare_cells(windows: Sequence[int], modes: Sequence[str]) -> list[tuple[str, int | None]]:
    """Sweep cells in output order; ``ba`` ignores the window and appears once."""
    cells = []
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
        if m == "ba":
            cells.append((m, None))
        else:
            cells.extend((m, int(w)) for w in windows)
    return cells


def _run_cell(args) -> CompareRow:
    scene, base, mode, window = args
    cfg = replace(base, mode=mode, window=window if window is not None else base.window)
    try:
        rep = run(scene, cfg)
    except SatblockError as exc:
        return CompareRow(mode, window, None, None, None, None, error=str(exc) or type(exc).__name__)
    return CompareRow(mode, window, rep.internal_rmse, rep.external_rmse, rep.diverged, rep.outliers)


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("SATBLOCK_THREADS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SATBLOCK_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def compare_modes(
    scene: SceneData,
    windows: Sequence[int],
    modes: Sequence[str] = MODES,
    base: PipelineConfig | None = None,
    workers: int | None = None,
) -> list[CompareRow]:
    """Run every (mode, window) cell on identical inputs; never aborts on a failed cell."""
    base = base or PipelineConfig()
    cells = compare_cells(windows, modes)
    for _, w in cells:
        if w is not None and (w < 3 or w % 2 == 0):
            raise ValueError(f"window must be odd and >= 3, got {w}")
    jobs = [(scene, base, m, w) for m, w in cells]
    workers = thread_count() if workers is None else max(1, workers)
    if workers == 1 or len(jobs) == 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_cell, jobs))


def rows_to_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_HEADER)
    for r in rows:
        wr.writerow(r.cells())
    return buf.getvalue()


def table_by_mode(rows: Sequence[CompareRow]) -> Mapping[str, dict]:
    out: dict[str, dict] = {}
    for r in rows:
        out.setdefault(r.mode, {})[r.window] = r
    return out
