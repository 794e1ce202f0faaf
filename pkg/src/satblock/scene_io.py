"""On-disk scene layout, truth files and run reports.

A scene directory holds, per image ``<id>``, an RPC text file
``img_<id>.rpc`` and a raster ``img_<id>.f32`` (or ``.pgm``), next to the
adjustment tracks ``tracks.jsonl``. Synthetic scenes add ``check.jsonl``
(noise-free held-out tracks) and ``truth.json`` (true biases, anchor, ground
points and the generating spec).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import IntegrityError, SceneFormatError
from .geo_rpc import BiasCorrection, GroundPoint, RpcModel, format_number, read_rpc, write_rpc
from .pipeline import RunReport, SceneData
from .raster import ImageRaster, read_raster, write_f32, write_pgm
from .tracks import Track, read_tracks, write_tracks

TRACKS_FILE = "tracks.jsonl"
CHECK_FILE = "check.jsonl"
TRUTH_FILE = "truth.json"
_RPC_NAME = re.compile(r"^img_(\d+)\.rpc$")
RASTER_SUFFIXES = (".f32", ".pgm")
# how far (in scale units) the image offsets may sit from the raster before
# the model is considered to belong to another image
RPC_OFFSET_SLACK = 1.0


def _num(v):
    if v is None:
        return None
    return float(format_number(v))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from exc


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def check_rpc(model: RpcModel, raster: ImageRaster, path=None) -> None:
    """Sanity-check an RPC against the raster it claims to describe.

    The constructor already rejects non-positive scales and denominators
    without a unit constant term; here the image offsets must fall within
    (or near) the raster and the ground scales must be plausible.
    """
    for off, scale, size, name in (
        (model.samp_off, model.samp_scale, raster.width, "SAMP"),
        (model.line_off, model.line_scale, raster.height, "LINE"),
    ):
        lo, hi = -RPC_OFFSET_SLACK * scale, size - 1 + RPC_OFFSET_SLACK * scale
        if not lo <= off <= hi:
            raise SceneFormatError(f"{name}_OFF {off} is outside the {raster.width}x{raster.height} raster", path)
    if abs(model.lat_off) > 90 or model.lat_scale > 90:
        raise SceneFormatError("latitude offset/scale out of range", path)
    if abs(model.lon_off) > 180 or model.lon_scale > 180:
        raise SceneFormatError("longitude offset/scale out of range", path)


def check_integrity(tracks: Iterable[Track], image_ids) -> None:
    """Every observation must reference a loaded image; track ids are unique."""
    known = set(image_ids)
    seen = set()
    for t in tracks:
        if t.track_id in seen:
            raise IntegrityError(f"duplicate track id {t.track_id!r}", t.track_id)
        seen.add(t.track_id)
        for o in t.observations:
            if o.image_id not in known:
                raise IntegrityError(
                    f"track {t.track_id!r} references missing image id {o.image_id}", t.track_id, o.image_id
                )


def find_images(directory) -> dict[int, tuple[Path, Path]]:
    """Map image id to its (rpc, raster) paths."""
    directory = Path(directory)
    if not directory.is_dir():
        raise SceneFormatError("not a directory", directory)
    out = {}
    for p in sorted(directory.iterdir()):
        m = _RPC_NAME.match(p.name)
        if not m:
            continue
        image_id = int(m.group(1))
        raster = next((p.with_suffix(s) for s in RASTER_SUFFIXES if p.with_suffix(s).exists()), None)
        if raster is None:
            raise SceneFormatError(f"no raster next to {p.name} (expected .f32 or .pgm)", directory)
        out[image_id] = (p, raster)
    if not out:
        raise SceneFormatError("no img_<id>.rpc files found", directory)
    return out


def load_scene(images, tracks=None, check=None) -> SceneData:
    """Load images, models and tracks and cross-validate them.

    Args:
        images: scene directory with ``img_<id>.rpc`` and raster files.
        tracks: adjustment tracks; defaults to ``<images>/tracks.jsonl``.
        check: held-out check tracks; defaults to ``<images>/check.jsonl``
            when that file exists, otherwise no check tracks are used.
    """
    images = Path(images)
    models, rasters = {}, {}
    for image_id, (rpc_path, raster_path) in sorted(find_images(images).items()):
        model = read_rpc(rpc_path)
        raster = read_raster(raster_path, image_id)
        check_rpc(model, raster, rpc_path)
        models[image_id] = model
        rasters[image_id] = raster
    track_path = Path(tracks) if tracks is not None else images / TRACKS_FILE
    adj = read_tracks(track_path)
    check_integrity(adj, models)
    chk: list[Track] = []
    check_path = Path(check) if check is not None else images / CHECK_FILE
    if check is not None or check_path.exists():
        chk = read_tracks(check_path, provenance="check")
        check_integrity(chk, models)
        overlap = {t.track_id for t in adj} & {t.track_id for t in chk}
        if overlap:
            raise IntegrityError(f"check tracks overlap adjustment tracks: {sorted(overlap, key=str)[:5]}")
    return SceneData(models, rasters, adj, chk)


def write_scene(directory, scene, raster_format: str = "f32") -> Path:
    """Write a :class:`~satblock.synth.SynthScene` in the scene layout."""
    if raster_format not in ("f32", "pgm"):
        raise ValueError("raster_format must be 'f32' or 'pgm'")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, model in sorted(scene.models.items()):
        write_rpc(directory / f"img_{i}.rpc", model)
        if raster_format == "f32":
            write_f32(directory / f"img_{i}.f32", scene.rasters[i])
        else:
            write_pgm(directory / f"img_{i}.pgm", scene.rasters[i])
    write_tracks(directory / TRACKS_FILE, _without_ground(scene.tracks))
    write_tracks(directory / CHECK_FILE, _without_ground(scene.check_tracks))
    write_truth(directory / TRUTH_FILE, Truth.from_scene(scene))
    return directory


def _without_ground(tracks):
    return [Track(t.track_id, t.observations, provenance=t.provenance) for t in tracks]


# ---------------------------------------------------------------------------
# truth
# ---------------------------------------------------------------------------


@dataclass
class Truth:
    """Ground truth of a synthetic scene, as stored in ``truth.json``."""

    anchor: int
    biases: dict[int, BiasCorrection]
    ground: dict = field(default_factory=dict)  # track id -> GroundPoint
    match_offsets: dict[int, tuple[float, float]] = field(default_factory=dict)
    spec: dict = field(default_factory=dict)

    @classmethod
    def from_scene(cls, scene) -> "Truth":
        return cls(
            scene.anchor,
            dict(scene.biases),
            dict(scene.ground),
            dict(scene.match_offsets),
            scene.spec.to_dict(),
        )

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "biases": {str(i): [_num(b.x0), _num(b.y0)] for i, b in sorted(self.biases.items())},
            "ground": {str(k): [_num(v) for v in g] for k, g in sorted(self.ground.items(), key=lambda kv: str(kv[0]))},
            "match_offsets": {str(i): [_num(v) for v in o] for i, o in sorted(self.match_offsets.items())},
            "spec": self.spec,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Truth":
        def key(k):
            return int(k) if k.lstrip("-").isdigit() else k

        return cls(
            anchor=int(d["anchor"]),
            biases={int(k): BiasCorrection(float(v[0]), float(v[1])) for k, v in d["biases"].items()},
            ground={key(k): GroundPoint(*map(float, v)) for k, v in d.get("ground", {}).items()},
            match_offsets={int(k): (float(v[0]), float(v[1])) for k, v in d.get("match_offsets", {}).items()},
            spec=dict(d.get("spec", {})),
        )


def write_truth(path, truth: Truth) -> None:
    _write_text(path, dump_json(truth.to_dict()))


def read_truth(path) -> Truth:
    d = _read_json(path)
    try:
        return Truth.from_dict(d)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SceneFormatError(f"bad truth file: {exc}", path) from exc


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_report(path, report: RunReport) -> None:
    _write_text(path, dump_json(report.to_dict()))


def read_report(path) -> RunReport:
    d = _read_json(path)
    try:
        return RunReport.from_dict(d)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SceneFormatError(f"bad report file: {exc}", path) from exc


def write_track_records(path, records: Iterable[dict]) -> None:
    """Per-track refinement records, one JSON object per line."""

    def clean(v):
        if isinstance(v, float):
            return _num(v) if math.isfinite(v) else None
        return v

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps({k: clean(v) for k, v in rec.items()}, sort_keys=True, separators=(",", ":")) + "\n")
