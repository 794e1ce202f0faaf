"""``satblock`` command line: synth, run, compare, eval.

Exit codes: 0 success, 1 computation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .block_adjust import GaugeConfig
from .errors import SatblockError
from .pipeline import MODES, PipelineConfig, compare_modes, rows_to_csv, run
from .scene_io import (
    dump_json,
    load_scene,
    read_report,
    read_truth,
    write_report,
    write_scene,
    write_track_records,
)
from .synth import SceneSpec, render_scene, truth_error

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DEFAULT_WINDOWS = (5, 7, 9, 11, 13, 15, 17, 19, 21)

log = logging.getLogger("satblock")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def odd_window(text: str) -> int:
    try:
        w = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be an integer, got {text!r}") from None
    if w < 3 or w % 2 == 0:
        raise argparse.ArgumentTypeError(f"window must be odd and >= 3, got {w}")
    return w


def window_list(text: str) -> list[int]:
    return [odd_window(t) for t in text.split(",") if t.strip()]


def mode_list(text: str) -> list[str]:
    modes = [t.strip() for t in text.split(",") if t.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"modes must be drawn from {','.join(MODES)}")
    return modes


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so that --config values can fill the gaps
    p.add_argument("--images", type=Path, help="scene directory (img_<id>.rpc + raster)")
    p.add_argument("--tracks", type=Path, help="tracks JSONL (default: <images>/tracks.jsonl)")
    p.add_argument("--check", type=Path, help="check tracks JSONL (default: <images>/check.jsonl if present)")
    p.add_argument("--anchor", type=int, help="image whose bias is held at zero")
    p.add_argument("--max-outer", type=int, help="unified outer iterations (default 5)")
    p.add_argument("--outlier-threshold", type=float, help="reprojection outlier threshold, px (default 2)")
    p.add_argument("--P", type=float, dest="P", help="weight scale P (default 0.5)")
    p.add_argument("--sigma", type=float, help="weight fall-off sigma (default 2)")
    p.add_argument("--config", type=Path, help="JSON file of defaults; flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="satblock", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="render a synthetic scene")
    p.add_argument("--spec", type=Path, help="scene spec JSON (keys of SceneSpec)")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--format", choices=("f32", "pgm"), default="f32", help="raster format")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="run one mode on a scene")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--window", type=odd_window)
    _pipeline_flags(p)
    p.add_argument("--records", type=Path, help="write per-track refinement records (JSONL)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("compare", help="sweep modes and window sizes, write CSV")
    p.add_argument("--modes", type=mode_list)
    p.add_argument("--windows", type=window_list)
    _pipeline_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="score a report against synthetic truth")
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "run": {"mode", "window", "images", "tracks", "check", "anchor", "max_outer", "outlier_threshold", "P", "sigma"},
    "compare": {"modes", "windows", "images", "tracks", "check", "anchor", "max_outer", "outlier_threshold", "P", "sigma"},
}
_CONVERT = {
    "window": lambda v: odd_window(str(v)),
    "windows": lambda v: window_list(",".join(map(str, v)) if isinstance(v, list) else str(v)),
    "modes": lambda v: mode_list(",".join(v) if isinstance(v, list) else str(v)),
    "images": Path,
    "tracks": Path,
    "check": Path,
}


def merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from ``--config``; explicit flags win."""
    path = getattr(args, "config", None)
    if path is None:
        return args
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    allowed = _CONFIG_KEYS[args.command]
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, value in cfg.items():
        if getattr(args, key, None) is not None:
            continue
        try:
            setattr(args, key, _CONVERT.get(key, lambda v: v)(value))
        except (argparse.ArgumentTypeError, TypeError, ValueError) as exc:
            raise UsageError(f"config key {key}: {exc}") from None
    return args


def parse_args(argv=None) -> argparse.Namespace:
    """Parse and validate; raises :class:`UsageError` on bad input."""
    args = build_parser().parse_args(argv)
    args = merge_config(args)
    if args.command in ("run", "compare") and args.images is None:
        raise UsageError(f"satblock {args.command}: --images is required")
    if args.command == "run":
        args.mode = args.mode or "unified"
        args.window = args.window or 11
    if args.command == "compare":
        args.modes = args.modes or list(MODES)
        args.windows = args.windows or list(DEFAULT_WINDOWS)
    if getattr(args, "max_outer", None) is not None and args.max_outer < 0:
        raise UsageError("--max-outer must be >= 0")
    return args


def pipeline_config(args, mode: str = "unified", window: int = 11) -> PipelineConfig:
    kw = {}
    for name in ("max_outer", "outlier_threshold", "P", "sigma"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    try:
        return PipelineConfig(mode=mode, window=window, gauge=GaugeConfig(anchor=args.anchor), **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    d = {}
    if args.spec is not None:
        try:
            d = json.loads(args.spec.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read spec {args.spec}: {exc}") from None
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = SceneSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad scene spec: {exc}") from None
    scene = render_scene(spec)
    write_scene(args.out, scene, args.format)
    print(f"wrote {len(scene.models)} images, {len(scene.tracks)} tracks, {len(scene.check_tracks)} check tracks to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = pipeline_config(args, args.mode, args.window)
    scene = load_scene(args.images, args.tracks, args.check)
    report = run(scene, cfg)
    write_report(args.out, report)
    if args.records is not None:
        write_track_records(args.records, report.track_records)
    ext = "n/a" if report.external_rmse is None else f"{report.external_rmse:.4f}"
    print(
        f"{report.mode} w={report.window}: internal {report.internal_rmse:.4f} px, external {ext} px, "
        f"{report.diverged} diverged, {report.outliers} outliers"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    base = pipeline_config(args)
    scene = load_scene(args.images, args.tracks, args.check)
    rows = compare_modes(scene, args.windows, args.modes, base)
    text = rows_to_csv(rows)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    failed = [r for r in rows if r.error]
    for r in failed:
        log.warning("cell %s w=%s failed: %s", r.mode, r.window, r.error)
    print(f"wrote {len(rows)} rows to {args.out} ({len(failed)} failed)")
    return EXIT_OK


def cmd_eval(args) -> int:
    truth = read_truth(args.truth)
    report = read_report(args.report)
    out = {
        "mode": report.mode,
        "window": report.window,
        "bias_rmse_px": float(f"{truth_error(report, truth):.12g}"),
        "internal_rmse_px": report.internal_rmse,
        "external_rmse_px": report.external_rmse,
        "diverged": report.diverged,
        "outliers": report.outliers,
    }
    sys.stdout.write(dump_json(out))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "compare": cmd_compare, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"satblock {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SatblockError, OSError) as exc:
        print(f"satblock {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
