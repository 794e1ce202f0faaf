"""Compare the compiled and numpy kernel backends.

Times the per-window LSM accumulation (the inner loop of every refinement
iteration) and a full refinement pass over a small synthetic scene.

    python benchmarks/bench_kernels.py [--repeat N] [--window W]
"""

from __future__ import annotations

import argparse
import importlib
import time

import numpy as np

from satblock import _pykernels
from satblock.raster import window_offsets


def _load_compiled():
    try:
        return importlib.import_module("satblock._ckernels")
    except ImportError:
        return None


def _best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_accumulate(backend, w: int, calls: int, repeat: int) -> float:
    rng = np.random.default_rng(0)
    img = rng.normal(128.0, 30.0, (256, 256))
    dx, dy = window_offsets(w)
    ref = rng.normal(size=dx.size)
    params = np.array([0.3, 1.01, 0.02, -0.2, 0.99, -0.01, 0.0, 1.0])

    def loop():
        for _ in range(calls):
            backend.lsm_accumulate(img, 128.0, 1 / 30.0, 120.5, 130.25, params, dx, dy, ref)

    return _best_of(loop, repeat) / calls


def bench_refinement(backend_name: str, w: int, repeat: int) -> float:
    import satblock.kernels as kernels
    from satblock.pipeline import PipelineConfig, SceneData, _refine_all
    from satblock.synth import SceneSpec, render_scene
    from satblock.tracks import clone_tracks

    impl = _load_compiled() if backend_name == "cython" else _pykernels
    saved = (kernels.sample_points, kernels.sample_points_grad, kernels.lsm_accumulate)
    kernels.sample_points = impl.sample_points
    kernels.sample_points_grad = impl.sample_points_grad
    kernels.lsm_accumulate = impl.lsm_accumulate
    try:
        scene = SceneData.from_synth(render_scene(SceneSpec(seed=1, grid=128, n_points=40, n_check=0)))
        cfg = PipelineConfig(mode="lsm_ba", window=w)

        def once():
            _refine_all(clone_tracks(scene.tracks), None, scene.rasters, cfg, {}, classic=True)

        return _best_of(once, repeat)
    finally:
        kernels.sample_points, kernels.sample_points_grad, kernels.lsm_accumulate = saved


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--window", type=int, default=11)
    ap.add_argument("--calls", type=int, default=2000)
    args = ap.parse_args(argv)

    compiled = _load_compiled()
    backends = [("python", _pykernels)] + ([("cython", compiled)] if compiled else [])
    if compiled is None:
        print("compiled extension not built; timing the numpy backend only")

    print(f"lsm_accumulate, {args.window}x{args.window} window")
    times = {}
    for name, mod in backends:
        times[name] = bench_accumulate(mod, args.window, args.calls, args.repeat)
        print(f"  {name:<7} {1e6 * times[name]:9.1f} us/call")
    if len(times) == 2:
        print(f"  speedup {times['python'] / times['cython']:.1f}x")

    print(f"classic refinement of 40 tracks, {args.window}x{args.window} window")
    full = {}
    for name, _ in backends:
        full[name] = bench_refinement(name, args.window, args.repeat)
        print(f"  {name:<7} {full[name]:9.3f} s")
    if len(full) == 2:
        print(f"  speedup {full['python'] / full['cython']:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
