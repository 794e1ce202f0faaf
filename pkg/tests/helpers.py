"""Small builders shared by the test modules."""

import numpy as np

from satblock.block_adjust import depth_datum
from satblock.geo_rpc import BiasCorrection, Camera, CameraSet, GroundPoint
from satblock.synth import SceneSpec, make_rpc
from satblock.tracks import Observation, Track


def camera_set(models, biases=None):
    biases = biases or {}
    return CameraSet({i: Camera(m, biases.get(i, BiasCorrection())) for i, m in models.items()})


def random_block(rng, n_img, n_tracks, noise=0.3, bias_range=4.0, drop=0.2):
    """Tracks over random ground points, observed with biased cameras."""
    spec = SceneSpec(seed=int(rng.integers(1000)))
    models = {i: make_rpc(spec, i) for i in range(n_img)}
    # anchor 0 unbiased and the depth component removed, as in a synthetic scene
    raw = rng.uniform(-bias_range, bias_range, (n_img, 2))
    raw[0] = 0.0
    d = depth_datum(camera_set(models), 0)
    c = np.concatenate([d[i] for i in models])
    raw = (raw.ravel() - c * (c @ raw.ravel()) / (c @ c)).reshape(-1, 2)
    truth = {i: BiasCorrection(*raw[i]) for i in models}
    cams = camera_set(models, truth)
    m0 = models[0]
    tracks = []
    for k in range(n_tracks):
        g = GroundPoint(
            m0.lat_off + rng.uniform(-0.6, 0.6) * m0.lat_scale,
            m0.lon_off + rng.uniform(-0.6, 0.6) * m0.lon_scale,
            rng.uniform(-10, 10),
        )
        obs = []
        for i in models:
            if len(obs) >= 2 and rng.random() < drop:
                continue
            x, y = cams.cameras[i].project(g.lat, g.lon, g.h)
            obs.append(Observation(i, float(x) + rng.normal(0, noise), float(y) + rng.normal(0, noise)))
        tracks.append(Track(k, obs))
    return models, truth, tracks
