"""Synthetic RPC scenes with known biases, used as a ground-truth oracle.

The scene lives in a small local east/north/up box (meters) around a fixed
geodetic origin. Each image is an oblique affine view of that box (own
ground sample distance, in-plane rotation, shear and off-nadir direction)
written as an RPC with small higher-order terms. Images are rendered by
intersecting every pixel ray with the terrain and sampling a procedural
texture there, so corresponding windows match up to interpolation and the
per-image radiometry and noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from statistics import NormalDist

import numpy as np

from .block_adjust import depth_datum
from .errors import EvaluationError
from .geo_rpc import (
    BiasCorrection,
    Camera,
    GroundPoint,
    RpcModel,
    _ratio_and_grad,
    format_number,
    monomial_gradients,
)
from .raster import ImageRaster
from .tracks import Observation, Track

ORIGIN_LAT = 35.0
ORIGIN_LON = -117.0
M_PER_DEG = 111_320.0
BASE_GSD = 0.5  # meters per pixel of the nominal view
RENDER_ITERS = 12
TRACK_MARGIN = 24.0


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines a synthetic scene (the seed included)."""

    seed: int = 0
    n_images: int = 6
    grid: int = 256
    n_points: int = 200
    n_check: int = 30
    bias_range: float = 5.0
    match_noise: float = 0.5
    match_offset_px: float = 0.0
    gain_range: tuple[float, float] = (0.8, 1.25)
    offset_range: tuple[float, float] = (-20.0, 20.0)
    gamma: float = 1.0
    image_noise: float = 0.5
    texture_corr_px: float = 5.0
    texture_amplitude: float = 40.0
    weak_fraction: float = 0.0
    weak_contrast: float = 0.05
    terrain_amplitude: float = 15.0
    max_off_nadir_deg: float = 30.0
    max_rotation_deg: float = 8.0
    higher_order: float = 5e-4

    def __post_init__(self):
        if not 2 <= self.n_images <= 8:
            raise ValueError(f"n_images must be in [2, 8], got {self.n_images}")
        if self.grid < 64:
            raise ValueError("grid must be at least 64 px")
        if self.n_points < 1 or self.n_check < 0:
            raise ValueError("need at least one point and a non-negative check count")
        object.__setattr__(self, "gain_range", tuple(float(v) for v in self.gain_range))
        object.__setattr__(self, "offset_range", tuple(float(v) for v in self.offset_range))
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if not all(math.isfinite(float(x)) for x in vals):
                raise ValueError(f"{f.name} must be finite")
        if min(self.gain_range) <= 0:
            raise ValueError("gains must be positive")
        for name in ("bias_range", "match_noise", "match_offset_px", "image_noise", "terrain_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.texture_corr_px <= 0 or self.gamma <= 0:
            raise ValueError("texture_corr_px and gamma must be > 0")
        if not 0 <= self.weak_fraction < 1 or not 0 < self.weak_contrast <= 1:
            raise ValueError("weak_fraction must be in [0, 1) and weak_contrast in (0, 1]")
        if not 0 <= self.higher_order <= 1e-3:
            raise ValueError("higher_order must be in [0, 1e-3]")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain_range"] = list(self.gain_range)
        d["offset_range"] = list(self.offset_range)
        return d

    @property
    def half_extent(self) -> float:
        """Half width of the ground box in meters."""
        return 0.5 * self.grid * BASE_GSD

    @property
    def h_scale(self) -> float:
        return max(50.0, 2.0 * self.terrain_amplitude)


@dataclass
class SynthScene:
    spec: SceneSpec
    models: dict[int, RpcModel]
    biases: dict[int, BiasCorrection]
    rasters: dict[int, ImageRaster]
    ground: dict  # track id -> GroundPoint
    perfect_tracks: list[Track]
    tracks: list[Track]
    check_tracks: list[Track]
    anchor: int = 0
    match_offsets: dict[int, tuple[float, float]] = field(default_factory=dict)

    def cameras(self, true_bias: bool = True) -> dict[int, Camera]:
        return {
            i: Camera(m, self.biases[i] if true_bias else BiasCorrection())
            for i, m in self.models.items()
        }


def _q(v: float) -> float:
    """Round to the precision of the text formats so files round-trip exactly."""
    return float(format_number(float(v)))


def _rng(spec: SceneSpec, *stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *stream])


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def make_rpc(spec: SceneSpec, index: int) -> RpcModel:
    """Oblique affine view ``index`` of the scene box as an RPC.

    Higher-order numerator terms are bounded by ``spec.higher_order``
    (normalized units); quadratic denominator terms by a tenth of that.
    """
    rng = _rng(spec, 1, index)
    gsd = BASE_GSD * rng.uniform(0.9, 1.1)
    phi = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    shear = rng.uniform(-0.03, 0.03)
    tilt = math.tan(math.radians(rng.uniform(0.25, 1.0) * spec.max_off_nadir_deg))
    az = rng.uniform(0.0, 2.0 * math.pi)
    c0 = (spec.grid - 1) / 2.0
    samp_off, line_off = c0 + rng.uniform(-3, 3), c0 + rng.uniform(-3, 3)
    hi = rng.uniform(-1.0, 1.0, size=(4, 16))

    B, hs = spec.half_extent, spec.h_scale
    scale = B / BASE_GSD
    cp, sp = math.cos(phi), math.sin(phi)
    # partials of (E', N') w.r.t. normalized (L, P, H)
    dE = np.array([B, 0.0, hs * tilt * math.sin(az)])
    dN = np.array([0.0, B, hs * tilt * math.cos(az)])
    du = (cp * dE + sp * dN) / gsd
    dv = (-sp * dE + cp * dN) / gsd
    col, row = du - shear * dv, -dv

    def numerator(lin, k):
        c = np.zeros(20)
        c[1:4] = lin / scale
        c[4:] = spec.higher_order * hi[k]
        return c

    def denominator(k):
        c = np.zeros(20)
        c[0] = 1.0
        c[4:10] = 0.1 * spec.higher_order * hi[k, :6]
        return c

    q = np.vectorize(_q)
    return RpcModel(
        samp_num=q(numerator(col, 0)),
        samp_den=q(denominator(1)),
        line_num=q(numerator(row, 2)),
        line_den=q(denominator(3)),
        samp_off=_q(samp_off),
        samp_scale=_q(scale),
        line_off=_q(line_off),
        line_scale=_q(scale),
        lat_off=ORIGIN_LAT,
        lat_scale=_q(B / M_PER_DEG),
        lon_off=ORIGIN_LON,
        lon_scale=_q(B / (M_PER_DEG * math.cos(math.radians(ORIGIN_LAT)))),
        h_off=0.0,
        h_scale=_q(hs),
    )


# ---------------------------------------------------------------------------
# procedural fields over normalized (L, P)
# ---------------------------------------------------------------------------


class _CosineField:
    """``sum_k a_k cos(2 pi (fx_k L + fy_k P) + phase_k)`` with its gradient."""

    def __init__(self, amps, fx, fy, phase):
        self.amps, self.fx, self.fy, self.phase = amps, fx, fy, phase

    @classmethod
    def random(cls, rng, n, wavelength_lo, wavelength_hi, half_extent):
        theta = rng.uniform(0, 2 * math.pi, n)
        lam = rng.uniform(wavelength_lo, wavelength_hi, n)
        f = half_extent / lam  # cycles per normalized unit
        amps = rng.normal(size=n)
        amps *= math.sqrt(2.0 / float(amps @ amps))  # unit variance for random phases
        return cls(amps, f * np.cos(theta), f * np.sin(theta), rng.uniform(0, 2 * math.pi, n))

    @classmethod
    def gaussian(cls, rng, n, corr_length, half_extent):
        """Random-phase field whose covariance is ``exp(-r^2 / (2 corr_length^2))``.

        Wavevectors are drawn from the matching Gaussian spectral density, so
        the field carries broadband structure down to about ``2 corr_length``.
        """
        k = rng.normal(scale=1.0 / corr_length, size=(2, n))  # radians per metre
        f = k * (half_extent / (2 * math.pi))
        amps = np.full(n, math.sqrt(2.0 / n))
        return cls(amps, f[0], f[1], rng.uniform(0, 2 * math.pi, n))

    def _arg(self, L, P):
        return 2 * math.pi * (np.multiply.outer(L, self.fx) + np.multiply.outer(P, self.fy)) + self.phase

    def __call__(self, L, P):
        return np.cos(self._arg(L, P)) @ self.amps

    def grad(self, L, P):
        s = -np.sin(self._arg(L, P)) * (2 * math.pi * self.amps)
        return s @ self.fx, s @ self.fy


class _Ground:
    """Terrain and texture of a scene."""

    def __init__(self, spec: SceneSpec):
        B = spec.half_extent
        rng = _rng(spec, 2)
        self.terrain = _CosineField.random(rng, 5, 1.2 * B, 3.0 * B, B)
        # keep the terrain bounded by its amplitude
        self.terrain.amps *= 1.0 / float(np.sum(np.abs(self.terrain.amps)))
        self.t_amp = spec.terrain_amplitude
        self.texture = _CosineField.gaussian(rng, 64, spec.texture_corr_px * BASE_GSD, B)
        self.envelope = _CosineField.random(rng, 8, 0.6 * B, 1.2 * B, B)
        self.spec = spec
        self.shift = NormalDist().inv_cdf(spec.weak_fraction) if spec.weak_fraction > 0 else None

    def height(self, L, P):
        return self.t_amp * self.terrain(L, P)

    def height_grad(self, L, P):
        gx, gy = self.terrain.grad(L, P)
        return self.t_amp * gx, self.t_amp * gy

    def contrast(self, L, P):
        if self.shift is None:
            return np.ones(np.shape(L))
        s = self.spec
        ramp = 0.5 + 0.5 * np.tanh(4.0 * (self.envelope(L, P) - self.shift))
        return s.weak_contrast + (1.0 - s.weak_contrast) * ramp

    def intensity(self, L, P):
        s = self.spec
        return 128.0 + s.texture_amplitude * self.contrast(L, P) * self.texture(L, P)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _newton(model: RpcModel, ground: _Ground, tx, ty, L, P, iters: int, tol: float = 0.0):
    coef = model.coefficient_stack()
    hs, ho = model.h_scale, model.h_off
    for _ in range(iters):
        H = (ground.height(L, P) - ho) / hs
        m, dm = monomial_gradients(P, L, H)
        r, dr = _ratio_and_grad(coef, m, dm)
        gL, gP = ground.height_grad(L, P)
        # total derivative along the terrain surface
        jL = dr[..., :, 1] + dr[..., :, 2] * (gL / hs)[..., None]
        jP = dr[..., :, 0] + dr[..., :, 2] * (gP / hs)[..., None]
        ex, ey = tx - r[..., 0], ty - r[..., 1]
        det = jL[..., 0] * jP[..., 1] - jP[..., 0] * jL[..., 1]
        dL = (ex * jP[..., 1] - jP[..., 0] * ey) / det
        dP = (jL[..., 0] * ey - ex * jL[..., 1]) / det
        L, P = L + dL, P + dP
        if max(np.max(np.abs(dL)), np.max(np.abs(dP))) <= tol:
            break
    return L, P


def _intersect(model: RpcModel, bias: BiasCorrection, ground: _Ground, x, y):
    """Normalized (L, P) where the rays of pixels ``(x, y)`` meet the terrain."""
    tx = (x + bias.x0 - model.samp_off) / model.samp_scale
    ty = (y + bias.y0 - model.line_off) / model.line_scale
    coef = model.coefficient_stack()
    A = np.array([[coef[0, 1], coef[0, 2]], [coef[2, 1], coef[2, 2]]])
    sol = np.linalg.solve(A, np.stack([tx.ravel() - coef[0, 0], ty.ravel() - coef[2, 0]]))
    L, P = sol[0].reshape(x.shape), sol[1].reshape(x.shape)
    return _newton(model, ground, tx, ty, L, P, RENDER_ITERS, 1e-14)


def _intersect_grid(model: RpcModel, bias: BiasCorrection, ground: _Ground, n: int, step: int = 4):
    """:func:`_intersect` over an ``n x n`` pixel grid.

    Solved exactly on a coarse lattice, interpolated, then polished with two
    full-resolution Newton steps (the mapping is smooth, so these converge
    to machine precision).
    """
    c = np.arange(0, n + step, step, dtype=float)
    cy, cx = np.meshgrid(c, c, indexing="ij")
    Lc, Pc = _intersect(model, bias, ground, cx, cy)
    g = np.arange(n, dtype=float)
    k = np.minimum((g // step).astype(int), c.size - 2)
    f = (g - c[k]) / step

    def interp(F):
        rows = F[k] * (1 - f)[:, None] + F[k + 1] * f[:, None]
        return rows[:, k] * (1 - f) + rows[:, k + 1] * f

    y, x = np.meshgrid(g, g, indexing="ij")
    tx = (x + bias.x0 - model.samp_off) / model.samp_scale
    ty = (y + bias.y0 - model.line_off) / model.line_scale
    return _newton(model, ground, tx, ty, interp(Lc), interp(Pc), 2)


def _render_image(spec: SceneSpec, index: int, model, bias, ground: _Ground) -> ImageRaster:
    L, P = _intersect_grid(model, bias, ground, spec.grid)
    T = ground.intensity(L, P)
    if spec.gamma != 1.0:
        T = 255.0 * (np.clip(T, 0.0, 255.0) / 255.0) ** spec.gamma
    rng = _rng(spec, 3, index)
    gain = rng.uniform(*spec.gain_range)
    offset = rng.uniform(*spec.offset_range)
    img = gain * T + offset
    if spec.image_noise > 0:
        img = img + rng.normal(0.0, spec.image_noise, img.shape)
    # float32 storage is the on-disk format; keep memory and disk identical
    return ImageRaster(index, img.astype(np.float32).astype(np.float64))


def _ground_point(model: RpcModel, L, P, h) -> GroundPoint:
    return GroundPoint(
        float(model.lat_off + model.lat_scale * P),
        float(model.lon_off + model.lon_scale * L),
        float(h),
    )


def _sample_points(spec, models, biases, ground, count, stream):
    """``count`` terrain points visible with a margin in every image."""
    rng = _rng(spec, 4, stream)
    m0 = models[0]
    out = []
    lo, hi = TRACK_MARGIN, spec.grid - 1 - TRACK_MARGIN
    while len(out) < count:
        L, P = rng.uniform(-0.8, 0.8, size=(2, 4 * count))
        h = ground.height(L, P)
        lat = m0.lat_off + m0.lat_scale * P
        lon = m0.lon_off + m0.lon_scale * L
        ok = np.ones(L.shape, bool)
        for i, m in models.items():
            x, y = Camera(m, biases[i]).project(lat, lon, h)
            ok &= (x >= lo) & (x <= hi) & (y >= lo) & (y <= hi)
        for k in np.flatnonzero(ok)[: count - len(out)]:
            out.append(GroundPoint(float(lat[k]), float(lon[k]), float(h[k])))
    return out


def _project_all(points: list[GroundPoint], cams: dict[int, Camera]) -> dict[int, np.ndarray]:
    g = np.array(points, dtype=float).reshape(-1, 3)
    return {i: np.stack(cam.project(g[:, 0], g[:, 1], g[:, 2]), axis=-1) for i, cam in cams.items()}


def render_scene(spec: SceneSpec) -> SynthScene:
    """Build the full scene; deterministic in ``spec``."""
    models = {i: make_rpc(spec, i) for i in range(spec.n_images)}
    rng = _rng(spec, 5)
    biases = {0: BiasCorrection(0.0, 0.0)}
    raw = rng.uniform(-spec.bias_range, spec.bias_range, size=(spec.n_images, 2))
    raw[0] = 0.0
    # remove the component that no relative adjustment can observe
    d = depth_datum({i: Camera(m) for i, m in models.items()}, 0)
    c = np.concatenate([d[i] for i in range(spec.n_images)])
    nc = float(c @ c)
    if nc > 0:
        raw = (raw.ravel() - c * float(c @ raw.ravel()) / nc).reshape(-1, 2)
    for i in range(1, spec.n_images):
        biases[i] = BiasCorrection(_q(raw[i, 0]), _q(raw[i, 1]))
    offsets = {}
    for i in range(spec.n_images):
        ang = rng.uniform(0, 2 * math.pi)
        offsets[i] = (spec.match_offset_px * math.cos(ang), spec.match_offset_px * math.sin(ang))

    ground = _Ground(spec)
    rasters = {i: _render_image(spec, i, models[i], biases[i], ground) for i in models}
    cams = {i: Camera(models[i], biases[i]) for i in models}

    pts = _sample_points(spec, models, biases, ground, spec.n_points, 0)
    chk = _sample_points(spec, models, biases, ground, spec.n_check, 1) if spec.n_check else []
    truth = {}
    perfect, noisy = [], []
    noise_rng = _rng(spec, 6)
    pix = _project_all(pts, cams)
    for tid, g in enumerate(pts):
        truth[tid] = g
        perfect.append(Track(tid, [Observation(i, *map(float, pix[i][tid])) for i in cams], provenance="synthetic"))
        obs = []
        for i in cams:
            x, y = pix[i][tid]
            ox, oy = offsets[i]
            nx, ny = noise_rng.normal(0.0, spec.match_noise, 2) if spec.match_noise > 0 else (0.0, 0.0)
            obs.append(Observation(i, _q(x + ox + nx), _q(y + oy + ny)))
        noisy.append(Track(tid, obs, provenance="synthetic"))
    checks = []
    cpix = _project_all(chk, cams)
    for k, g in enumerate(chk):
        tid = spec.n_points + k
        truth[tid] = g
        checks.append(Track(tid, [Observation(i, *map(_q, cpix[i][k])) for i in cams], provenance="synthetic"))
    return SynthScene(spec, models, biases, rasters, truth, perfect, noisy, checks, 0, offsets)


# ---------------------------------------------------------------------------
# evaluation against truth
# ---------------------------------------------------------------------------


def truth_error(result, scene: SynthScene) -> float:
    """RMSE (px) of anchor-relative bias errors over the non-anchor images.

    ``result`` is an :class:`~satblock.block_adjust.AdjustResult` or any object
    with ``biases`` (image id -> BiasCorrection) and ``anchor`` attributes. Its
    anchor must be the scene's anchor.
    """
    rec = result.biases
    if set(rec) != set(scene.biases):
        raise EvaluationError(f"image sets differ: {sorted(rec)} vs {sorted(scene.biases)}")
    anchor = result.anchor
    if anchor != scene.anchor:
        # the depth datum of the adjustment is tied to its anchor
        raise EvaluationError(f"result anchored on image {anchor}, scene truth on image {scene.anchor}")
    ra, ta = rec[anchor], scene.biases[anchor]
    errs = []
    for i in sorted(rec):
        if i == anchor:
            continue
        ex = (rec[i].x0 - ra.x0) - (scene.biases[i].x0 - ta.x0)
        ey = (rec[i].y0 - ra.y0) - (scene.biases[i].y0 - ta.y0)
        errs.append(ex * ex + ey * ey)
    if not errs:
        raise EvaluationError("need at least one non-anchor image")
    return math.sqrt(sum(errs) / len(errs))
