"""Rational polynomial camera model with constant image-space bias.

Ground coordinates are ``(lat, lon, h)`` in degrees, degrees and meters.
Image coordinates are ``(x, y)`` = (column, row) in pixels.

Coefficient ordering follows the RPC00B convention. With ``L`` the
normalized longitude, ``P`` the normalized latitude and ``H`` the normalized
height, the 20 terms are::

     1  1       6  L*H      11  P*L*H    16  P^3
     2  L       7  P*H      12  L^3      17  P*H^2
     3  P       8  L^2      13  L*P^2    18  L^2*H
     4  H       9  P^2      14  L*H^2    19  P^2*H
     5  L*P    10  H^2      15  L^2*P    20  H^3

The sample (column) polynomials map to ``x`` and the line (row) polynomials
map to ``y``. A biased projection subtracts the bias after denormalization::

    x = SAMP_SCALE * Rx(P, L, H) + SAMP_OFF - x0
    y = LINE_SCALE * Ry(P, L, H) + LINE_OFF - y0
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .errors import InverseDivergenceError, SceneFormatError, SingularEvaluationError

# (exponent of L, exponent of P, exponent of H) per RPC00B term
TERM_EXPONENTS = np.array(
    [
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (1, 1, 0), (1, 0, 1), (0, 1, 1), (2, 0, 0),
        (0, 2, 0), (0, 0, 2), (1, 1, 1), (3, 0, 0),
        (1, 2, 0), (1, 0, 2), (2, 1, 0), (0, 3, 0),
        (0, 1, 2), (2, 0, 1), (0, 2, 1), (0, 0, 3),
    ],
    dtype=np.intp,
)

SINGULAR_DEN = 1e-10
VALIDITY_BOX = 1.5

BACKWARD_MAX_ITER = 20
BACKWARD_PIXEL_TOL = 1e-4


class RpcExtrapolationWarning(UserWarning):
    """Evaluation point lies outside the +-1.5 normalized validity box."""


class GroundPoint(NamedTuple):
    lat: float
    lon: float
    h: float


class ImagePoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class BiasCorrection:
    """Constant image-space shift ``(x0, y0)`` in pixels."""

    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x0) and math.isfinite(self.y0)):
            raise ValueError(f"bias must be finite, got ({self.x0}, {self.y0})")


def _frozen(values, name):
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (20,):
        raise ValueError(f"{name} needs 20 coefficients, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite coefficients")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RpcModel:
    """Immutable RPC sensor model (no bias; see :class:`Camera`)."""

    samp_num: np.ndarray
    samp_den: np.ndarray
    line_num: np.ndarray
    line_den: np.ndarray
    samp_off: float
    samp_scale: float
    line_off: float
    line_scale: float
    lat_off: float
    lat_scale: float
    lon_off: float
    lon_scale: float
    h_off: float
    h_scale: float

    def __post_init__(self):
        for name in ("samp_num", "samp_den", "line_num", "line_den"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        for name in ("samp_scale", "line_scale", "lat_scale", "lon_scale", "h_scale"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be > 0, got {v}")
        for name in ("samp_off", "line_off", "lat_off", "lon_off", "h_off"):
            if not math.isfinite(float(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        for name in ("samp_den", "line_den"):
            if getattr(self, name)[0] != 1.0:
                raise ValueError(f"{name} constant term must be 1 (got {getattr(self, name)[0]})")

    def __eq__(self, other):
        if not isinstance(other, RpcModel):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("samp_num", "samp_den", "line_num", "line_den")
        ) and self.scalars() == other.scalars()

    __hash__ = None

    def scalars(self):
        return (
            self.samp_off, self.samp_scale, self.line_off, self.line_scale,
            self.lat_off, self.lat_scale, self.lon_off, self.lon_scale,
            self.h_off, self.h_scale,
        )

    @property
    def ground_offset(self):
        return np.array([self.lat_off, self.lon_off, self.h_off])

    @property
    def ground_scale(self):
        return np.array([self.lat_scale, self.lon_scale, self.h_scale])

    def normalize(self, lat, lon, h):
        return (
            (np.asarray(lat, float) - self.lat_off) / self.lat_scale,
            (np.asarray(lon, float) - self.lon_off) / self.lon_scale,
            (np.asarray(h, float) - self.h_off) / self.h_scale,
        )

    def coefficient_stack(self):
        """(4, 20) array: samp_num, samp_den, line_num, line_den."""
        return np.stack([self.samp_num, self.samp_den, self.line_num, self.line_den])


# ---------------------------------------------------------------------------
# polynomial machinery
# ---------------------------------------------------------------------------


def _bcast(P, L, H):
    P, L, H = np.asarray(P, float), np.asarray(L, float), np.asarray(H, float)
    if P.shape == L.shape == H.shape:
        return P, L, H
    return np.broadcast_arrays(P, L, H)


def monomials(P, L, H):
    """RPC00B monomial vector(s), shape ``(..., 20)``."""
    P, L, H = _bcast(P, L, H)
    m = np.empty(P.shape + (20,))
    LP, LH, PH = L * P, L * H, P * H
    LL, PP, HH = L * L, P * P, H * H
    m[..., 0] = 1.0
    m[..., 1], m[..., 2], m[..., 3] = L, P, H
    m[..., 4], m[..., 5], m[..., 6] = LP, LH, PH
    m[..., 7], m[..., 8], m[..., 9] = LL, PP, HH
    m[..., 10] = LP * H
    m[..., 11], m[..., 12], m[..., 13], m[..., 14] = LL * L, L * PP, L * HH, LL * P
    m[..., 15], m[..., 16], m[..., 17], m[..., 18] = PP * P, P * HH, LL * H, PP * H
    m[..., 19] = HH * H
    return m


def _derivative_maps() -> np.ndarray:
    """``D[v]`` maps the monomial vector to its partials w.r.t. variable ``v``.

    Every partial of a term of degree <= 3 is a constant times another term,
    so ``m @ D[v]`` is exact. ``v`` runs over (P, L, H); the exponent table is
    ordered (L, P, H).
    """
    index = {tuple(e): k for k, e in enumerate(TERM_EXPONENTS.tolist())}
    D = np.zeros((3, 20, 20))
    for v, col in enumerate((1, 0, 2)):
        for j, e in enumerate(TERM_EXPONENTS.tolist()):
            if e[col]:
                lower = list(e)
                lower[col] -= 1
                D[v, index[tuple(lower)], j] = e[col]
    return D


_DERIV = _derivative_maps()
_DERIV_FLAT = np.concatenate(list(_DERIV), axis=1)  # (20, 60)


def monomial_gradients(P, L, H):
    """Monomials and their partials w.r.t. (P, L, H).

    Returns ``(m, dm)`` with ``m`` of shape ``(..., 20)`` and ``dm`` of shape
    ``(..., 3, 20)``; ``dm[..., 0, :]`` is d/dP, ``[..., 1, :]`` d/dL,
    ``[..., 2, :]`` d/dH.
    """
    m = monomials(P, L, H)
    dm = (m @ _DERIV_FLAT).reshape(m.shape[:-1] + (3, 20))
    return m, dm


def _check_den(den):
    if np.any(np.abs(den) < SINGULAR_DEN):
        raise SingularEvaluationError(f"RPC denominator {np.min(np.abs(den)):.3g} below {SINGULAR_DEN}")


def _warn_box(P, L, H):
    if max(abs(float(np.max(np.abs(P)))), float(np.max(np.abs(L))), float(np.max(np.abs(H)))) > VALIDITY_BOX:
        warnings.warn("evaluation outside the RPC validity box", RpcExtrapolationWarning, stacklevel=3)


def eval_ratio(model: RpcModel, axis: str, g_norm) -> float:
    """Evaluate ``Num/Den`` for ``axis`` ('x' sample, 'y' line) at normalized (P, L, H)."""
    P, L, H = (float(v) for v in g_norm)
    if axis == "x":
        num, den = model.samp_num, model.samp_den
    elif axis == "y":
        num, den = model.line_num, model.line_den
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    _warn_box(P, L, H)
    m = monomials(P, L, H)
    d = float(m @ den)
    _check_den(d)
    return float(m @ num) / d


def forward_project(model: RpcModel, bias: BiasCorrection, p: GroundPoint) -> ImagePoint:
    P, L, H = model.normalize(p[0], p[1], p[2])
    _warn_box(P, L, H)
    m = monomials(float(P), float(L), float(H))
    dx, dy = float(m @ model.samp_den), float(m @ model.line_den)
    _check_den(np.array([dx, dy]))
    rx = float(m @ model.samp_num) / dx
    ry = float(m @ model.line_num) / dy
    return ImagePoint(
        model.samp_scale * rx + model.samp_off - bias.x0,
        model.line_scale * ry + model.line_off - bias.y0,
    )


def _ratio_and_grad(coef, m, dm):
    """Values and (P, L, H) gradients of the two ratios.

    ``coef`` is ``(..., 4, 20)``, ``m`` ``(..., 20)``, ``dm`` ``(..., 3, 20)``.
    Returns ``r`` ``(..., 2)`` and ``dr`` ``(..., 2, 3)``.
    """
    ct = np.swapaxes(coef, -1, -2)
    vals = np.matmul(m[..., None, :], ct)[..., 0, :]
    grads = np.swapaxes(np.matmul(dm, ct), -1, -2)
    num, den = vals[..., 0::2], vals[..., 1::2]
    _check_den(den)
    dnum, dden = grads[..., 0::2, :], grads[..., 1::2, :]
    r = num / den
    dr = (dnum - r[..., None] * dden) / den[..., None]
    return r, dr


def projection_jacobian(model: RpcModel, p: GroundPoint) -> np.ndarray:
    """2x3 partials of the normalized ratios (Rx, Ry) w.r.t. (lat, lon, h).

    Units are per degree for lat/lon and per meter for h.
    """
    P, L, H = model.normalize(p[0], p[1], p[2])
    m, dm = monomial_gradients(float(P), float(L), float(H))
    _, dr = _ratio_and_grad(model.coefficient_stack(), m, dm)
    return dr / model.ground_scale


def backward_project(model: RpcModel, bias: BiasCorrection, q: ImagePoint, h: float) -> GroundPoint:
    """Ground point at height ``h`` that projects onto ``q``.

    Damped Newton on normalized (P, L); the step is halved while it
    increases the pixel residual.
    """
    qx, qy = float(q[0]), float(q[1])
    if not (math.isfinite(qx) and math.isfinite(qy) and math.isfinite(float(h))):
        raise InverseDivergenceError("non-finite input to backward projection")
    coef = model.coefficient_stack()
    Hn = (float(h) - model.h_off) / model.h_scale
    img_scale = np.array([model.samp_scale, model.line_scale])
    target = np.array(
        [(qx + bias.x0 - model.samp_off) / model.samp_scale, (qy + bias.y0 - model.line_off) / model.line_scale]
    )

    def resid(pl):
        m, dm = monomial_gradients(pl[0], pl[1], Hn)
        r, dr = _ratio_and_grad(coef, m, dm)
        return (r - target) * img_scale, dr[:, :2] * img_scale[:, None]

    pl = np.zeros(2)
    try:
        f, J = resid(pl)
    except SingularEvaluationError as exc:
        raise InverseDivergenceError(str(exc)) from exc
    err = float(np.hypot(*f))
    for _ in range(BACKWARD_MAX_ITER):
        if err < 1e-9:
            break
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError as exc:
            raise InverseDivergenceError("singular Jacobian in backward projection") from exc
        t = 1.0
        while True:
            cand = pl + t * step
            try:
                fc, Jc = resid(cand)
                ec = float(np.hypot(*fc))
            except SingularEvaluationError:
                ec = math.inf
            if math.isfinite(ec) and ec < err:
                break
            t *= 0.5
            if t < 1e-6:
                break
        if not (math.isfinite(ec) and ec < err):
            break
        pl, f, J, err = cand, fc, Jc, ec
    if not err <= BACKWARD_PIXEL_TOL:
        raise InverseDivergenceError(f"backward projection did not converge (residual {err:.3g} px)")
    if max(abs(pl[0]), abs(pl[1]), abs(Hn)) > VALIDITY_BOX:
        warnings.warn("backward projection outside the RPC validity box", RpcExtrapolationWarning, stacklevel=2)
    return GroundPoint(
        float(model.lat_off + model.lat_scale * pl[0]),
        float(model.lon_off + model.lon_scale * pl[1]),
        float(h),
    )


# ---------------------------------------------------------------------------
# vectorized cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """An RPC model together with its current bias."""

    model: RpcModel
    bias: BiasCorrection = field(default_factory=BiasCorrection)

    def project(self, lat, lon, h):
        """Vectorized biased projection; returns ``(x, y)`` arrays."""
        P, L, H = self.model.normalize(lat, lon, h)
        m = monomials(P, L, H)
        vals = m @ self.model.coefficient_stack().T
        _check_den(vals[..., 1::2])
        x = self.model.samp_scale * vals[..., 0] / vals[..., 1] + self.model.samp_off - self.bias.x0
        y = self.model.line_scale * vals[..., 2] / vals[..., 3] + self.model.line_off - self.bias.y0
        return x, y

    def with_bias(self, bias: BiasCorrection) -> "Camera":
        return Camera(self.model, bias)


@dataclass(frozen=True)
class GroundFrame:
    """Normalization used for ground unknowns inside the solvers."""

    offset: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_model(cls, model: RpcModel) -> "GroundFrame":
        return cls(model.ground_offset, model.ground_scale)

    def to_frame(self, g) -> np.ndarray:
        return (np.asarray(g, float) - self.offset) / self.scale

    def from_frame(self, gh) -> np.ndarray:
        return self.offset + self.scale * np.asarray(gh, float)


class CameraSet:
    """Stacked cameras for vectorized projection of many observations.

    Ground unknowns are expressed in a shared :class:`GroundFrame` (taken from
    the lowest image id) so solvers see well-scaled columns.
    """

    def __init__(self, cameras: Mapping[int, Camera], frame: GroundFrame | None = None):
        if not cameras:
            raise ValueError("empty camera set")
        self.ids = sorted(cameras)
        self.index = {iid: k for k, iid in enumerate(self.ids)}
        self.cameras = {iid: cameras[iid] for iid in self.ids}
        models = [cameras[i].model for i in self.ids]
        self.frame = frame or GroundFrame.from_model(models[0])
        self.coef = np.stack([m.coefficient_stack() for m in models])
        self.g_off = np.stack([m.ground_offset for m in models])
        self.g_scale = np.stack([m.ground_scale for m in models])
        self.img_off = np.array([[m.samp_off, m.line_off] for m in models])
        self.img_scale = np.array([[m.samp_scale, m.line_scale] for m in models])
        self.bias = np.array([[cameras[i].bias.x0, cameras[i].bias.y0] for i in self.ids])

    def with_biases(self, biases: Mapping[int, BiasCorrection]) -> "CameraSet":
        cams = {i: self.cameras[i].with_bias(biases.get(i, self.cameras[i].bias)) for i in self.ids}
        return CameraSet(cams, self.frame)

    def biases(self) -> dict[int, BiasCorrection]:
        return {i: self.cameras[i].bias for i in self.ids}

    def rows(self, image_ids) -> np.ndarray:
        return np.fromiter((self.index[i] for i in image_ids), dtype=np.intp)

    def project(self, rows, gh, jacobian=True):
        """Project frame-normalized ground ``gh`` ``(M, 3)`` through cameras ``rows``.

        Returns pixel positions ``(M, 2)`` and, if requested, their partials
        w.r.t. ``gh`` ``(M, 2, 3)``.
        """
        rows = np.asarray(rows, dtype=np.intp)
        gh = np.asarray(gh, float).reshape(-1, 3)
        g = self.frame.offset + self.frame.scale * gh
        scale = self.g_scale[rows]
        gn = (g - self.g_off[rows]) / scale
        if jacobian:
            m, dm = monomial_gradients(gn[:, 0], gn[:, 1], gn[:, 2])
            r, dr = _ratio_and_grad(self.coef[rows], m, dm)
        else:
            m = monomials(gn[:, 0], gn[:, 1], gn[:, 2])
            vals = np.einsum("mkt,mt->mk", self.coef[rows], m)
            _check_den(vals[:, 1::2])
            r = vals[:, 0::2] / vals[:, 1::2]
        s = self.img_scale[rows]
        pix = s * r + self.img_off[rows] - self.bias[rows]
        if not jacobian:
            return pix
        J = dr * s[:, :, None] * (self.frame.scale / scale)[:, None, :]
        return pix, J


# ---------------------------------------------------------------------------
# RPC text files
# ---------------------------------------------------------------------------

_SCALAR_KEYS = (
    ("LINE_OFF", "line_off"),
    ("SAMP_OFF", "samp_off"),
    ("LAT_OFF", "lat_off"),
    ("LONG_OFF", "lon_off"),
    ("HEIGHT_OFF", "h_off"),
    ("LINE_SCALE", "line_scale"),
    ("SAMP_SCALE", "samp_scale"),
    ("LAT_SCALE", "lat_scale"),
    ("LONG_SCALE", "lon_scale"),
    ("HEIGHT_SCALE", "h_scale"),
)
_COEF_KEYS = (
    ("LINE_NUM_COEFF", "line_num"),
    ("LINE_DEN_COEFF", "line_den"),
    ("SAMP_NUM_COEFF", "samp_num"),
    ("SAMP_DEN_COEFF", "samp_den"),
)
_LINE_RE = re.compile(r"^\s*([A-Z_]+(?:_\d+)?)\s*[:=]?\s*([-+]?[0-9.]+(?:[eE][-+]?\d+)?)(?=\s|$)")


def format_number(v: float) -> str:
    """12 significant digits, locale independent."""
    return format(float(v), ".12g")


def rpc_to_text(model: RpcModel) -> str:
    lines = [f"{key}: {format_number(getattr(model, attr))}" for key, attr in _SCALAR_KEYS]
    for key, attr in _COEF_KEYS:
        coef = getattr(model, attr)
        lines.extend(f"{key}_{k + 1}: {format_number(c)}" for k, c in enumerate(coef))
    return "\n".join(lines) + "\n"


def rpc_from_text(text: str, path=None) -> RpcModel:
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        match = _LINE_RE.match(raw)
        if not match:
            raise SceneFormatError(f"cannot parse RPC line {raw.strip()!r}", path, lineno)
        key, num = match.groups()
        try:
            values[key] = float(num)
        except ValueError as exc:  # pragma: no cover - regex already filters
            raise SceneFormatError(f"bad number {num!r}", path, lineno) from exc
    kwargs = {}
    for key, attr in _SCALAR_KEYS:
        if key not in values:
            raise SceneFormatError(f"missing keyword {key}", path)
        kwargs[attr] = values[key]
    for key, attr in _COEF_KEYS:
        coef = []
        for k in range(1, 21):
            name = f"{key}_{k}"
            if name not in values:
                raise SceneFormatError(f"missing keyword {name}", path)
            coef.append(values[name])
        kwargs[attr] = coef
    try:
        return RpcModel(**kwargs)
    except ValueError as exc:
        raise SceneFormatError(str(exc), path) from exc


def read_rpc(path) -> RpcModel:
    with open(path, encoding="ascii") as fh:
        return rpc_from_text(fh.read(), path)


def write_rpc(path, model: RpcModel) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(rpc_to_text(model))


def biased_cameras(models: Mapping[int, RpcModel], biases: Mapping[int, BiasCorrection] | None = None) -> dict[int, Camera]:
    biases = biases or {}
    return {i: Camera(m, biases.get(i, BiasCorrection())) for i, m in models.items()}

