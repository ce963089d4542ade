"""Differentiable point splatting: dense label and weight images from sparse points.

Each point splats a depth label as a scaled Gaussian and a data weight as a
higher-order (super-) Gaussian, both truncated to an odd kernel window around
the point's nearest pixel. Per-pixel aggregation weights come from radiative
transmittance along the viewing ray: a point's share is the quadrature of its
depth Gaussian times the transmittance accumulated by everything in front of
it (and by its own density, which saturates the weight of an isolated point
at ``alpha_target``). The adjoint pass maps gradients on the two output
images back to per-point position, depth and log-weight.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _splat_kernels as _k
from .scene_io import Point, PointSet

__all__ = [
    "SplatConfig", "SplatImages", "PointGradients", "SplatError",
    "label_single", "weight_single", "transmittance_point", "alpha",
    "render", "render_adjoint", "active_mask", "calibrate_rho",
]


class SplatError(RuntimeError):
    """Renderer misuse: bad configuration or stale adjoint cache."""


@dataclass
class SplatConfig:
    """Splat kernel shapes, depth quadrature, and density calibration.

    ``rho`` is the Gaussian density magnitude; when left ``None`` it is
    calibrated once so that an isolated point at a pixel center reaches an
    aggregation weight of ``alpha_target``. ``depth_order`` selects which
    label is nearer: ``"ascending"`` for depth (small z in front) or
    ``"descending"`` for disparity (large z in front).
    """

    sigma_s: float = 1.3
    sigma_lambda: float = 0.71
    p: int = 2
    sigma_z: float = 1.0
    n_samples: int = 8
    rho: float | None = None
    kernel: int = 7
    tile: int = 64
    depth_order: str = "ascending"
    alpha_target: float = 0.995
    _rho_cache: float | None = field(default=None, init=False, repr=False, compare=False)

    def validate(self) -> None:
        if self.sigma_s <= 0 or self.sigma_lambda <= 0 or self.sigma_z <= 0:
            raise SplatError("all sigmas must be positive")
        if self.p < 1:
            raise SplatError("super-Gaussian order p must be >= 1")
        if self.n_samples < 2:
            raise SplatError("need at least 2 depth quadrature samples")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SplatError("kernel size must be odd and positive")
        if self.kernel < 2 * math.floor(3.0 * self.sigma_s) + 1:
            raise SplatError(
                f"kernel {self.kernel} truncates the label Gaussian early; "
                f"need >= {2 * math.floor(3.0 * self.sigma_s) + 1} for sigma_s={self.sigma_s}"
            )
        if self.tile < 1:
            raise SplatError("tile must be positive")
        if self.depth_order not in ("ascending", "descending"):
            raise SplatError("depth_order must be 'ascending' or 'descending'")
        if not (0.5 < self.alpha_target <= 1.05):
            raise SplatError("alpha_target outside the calibratable range")

    @property
    def half_extent(self) -> int:
        return self.kernel // 2

    @property
    def zsign(self) -> float:
        return 1.0 if self.depth_order == "ascending" else -1.0

    def resolved_rho(self) -> float:
        if self.rho is not None:
            return float(self.rho)
        if self._rho_cache is None:
            self._rho_cache = calibrate_rho(self)
        return self._rho_cache


def _quadrature(cfg: SplatConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """Midpoint samples over +-3 sigma_z: offsets, Gaussian values, step length."""
    n = cfg.n_samples
    ds = 6.0 * cfg.sigma_z / n
    offs = -3.0 * cfg.sigma_z + ds * (np.arange(n) + 0.5)
    gvals = np.exp(-((offs / cfg.sigma_z) ** 2) / 2.0)
    return offs, gvals, ds


def _cum(s: float, z: float, sigma_z: float) -> float:
    """Closed-form integral of exp(-(t-z)^2 / 2 sigma_z^2) over [z - 3 sigma_z, s]."""
    u = (s - z) / (sigma_z * math.sqrt(2.0))
    u = min(max(u, -_k.C3), _k.C3)
    return sigma_z * _k.SQRT_HALF_PI * (_k.E3 + math.erf(u))


def _isolated_alpha(rho: float, cfg: SplatConfig) -> float:
    offs, gvals, ds = _quadrature(cfg)
    acc = 0.0
    for off, g in zip(offs, gvals):
        acc += math.exp(-rho * _cum(off, 0.0, cfg.sigma_z)) * g
    return rho * ds * acc


def calibrate_rho(cfg: SplatConfig) -> float:
    """Bisect the density magnitude so an isolated centered point hits alpha_target."""
    lo = 1e-6 / cfg.sigma_z
    hi = 64.0 / cfg.sigma_z
    if _isolated_alpha(hi, cfg) < cfg.alpha_target:
        raise SplatError(f"alpha_target {cfg.alpha_target} not reachable; reduce it")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _isolated_alpha(mid, cfg) < cfg.alpha_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Single-point evaluations (pure, scalar)


def _in_window(point: Point, pixel, cfg: SplatConfig) -> bool:
    k = cfg.half_extent
    cx = math.floor(point.x + 0.5)
    cy = math.floor(point.y + 0.5)
    return abs(pixel[0] - cx) <= k and abs(pixel[1] - cy) <= k


def _gauss_xy(point: Point, pixel, sigma: float) -> float:
    r2 = (pixel[0] - point.x) ** 2 + (pixel[1] - point.y) ** 2
    return math.exp(-r2 / (2.0 * sigma * sigma))


def label_single(point: Point, pixel, cfg: SplatConfig) -> float:
    """Label contribution of one point at a pixel: z * Gaussian, zero outside the kernel."""
    if not _in_window(point, pixel, cfg):
        return 0.0
    return point.z * _gauss_xy(point, pixel, cfg.sigma_s)


def weight_single(point: Point, pixel, cfg: SplatConfig) -> float:
    """Weight contribution: exp(-r) * super-Gaussian of order p, zero outside the kernel."""
    if not _in_window(point, pixel, cfg):
        return 0.0
    return math.exp(-point.r) * _gauss_xy(point, pixel, cfg.sigma_lambda) ** cfg.p


def transmittance_point(point: Point, pixel, cfg: SplatConfig) -> float:
    """Fraction of radiance surviving one point's full density along the pixel ray.

    Closed form of the attenuation integral for a single truncated Gaussian:
    ``exp(-rho * g * sigma_z * sqrt(pi/2) * 2 erf(3/sqrt(2)))`` where g is the
    point's normalized screen-space Gaussian at the pixel. Always in (0, 1].
    """
    g = _gauss_xy(point, pixel, cfg.sigma_s) if _in_window(point, pixel, cfg) else 0.0
    c = _k.SQRT_HALF_PI * cfg.sigma_z * cfg.resolved_rho() * 2.0 * _k.E3
    return math.exp(-c * g)


def alpha(point: Point, pixel, occluders, cfg: SplatConfig) -> float:
    """Occlusion-aware aggregation weight of a point at a pixel.

    ``occluders`` lists the contributors strictly nearer than ``point`` at
    this pixel (depth sorted). The quadrature marches n_samples midpoints
    across the point's +-3 sigma_z band; at each sample the transmittance is
    the product over all density accumulated so far, including the point's
    own, so an isolated point saturates at ``alpha_target``. A fully passed
    occluder contributes exactly its ``transmittance_point`` factor.
    """
    rho = cfg.resolved_rho()
    sign = cfg.zsign
    offs, gvals, ds = _quadrature(cfg)
    others = [
        (sign * o.z, _gauss_xy(o, pixel, cfg.sigma_s) if _in_window(o, pixel, cfg) else 0.0)
        for o in occluders
    ]
    zg = sign * point.z
    g_self = _gauss_xy(point, pixel, cfg.sigma_s) if _in_window(point, pixel, cfg) else 0.0
    acc = 0.0
    for off, g in zip(offs, gvals):
        s = zg + off
        tau = rho * g_self * _cum(s, zg, cfg.sigma_z)
        for z_o, g_o in others:
            tau += rho * g_o * _cum(s, z_o, cfg.sigma_z)
        acc += math.exp(-tau) * g
    return rho * ds * acc


# ---------------------------------------------------------------------------
# Full-image rendering


@dataclass
class _RenderCache:
    shape: tuple[int, int]
    starts: np.ndarray
    pair_pt: np.ndarray
    pair_px: np.ndarray
    gs: np.ndarray
    gl: np.ndarray
    dxs: np.ndarray
    dys: np.ndarray
    alphas: np.ndarray
    zg: np.ndarray
    label: np.ndarray
    w: np.ndarray
    snapshot: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    rho: float
    n_points: int


@dataclass
class SplatImages:
    """Rendered label image, weight image, and the contributor cache for the adjoint."""

    labels: np.ndarray
    weights: np.ndarray
    cache: _RenderCache

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class PointGradients:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray


def active_mask(points: PointSet, shape: tuple[int, int], cfg: SplatConfig) -> np.ndarray:
    """Points that may touch the grid: finite, flagged active, within the kernel margin."""
    h, w = shape
    k = cfg.half_extent
    finite = (
        np.isfinite(points.x) & np.isfinite(points.y)
        & np.isfinite(points.z) & np.isfinite(points.r)
    )
    inside = (
        (points.x >= -k) & (points.x <= w + k)
        & (points.y >= -k) & (points.y <= h + k)
    )
    return points.active & finite & inside


def _build_pairs(points: PointSet, shape: tuple[int, int], cfg: SplatConfig):
    h, w = shape
    k = cfg.half_extent
    act = np.flatnonzero(active_mask(points, shape, cfg))
    if act.size == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0, dtype=np.float64)
        return np.zeros(h * w + 1, dtype=np.int64), empty_i, empty_i, empty_f, empty_f
    cx = np.floor(points.x[act] + 0.5).astype(np.int64)
    cy = np.floor(points.y[act] + 0.5).astype(np.int64)
    span = np.arange(-k, k + 1, dtype=np.int64)
    px = cx[:, None, None] + span[None, None, :]  # (n_act, 1, 2k+1)
    py = cy[:, None, None] + span[None, :, None]  # (n_act, 2k+1, 1)
    px, py = np.broadcast_arrays(px, py)
    valid = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    pt = np.broadcast_to(act[:, None, None], px.shape)
    pair_pt = pt[valid]
    pair_px = (py[valid] * w + px[valid]).astype(np.int64)
    zsign = cfg.zsign
    order = np.lexsort((pair_pt, zsign * points.z[pair_pt], pair_px))
    pair_pt = pair_pt[order]
    pair_px = pair_px[order]
    pix_x = pair_px % w
    pix_y = pair_px // w
    dxs = pix_x - points.x[pair_pt]
    dys = pix_y - points.y[pair_pt]
    starts = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(np.bincount(pair_px, minlength=h * w), out=starts[1:])
    return starts, pair_pt, pair_px, dxs, dys


def _bands(n_rows: int, w: int, tile: int):
    rows = max(1, min(tile, n_rows))
    return [(r * w, min(r + rows, n_rows) * w) for r in range(0, n_rows, rows)]


def render(points: PointSet, shape: tuple[int, int], cfg: SplatConfig,
           threads: int = 1) -> SplatImages:
    """Splat a point set onto an H x W grid.

    Work is split into bands of ``cfg.tile`` rows; every pixel is computed
    from its full contributor list, so the result is bit-identical for any
    tile size and thread count. Inactive points are skipped.
    """
    cfg.validate()
    h, w = shape
    rho = cfg.resolved_rho()
    starts, pair_pt, pair_px, dxs, dys = _build_pairs(points, shape, cfg)
    r2 = dxs * dxs + dys * dys
    gs = np.exp(-r2 / (2.0 * cfg.sigma_s**2))
    gl = np.exp(-cfg.p * r2 / (2.0 * cfg.sigma_lambda**2))
    zg = cfg.zsign * points.z
    label = points.z.astype(np.float64, copy=True)
    wts = points.weights
    offs, gvals, ds = _quadrature(cfg)
    out_s = np.zeros(h * w)
    out_lam = np.zeros(h * w)
    alphas = np.zeros(len(pair_pt))
    bands = _bands(h, w, cfg.tile)

    def run_band(band):
        lo, hi = band
        _k.forward_range(lo, hi, starts, pair_pt, gs, gl, zg, label, wts,
                         offs, gvals, rho, cfg.sigma_z, ds, out_s, out_lam, alphas)

    if threads > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_band, bands))
    else:
        for band in bands:
            run_band(band)
    cache = _RenderCache(
        shape=shape, starts=starts, pair_pt=pair_pt, pair_px=pair_px,
        gs=gs, gl=gl, dxs=dxs, dys=dys, alphas=alphas, zg=zg, label=label,
        w=wts, snapshot=(points.x.copy(), points.y.copy(), points.z.copy(), points.r.copy()),
        rho=rho, n_points=len(points),
    )
    return SplatImages(out_s.reshape(h, w), out_lam.reshape(h, w), cache)


def render_adjoint(points: PointSet, cfg: SplatConfig, grad_labels: np.ndarray,
                   grad_weights: np.ndarray, splats: SplatImages,
                   threads: int = 1) -> PointGradients:
    """Reverse-mode derivatives of a forward render.

    Maps gradients on the label/weight images to per-point gradients in
    (x, y, z, r), including the coupling of every point's aggregation weight
    to the parameters of its occluders. Needs the cache of the matching
    forward render.
    """
    cache = splats.cache
    if cache.n_points != len(points) or not all(
        np.array_equal(a, b) for a, b in zip(cache.snapshot, (points.x, points.y, points.z, points.r))
    ):
        raise SplatError("adjoint cache does not match the point set; re-render first")
    h, w = cache.shape
    grad_labels = np.ascontiguousarray(grad_labels, dtype=np.float64).reshape(h * w)
    grad_weights = np.ascontiguousarray(grad_weights, dtype=np.float64).reshape(h * w)
    offs, gvals, ds = _quadrature(cfg)
    n = len(points)
    n_pairs = len(cache.pair_pt)
    pair_ggs = np.zeros(n_pairs)
    pair_ggl = np.zeros(n_pairs)
    bands = _bands(h, w, cfg.tile)
    buffers = []

    def run_band(band):
        lo, hi = band
        gzg = np.zeros(n)
        gzlab = np.zeros(n)
        gr = np.zeros(n)
        _k.adjoint_range(lo, hi, cache.starts, cache.pair_pt, cache.gs, cache.gl,
                         cache.zg, cache.label, cache.w, offs, gvals, cache.rho,
                         cfg.sigma_z, ds, cache.alphas, grad_labels, grad_weights,
                         pair_ggs, pair_ggl, gzg, gzlab, gr)
        return gzg, gzlab, gr

    if threads > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            buffers = list(pool.map(run_band, bands))
    else:
        buffers = [run_band(band) for band in bands]
    gzg = np.zeros(n)
    gzlab = np.zeros(n)
    gr = np.zeros(n)
    for bzg, bzl, bgr in buffers:  # fixed band order keeps sums deterministic
        gzg += bzg
        gzlab += bzl
        gr += bgr
    # pair-level Gaussian gradients to point positions
    inv_ss2 = 1.0 / (cfg.sigma_s**2)
    inv_sl2 = cfg.p / (cfg.sigma_lambda**2)
    wx = pair_ggs * cache.gs * cache.dxs * inv_ss2 + pair_ggl * cache.gl * cache.dxs * inv_sl2
    wy = pair_ggs * cache.gs * cache.dys * inv_ss2 + pair_ggl * cache.gl * cache.dys * inv_sl2
    gx = np.bincount(cache.pair_pt, weights=wx, minlength=n)
    gy = np.bincount(cache.pair_pt, weights=wy, minlength=n)
    gz = cfg.zsign * gzg + gzlab
    return PointGradients(x=gx, y=gy, z=gz, r=gr)
