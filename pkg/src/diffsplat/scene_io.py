"""File I/O for multi-view scenes: manifests, images, sparse point files, depth maps.

The manifest is a plain-text file with one record per line. ``#`` starts a
comment, blank lines are ignored::

    central 4
    view images/v00.png lf_grid 0 0 1.0
    view images/v01.png proj k00 k01 ... k22 r00 r01 ... t2

A camera entry is either ``lf_grid u v baseline_u [baseline_v]`` for
shift-only light-field views on a regular grid, or ``proj`` followed by a
row-major 3x3 intrinsic matrix (9 reals) and a row-major 3x4 world-to-camera
pose (12 reals). Image paths are resolved relative to the manifest.

Point files are CSV with a one-line header declaring the record mode::

    screen          # x, y, z  (pixel position in the central view + label)
    world           # X, Y, Z  (projected through the central camera)

Depth maps are written as grayscale PFM (``Pf``, 32-bit float, scale -1.0,
little-endian, rows bottom-up) with an 8-bit PNG preview alongside.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image


class SceneIOError(ValueError):
    """Malformed manifest, camera, point file, or depth map."""


class CameraMode(Enum):
    PROJECTIVE = "projective"
    LIGHTFIELD_SHIFT = "lf_shift"


@dataclass
class CameraModel:
    """Pinhole camera, or a shift-only light-field view on a regular grid.

    ``intrinsics`` is the 3x3 projection matrix K in pixels and ``pose`` the
    3x4 world-to-camera rigid transform [R|t]. In ``LIGHTFIELD_SHIFT`` mode
    the view is identified by grid coordinates ``(lf_u, lf_v)`` and the
    warp between views is a pure shift of ``disparity * baseline`` pixels
    per grid step; K and pose are ignored for warping.
    """

    intrinsics: np.ndarray
    pose: np.ndarray
    mode: CameraMode = CameraMode.PROJECTIVE
    lf_u: float = 0.0
    lf_v: float = 0.0
    baseline_u: float = 1.0
    baseline_v: float = 1.0

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise SceneIOError(f"intrinsics must be 3x3, got {self.intrinsics.shape}")
        if self.pose.shape != (3, 4):
            raise SceneIOError(f"pose must be 3x4, got {self.pose.shape}")
        k = self.intrinsics
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise SceneIOError("intrinsics must have positive focal entries")
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0:
            raise SceneIOError("intrinsics must be zero below the diagonal")

    def same_as(self, other: "CameraModel") -> bool:
        return (
            self.mode == other.mode
            and np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.pose, other.pose)
            and (self.lf_u, self.lf_v) == (other.lf_u, other.lf_v)
            and (self.baseline_u, self.baseline_v) == (other.baseline_u, other.baseline_v)
        )

    def project(self, world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (N,3) to pixel coordinates (N,2) and camera depth (N,).

        Only meaningful in projective mode.
        """
        if self.mode is not CameraMode.PROJECTIVE:
            raise SceneIOError("world-space projection requires a projective camera")
        world = np.asarray(world, dtype=np.float64)
        cam = world @ self.pose[:, :3].T + self.pose[:, 3]
        depth = cam[:, 2]
        proj = cam @ self.intrinsics.T
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = proj[:, :2] / proj[:, 2:3]
        return xy, depth


class View(NamedTuple):
    image: np.ndarray  # H x W x 3, values in [0, 1]
    camera: CameraModel


@dataclass
class MultiViewSet:
    """Calibrated RGB views with a designated central view."""

    views: list[View]
    central_index: int

    def __post_init__(self):
        if not self.views:
            raise SceneIOError("multi-view set needs at least one view")
        if not (0 <= self.central_index < len(self.views)):
            raise SceneIOError(
                f"central index {self.central_index} out of range for {len(self.views)} views"
            )
        h, w = self.views[0].image.shape[:2]
        for i, v in enumerate(self.views):
            if v.image.shape[:2] != (h, w):
                raise SceneIOError(
                    f"view {i} has size {v.image.shape[1]}x{v.image.shape[0]}, "
                    f"expected {w}x{h} (all views must match)"
                )
        modes = {v.camera.mode for v in self.views}
        if len(modes) > 1:
            raise SceneIOError("views mix projective and light-field cameras")
        if modes == {CameraMode.LIGHTFIELD_SHIFT}:
            k0 = self.views[0].camera.intrinsics
            for i, v in enumerate(self.views):
                if not np.array_equal(v.camera.intrinsics, k0):
                    raise SceneIOError(f"light-field view {i} has differing intrinsics")
        if len(self.views) == 1:
            warnings.warn("multi-view set has a single view; reprojection losses degenerate")

    @property
    def central(self) -> View:
        return self.views[self.central_index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.views[0].image.shape[:2]

    @property
    def mode(self) -> CameraMode:
        return self.views[0].camera.mode

    def non_central(self) -> list[View]:
        return [v for i, v in enumerate(self.views) if i != self.central_index]


class Point(NamedTuple):
    x: float
    y: float
    z: float
    r: float = 0.0


@dataclass
class PointSet:
    """Sparse scene points: screen position, depth (or disparity) label, log-weight.

    ``r`` is the log-weight, the effective splat weight is ``w = exp(-r)``.
    Invalid records are kept in place with ``active`` cleared so record index
    i in the source file is always index i here.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.active = np.asarray(self.active, dtype=bool)
        n = len(self.x)
        for name in ("y", "z", "r", "active"):
            if len(getattr(self, name)) != n:
                raise SceneIOError("point arrays must share one length")
        if n == 0:
            raise SceneIOError("point set is empty")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-self.r)

    def point(self, i: int) -> Point:
        return Point(float(self.x[i]), float(self.y[i]), float(self.z[i]), float(self.r[i]))

    def copy(self) -> "PointSet":
        return PointSet(self.x.copy(), self.y.copy(), self.z.copy(), self.r.copy(), self.active.copy())


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def load_image(path: Path, linearize: bool = False) -> np.ndarray:
    """Decode an image file to H x W x 3 float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise SceneIOError(f"image file not found: {path}") from None
    if linearize:
        arr = _srgb_to_linear(arr)
    return arr


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor x factor blocks, cropping remainder rows/columns."""
    if factor <= 1:
        return img
    h, w = img.shape[:2]
    hh, ww = (h // factor) * factor, (w // factor) * factor
    img = img[:hh, :ww]
    if img.ndim == 2:
        return img.reshape(hh // factor, factor, ww // factor, factor).mean(axis=(1, 3))
    return img.reshape(hh // factor, factor, ww // factor, factor, -1).mean(axis=(1, 3))


def _parse_camera(tokens: list[str], entry: str) -> CameraModel:
    kind = tokens[0]
    if kind == "lf_grid":
        vals = tokens[1:]
        if len(vals) not in (3, 4):
            raise SceneIOError(f"{entry}: lf_grid needs 'u v baseline [baseline_v]', got {vals}")
        u, v, bu = (float(t) for t in vals[:3])
        bv = float(vals[3]) if len(vals) == 4 else bu
        return CameraModel(
            np.eye(3), np.eye(3, 4), CameraMode.LIGHTFIELD_SHIFT,
            lf_u=u, lf_v=v, baseline_u=bu, baseline_v=bv,
        )
    if kind == "proj":
        vals = tokens[1:]
        if len(vals) != 21:
            raise SceneIOError(f"{entry}: proj camera needs 21 reals (9 K + 12 pose), got {len(vals)}")
        try:
            nums = [float(t) for t in vals]
        except ValueError as e:
            raise SceneIOError(f"{entry}: bad camera number: {e}") from None
        k = np.array(nums[:9]).reshape(3, 3)
        pose = np.array(nums[9:]).reshape(3, 4)
        try:
            return CameraModel(k, pose)
        except SceneIOError as e:
            raise SceneIOError(f"{entry}: {e}") from None
    raise SceneIOError(f"{entry}: unknown camera kind {kind!r} (want lf_grid or proj)")


def load_multiview(manifest_path, downsample: int = 1, linearize: bool = False) -> MultiViewSet:
    """Read a manifest file and decode every view it lists.

    ``downsample`` > 1 box-filters images by that integer factor (light-field
    grid baselines are scaled to keep disparities consistent).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise SceneIOError(f"manifest not found: {manifest_path}")
    central = None
    views: list[View] = []
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        entry = f"{manifest_path.name}:{lineno}"
        if tokens[0] == "central":
            if len(tokens) != 2:
                raise SceneIOError(f"{entry}: central needs one integer")
            central = int(tokens[1])
        elif tokens[0] == "view":
            if len(tokens) < 3:
                raise SceneIOError(f"{entry}: view needs an image path and a camera entry")
            img_path = manifest_path.parent / tokens[1]
            if not img_path.is_file():
                raise SceneIOError(f"{entry}: image file not found: {img_path}")
            camera = _parse_camera(tokens[2:], entry)
            img = load_image(img_path, linearize=linearize)
            if downsample > 1:
                img = box_downsample(img, downsample)
                if camera.mode is CameraMode.LIGHTFIELD_SHIFT:
                    camera.baseline_u /= downsample
                    camera.baseline_v /= downsample
            views.append(View(img, camera))
        else:
            raise SceneIOError(f"{entry}: unknown record {tokens[0]!r}")
    if central is None:
        raise SceneIOError(f"{manifest_path.name}: missing 'central' record")
    if not views:
        raise SceneIOError(f"{manifest_path.name}: no views listed")
    h0, w0 = views[0].image.shape[:2]
    for i, v in enumerate(views):
        if v.image.shape[:2] != (h0, w0):
            raise SceneIOError(
                f"{manifest_path.name}: view {i} has size "
                f"{v.image.shape[1]}x{v.image.shape[0]}, expected {w0}x{h0}"
            )
    return MultiViewSet(views, central)


def load_points(path, camera: CameraModel | None = None) -> PointSet:
    """Read a point CSV. World records are projected through ``camera``.

    Non-finite records, and world records at or behind the camera, are kept
    as inactive placeholders (a warning reports their indices) so that file
    order equals point order. Log-weights start at zero for every point.
    """
    path = Path(path)
    if not path.is_file():
        raise SceneIOError(f"point file not found: {path}")
    with path.open() as f:
        header = f.readline().strip().lower()
        if header not in ("screen", "world"):
            raise SceneIOError(f"{path.name}: first line must be 'screen' or 'world', got {header!r}")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # empty files are reported below
                data = np.loadtxt(f, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise SceneIOError(f"{path.name}: bad record: {e}") from None
    if data.size == 0:
        raise SceneIOError(f"{path.name}: no point records")
    if data.shape[1] != 3:
        raise SceneIOError(f"{path.name}: records need 3 columns, got {data.shape[1]}")
    finite = np.isfinite(data).all(axis=1)
    if header == "world":
        if camera is None:
            raise SceneIOError(f"{path.name}: world records need the central camera")
        if camera.mode is not CameraMode.PROJECTIVE:
            raise SceneIOError(f"{path.name}: world records need a projective central camera")
        xy, depth = camera.project(np.where(finite[:, None], data, 1.0))
        ok = finite & (depth > 0) & np.isfinite(xy).all(axis=1)
        x = np.where(ok, xy[:, 0], 0.0)
        y = np.where(ok, xy[:, 1], 0.0)
        z = np.where(ok, depth, 1.0)
    else:
        ok = finite
        x = np.where(ok, data[:, 0], 0.0)
        y = np.where(ok, data[:, 1], 0.0)
        z = np.where(ok, data[:, 2], 1.0)
    if not ok.any():
        raise SceneIOError(f"{path.name}: no valid point records")
    if not ok.all():
        bad = np.flatnonzero(~ok)
        shown = ", ".join(str(i) for i in bad[:10])
        if len(bad) > 10:
            shown += ", ..."
        warnings.warn(f"{path.name}: rejected {len(bad)} record(s) at index {shown}; kept inactive")
    return PointSet(x, y, z, np.zeros(len(x)), ok)


def write_points(points: PointSet, path) -> None:
    """Write screen-mode point records (active points keep their values)."""
    path = Path(path)
    with path.open("w") as f:
        f.write("screen\n")
        for i in range(len(points)):
            f.write(f"{float(points.x[i])!r},{float(points.y[i])!r},{float(points.z[i])!r}\n")


# ---------------------------------------------------------------------------
# PFM depth maps


def write_pfm(arr: np.ndarray, path) -> None:
    """Write a 2-D array as grayscale PFM (little-endian float32, bottom-up rows)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise SceneIOError(f"PFM writer expects a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    data = np.flipud(arr.astype("<f4", copy=False))
    with Path(path).open("wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM file into a float32 H x W array."""
    path = Path(path)
    with path.open("rb") as f:
        tag = f.readline().strip()
        if tag != b"Pf":
            raise SceneIOError(f"{path.name}: not a grayscale PFM (tag {tag!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise SceneIOError(f"{path.name}: bad PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        buf = f.read(w * h * 4)
    if len(buf) != w * h * 4:
        raise SceneIOError(f"{path.name}: truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(buf, dtype=dtype).reshape(h, w)
    return np.flipud(img).copy()


def write_depth(depth: np.ndarray, path) -> None:
    """Write a depth map as PFM plus an 8-bit PNG preview normalized to [min, max]."""
    depth = np.asarray(depth, dtype=np.float64)
    bad = int(np.size(depth) - np.isfinite(depth).sum())
    if bad:
        raise SceneIOError(f"depth map has {bad} non-finite pixel{'s' if bad != 1 else ''}")
    path = Path(path)
    write_pfm(depth, path)
    lo, hi = float(depth.min()), float(depth.max())
    span = hi - lo if hi > lo else 1.0
    preview = np.clip((depth - lo) / span * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(preview, mode="L").save(path.with_suffix(".png"))


def write_metrics(metrics: dict, path) -> None:
    """Write metrics as flat ``name=value`` lines (stable order, stable formatting)."""
    with Path(path).open("w") as f:
        for k in metrics:
            v = metrics[k]
            f.write(f"{k}={v:.12g}\n" if isinstance(v, float) else f"{k}={v}\n")


def read_metrics(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        k, v = line.split("=", 1)
        out[k] = float(v)
    return out
