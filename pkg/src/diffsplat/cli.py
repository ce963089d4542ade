"""Command-line surface: render, diffuse, optimize, eval, make-synthetic.

Every command validates its configuration before touching the output
directory. Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import diffusion, loss as loss_mod, optim, scene_io, splat
from .diffusion import SolveError
from .optim import NumericError
from .scene_io import SceneIOError
from .splat import SplatError


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass
class RunConfig:
    """Fully serializable description of a run; a dumped config reproduces it."""

    manifest: str | None = None
    points: str | None = None
    gt: str | None = None
    out: str | None = None
    seed: int = 0
    threads: int = 1
    supervised: bool = False
    median_filter: bool = False
    downsample: int = 1
    linearize: bool = False
    # splatting
    sigma_s: float = 1.3
    sigma_lambda: float = 0.71
    p: int = 2
    sigma_z: float = 1.0
    n_samples: int = 8
    kernel: int = 7
    tile: int = 64
    rho: float | None = None
    alpha_target: float = 0.995
    # solver
    tol: float = 1e-8
    max_iter: int = 2000
    preconditioner: str = "hierarchical"
    # schedule
    groups: str = "Z,XY,R,Q"
    iters_per_group: int = 13
    passes: int = 5
    lr_z: float = 1e-2
    lr_xy: float = 1e-2
    lr_r: float = 1e-2
    lr_q: float = 1e-2
    # loss
    w_data: float = 1.0
    w_smooth: float = 0.1
    w_ssim: float = 1.0
    w_reward: float = 1.0
    tau_occ: float = 0.01
    loss_eps: float = 1e-6
    bp_thresholds: tuple = (0.01, 0.03, 0.07, 0.1, 0.3, 0.7)

    def validate(self, need=("manifest", "points", "out")) -> None:
        for name in need:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"missing required option --{name.replace('_', '-')}")
            if name in ("manifest", "points", "gt") and not Path(value).is_file():
                raise ConfigError(f"--{name}: file not found: {value}")
        if self.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if self.downsample < 1:
            raise ConfigError("--downsample must be >= 1")
        if self.tol <= 0 or self.max_iter < 1:
            raise ConfigError("solver tolerance/iterations out of range")
        if self.preconditioner not in ("hierarchical", "jacobi"):
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")
        try:
            self.splat_config().validate()
            self.schedule().validate()
        except (SplatError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def splat_config(self) -> splat.SplatConfig:
        return splat.SplatConfig(
            sigma_s=self.sigma_s, sigma_lambda=self.sigma_lambda, p=self.p,
            sigma_z=self.sigma_z, n_samples=self.n_samples, rho=self.rho,
            kernel=self.kernel, tile=self.tile, alpha_target=self.alpha_target,
        )

    def loss_config(self) -> loss_mod.LossConfig:
        return loss_mod.LossConfig(
            w_data=self.w_data, w_smooth=self.w_smooth, w_ssim=self.w_ssim,
            w_reward=self.w_reward, eps=self.loss_eps, tau_occ=self.tau_occ,
        )

    def schedule(self) -> optim.Schedule:
        groups = tuple(g.strip() for g in self.groups.split(",") if g.strip())
        return optim.Schedule(
            groups=groups, iters_per_group=self.iters_per_group, passes=self.passes,
            lr={"Z": self.lr_z, "XY": self.lr_xy, "R": self.lr_r, "Q": self.lr_q},
        )

    def pipeline_config(self, depth_gt=None) -> optim.PipelineConfig:
        return optim.PipelineConfig(
            splat=self.splat_config(), loss=self.loss_config(), tol=self.tol,
            max_iter=self.max_iter, preconditioner=self.preconditioner,
            supervised=self.supervised, depth_gt=depth_gt, threads=self.threads,
        )

    def dump(self, path: Path) -> None:
        d = asdict(self)
        d["bp_thresholds"] = list(self.bp_thresholds)
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"--config: {e}") from None
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"--config: unknown keys {sorted(unknown)}")
        if "bp_thresholds" in data:
            data["bp_thresholds"] = tuple(data["bp_thresholds"])
        return cls(**data)


def _load_inputs(cfg: RunConfig):
    views = scene_io.load_multiview(cfg.manifest, downsample=cfg.downsample,
                                    linearize=cfg.linearize)
    points = scene_io.load_points(cfg.points, camera=views.central.camera)
    return views, points


def weighted_median_filter(d: np.ndarray) -> np.ndarray:
    """3x3 weighted median with binomial weights (1 2 1 / 2 4 2 / 1 2 1)."""
    weights = np.array([1, 2, 1, 2, 4, 2, 1, 2, 1], dtype=np.float64)
    padded = np.pad(d, 1, mode="edge")
    stack = np.stack(
        [padded[dy:dy + d.shape[0], dx:dx + d.shape[1]]
         for dy in range(3) for dx in range(3)], axis=-1)
    order = np.argsort(stack, axis=-1, kind="stable")
    sorted_vals = np.take_along_axis(stack, order, axis=-1)
    sorted_w = weights[order]
    cum = np.cumsum(sorted_w, axis=-1)
    half = weights.sum() / 2.0
    pick = np.argmax(cum >= half, axis=-1)
    return np.take_along_axis(sorted_vals, pick[..., None], axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# Commands


def cmd_render(cfg: RunConfig) -> int:
    cfg.validate(("manifest", "points", "out"))
    views, points = _load_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.splat_config()
    optim.PipelineConfig(splat=scfg).for_views(views)
    images = splat.render(points, views.shape, scfg, threads=cfg.threads)
    scene_io.write_pfm(images.labels, out / "S.pfm")
    scene_io.write_pfm(images.weights, out / "lambda.pfm")
    return 0


def _diffuse(cfg: RunConfig, views, points):
    scfg = cfg.splat_config()
    state = optim.init_state(points, views.central.image)
    pcfg = cfg.pipeline_config()
    pcfg.splat = scfg
    pcfg.for_views(views)
    d, images, system = optim.forward(state, views, pcfg)
    return d, state, pcfg


def cmd_diffuse(cfg: RunConfig) -> int:
    cfg.validate(("manifest", "points", "out"))
    views, points = _load_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    d, _, _ = _diffuse(cfg, views, points)
    if cfg.median_filter:
        d = weighted_median_filter(d)
    scene_io.write_depth(d, out / "depth.pfm")
    return 0


def cmd_optimize(cfg: RunConfig) -> int:
    need = ["manifest", "points", "out"] + (["gt"] if cfg.supervised else [])
    cfg.validate(tuple(need))
    views, points = _load_inputs(cfg)
    depth_gt = None
    if cfg.supervised:
        depth_gt = scene_io.read_pfm(cfg.gt).astype(np.float64)
        if depth_gt.shape != views.shape:
            raise ConfigError(
                f"--gt: shape {depth_gt.shape} does not match views {views.shape}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    state = optim.init_state(points, views.central.image)
    pcfg = cfg.pipeline_config(depth_gt=depth_gt)
    state, d, trace = optim.run(state, views, cfg.schedule(), pcfg)
    if cfg.median_filter:
        d = weighted_median_filter(d)
    scene_io.write_depth(d, out / "depth.pfm")
    with (out / "trace.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "group", "e_theta", "e_smooth", "e_ssim",
                         "reward", "total"])
        for row in trace:
            writer.writerow([row.iteration, row.group, repr(row.e_theta),
                             repr(row.e_smooth), repr(row.e_ssim), repr(row.reward),
                             repr(row.total)])
    scene_io.write_points(state.points, out / "final_points.csv")
    cfg.dump(out / "config.json")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    cfg.validate(("out", "gt"))
    depth_path = Path(cfg.out) / "depth.pfm"
    if not depth_path.is_file():
        raise ConfigError(f"no depth map at {depth_path}; run diffuse/optimize first")
    d = scene_io.read_pfm(depth_path).astype(np.float64)
    gt = scene_io.read_pfm(cfg.gt).astype(np.float64)
    if d.shape != gt.shape:
        raise ConfigError(f"depth shape {d.shape} does not match gt {gt.shape}")
    m = loss_mod.metrics(d, gt, thresholds=cfg.bp_thresholds)
    scene_io.write_metrics(m, Path(cfg.out) / "metrics.txt")
    err = np.abs(d - gt)
    scene_io.write_depth(err, Path(cfg.out) / "error_map.pfm")
    return 0


# ---------------------------------------------------------------------------
# Synthetic scenes (analytic light fields with exact ground truth)


def _make_texture(rng: np.random.Generator, n_waves: int = 10, contrast: float = 0.8):
    """Band-limited RGB texture as a sum of sinusoids; exact at any sub-pixel
    coordinate, so shifted views stay photometrically consistent."""
    freqs = rng.uniform(1.0 / 24.0, 1.0 / 6.0, size=(n_waves, 2))
    freqs *= rng.choice([-1.0, 1.0], size=(n_waves, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_waves, 3))
    amps = rng.uniform(0.3, 1.0, size=(n_waves, 3))
    amps /= amps.sum(axis=0, keepdims=True)

    def tex(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        arg = 2.0 * np.pi * (freqs[:, 0, None, None] * u[None] + freqs[:, 1, None, None] * v[None])
        out = np.zeros(u.shape + (3,))
        for c in range(3):
            out[..., c] = (amps[:, c, None, None] * np.sin(arg + phases[:, c, None, None])).sum(axis=0)
        return 0.5 + 0.5 * contrast * out

    return tex


@dataclass
class SyntheticScene:
    images: list[np.ndarray]
    grid_uv: list[tuple[float, float]]
    central_index: int
    baseline: float
    gt: np.ndarray
    points: scene_io.PointSet


def make_synthetic_scene(kind: str = "two_plane", size: int = 96, grid: int = 3,
                         baseline: float = 1.0, n_points: int = 1200,
                         noise: float = 0.02, outliers: float = 0.2,
                         seed: int = 0) -> SyntheticScene:
    """Analytic light field with exact ground-truth disparity and corrupted points.

    Kinds: ``fronto`` (constant disparity 1.5), ``plane`` (horizontal ramp
    1..2), ``two_plane`` (background 1.0, foreground box at 2.0). ``noise``
    adds Gaussian jitter (fraction of the disparity span) to inlier labels;
    ``outliers`` replaces that fraction of labels with values off by
    0.25-0.45 of the span.
    """
    if kind not in ("fronto", "plane", "two_plane"):
        raise ConfigError(f"unknown synthetic scene kind {kind!r}")
    rng = np.random.default_rng(seed)
    tex_bg = _make_texture(rng)
    tex_fg = _make_texture(rng)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    d_lo, d_hi = 1.0, 2.0
    box = (size // 3, 2 * size // 3)  # foreground square, central frame

    def view_image(du: float, dv: float) -> np.ndarray:
        if kind == "fronto":
            d0 = 1.5
            return tex_bg(xs - d0 * du * baseline, ys - d0 * dv * baseline)
        if kind == "plane":
            slope = (d_hi - d_lo) / (size - 1)
            xc = (xs - d_lo * du * baseline) / (1.0 + slope * du * baseline)
            d = d_lo + slope * xc
            yc = ys - d * dv * baseline
            return tex_bg(xc, yc)
        xf = xs - d_hi * du * baseline
        yf = ys - d_hi * dv * baseline
        in_fg = (xf >= box[0]) & (xf < box[1]) & (yf >= box[0]) & (yf < box[1])
        img_fg = tex_fg(xf, yf)
        img_bg = tex_bg(xs - d_lo * du * baseline, ys - d_lo * dv * baseline)
        return np.where(in_fg[..., None], img_fg, img_bg)

    if kind == "fronto":
        gt = np.full((size, size), 1.5)
    elif kind == "plane":
        gt = d_lo + (d_hi - d_lo) * xs / (size - 1)
    else:
        in_fg = (xs >= box[0]) & (xs < box[1]) & (ys >= box[0]) & (ys < box[1])
        gt = np.where(in_fg, d_hi, d_lo)

    uc = (grid - 1) / 2.0
    images, grid_uv = [], []
    central_index = None
    for v in range(grid):
        for u in range(grid):
            images.append(view_image(u - uc, v - uc))
            grid_uv.append((float(u), float(v)))
            if u - uc == 0 and v - uc == 0:
                central_index = len(images) - 1
    if central_index is None:  # even grids have no exact center view
        central_index = (grid // 2) * grid + grid // 2

    px = rng.uniform(1.0, size - 2.0, size=n_points)
    py = rng.uniform(1.0, size - 2.0, size=n_points)
    labels = gt[np.floor(py + 0.5).astype(int), np.floor(px + 0.5).astype(int)].copy()
    span = float(gt.max() - gt.min()) or 1.0
    labels += rng.normal(0.0, noise * span, size=n_points)
    n_out = int(round(outliers * n_points))
    if n_out:
        idx = rng.choice(n_points, size=n_out, replace=False)
        signs = rng.choice([-1.0, 1.0], size=n_out)
        labels[idx] += signs * rng.uniform(0.25, 0.45, size=n_out) * span
    points = scene_io.PointSet(px, py, labels, np.zeros(n_points),
                               np.ones(n_points, dtype=bool))
    return SyntheticScene(images, grid_uv, central_index, baseline, gt, points)


def write_synthetic_scene(scene: SyntheticScene, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = [f"central {scene.central_index}"]
    for i, (img, (u, v)) in enumerate(zip(scene.images, scene.grid_uv)):
        name = f"images/v{i:02d}.png"
        arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / name)
        lines.append(f"view {name} lf_grid {u:g} {v:g} {scene.baseline:g}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    scene_io.write_pfm(scene.gt, out / "gt.pfm")
    scene_io.write_points(scene.points, out / "points.csv")


def cmd_make_synthetic(cfg: RunConfig, kind: str, size: int, grid: int,
                       n_points: int, noise: float, outliers: float,
                       baseline: float) -> int:
    if cfg.out is None:
        raise ConfigError("missing required option --out")
    if size < 16 or grid < 1:
        raise ConfigError("--size must be >= 16 and --grid >= 1")
    scene = make_synthetic_scene(kind, size=size, grid=grid, baseline=baseline,
                                 n_points=n_points, noise=noise, outliers=outliers,
                                 seed=cfg.seed)
    write_synthetic_scene(scene, cfg.out)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--manifest", help="multi-view manifest file")
    sub.add_argument("--points", help="sparse point CSV")
    sub.add_argument("--gt", help="ground-truth depth PFM")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--config", help="JSON run config (flags override it)")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--threads", type=int)
    sub.add_argument("--supervised", action="store_true", default=None)
    sub.add_argument("--median-filter", action="store_true", default=None)
    sub.add_argument("--downsample", type=int, metavar="N")
    sub.add_argument("--linearize", action="store_true", default=None)
    sub.add_argument("--passes", type=int)
    sub.add_argument("--iters-per-group", type=int)
    sub.add_argument("--preconditioner", choices=("hierarchical", "jacobi"))
    sub.add_argument("--tol", type=float)


_FLAG_FIELDS = ("manifest", "points", "gt", "out", "seed", "threads", "supervised",
                "median_filter", "downsample", "linearize", "passes",
                "iters_per_group", "preconditioner", "tol")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffsplat",
        description="Dense depth by differentiable point splatting and diffusion.")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("render", "splat the point set into label and weight images"),
        ("diffuse", "render and solve one diffusion, writing depth.pfm"),
        ("optimize", "run the alternating optimization schedule"),
        ("eval", "score depth.pfm in --out against --gt"),
    ):
        _add_common(subs.add_parser(name, help=doc))
    mk = subs.add_parser("make-synthetic", help="generate an analytic test scene")
    _add_common(mk)
    mk.add_argument("--scene", default="two_plane", choices=("fronto", "plane", "two_plane"))
    mk.add_argument("--size", type=int, default=96)
    mk.add_argument("--grid", type=int, default=3)
    mk.add_argument("--n-points", type=int, default=1200)
    mk.add_argument("--noise", type=float, default=0.02)
    mk.add_argument("--outliers", type=float, default=0.2)
    mk.add_argument("--baseline", type=float, default=1.0)
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "render":
            return cmd_render(cfg)
        if args.command == "diffuse":
            return cmd_diffuse(cfg)
        if args.command == "optimize":
            return cmd_optimize(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "make-synthetic":
            return cmd_make_synthetic(cfg, args.scene, args.size, args.grid,
                                      args.n_points, args.noise, args.outliers,
                                      args.baseline)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, SceneIOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (SolveError, NumericError, SplatError, diffusion.SingularSystemError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
