"""Alternating Adam optimization of point depths, positions, log-weights, and
the smoothness field through the composed adjoint chain:

    loss -> diffusion solve -> splat render -> per-point parameters

One parameter group is optimized at a time for a fixed number of iterations,
cycling through the groups for several passes. Adam moments are kept per
group and persist across passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import diffusion, loss as loss_mod, splat
from .scene_io import CameraMode, MultiViewSet, PointSet

__all__ = [
    "ParamState", "Schedule", "PipelineConfig", "NumericError", "TraceRow",
    "init_state", "forward", "forward_backward", "adam_step", "run", "augment_points",
]

GROUPS = ("Z", "XY", "R", "Q")


class NumericError(RuntimeError):
    """The optimization produced a non-finite loss or gradient."""


@dataclass
class Schedule:
    """Alternation plan: which groups, how many iterations each, how many passes."""

    groups: tuple[str, ...] = GROUPS
    iters_per_group: int = 13
    passes: int = 5
    lr: dict = field(default_factory=lambda: {"Z": 1e-2, "XY": 1e-2, "R": 1e-2, "Q": 1e-2})
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        bad = set(self.groups) - set(GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}; choose from {GROUPS}")
        if self.iters_per_group < 1:
            raise ValueError("iters_per_group must be >= 1")
        if self.passes < 0:
            raise ValueError("passes must be >= 0")
        for g in self.groups:
            if g not in self.lr:
                raise ValueError(f"no learning rate for group {g}")


@dataclass
class ParamState:
    """Everything the optimizer owns: the point set, the smoothness field Q,
    and per-group Adam moments with their step counts."""

    points: PointSet
    q: np.ndarray
    moments: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def group_param(self, group: str) -> np.ndarray:
        if group == "Z":
            return self.points.z
        if group == "XY":
            return np.stack([self.points.x, self.points.y], axis=1)
        if group == "R":
            return self.points.r
        if group == "Q":
            return self.q
        raise ValueError(f"unknown group {group!r}")

    def set_group_param(self, group: str, value: np.ndarray) -> None:
        if group == "Z":
            self.points.z = value
        elif group == "XY":
            self.points.x = value[:, 0]
            self.points.y = value[:, 1]
        elif group == "R":
            self.points.r = value
        elif group == "Q":
            self.q = value
        else:
            raise ValueError(f"unknown group {group!r}")

    def get_moments(self, group: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if group not in self.moments:
            self.moments[group] = (np.zeros(shape), np.zeros(shape))
            self.steps[group] = 0
        return self.moments[group]


def init_state(points: PointSet, central_image: np.ndarray) -> ParamState:
    """Start from the given points; Q is seeded with the image gradient magnitude."""
    return ParamState(points.copy(), diffusion.smoothness_from_image(central_image))


@dataclass
class PipelineConfig:
    """Knobs for one full forward/backward evaluation."""

    splat: splat.SplatConfig = field(default_factory=splat.SplatConfig)
    loss: loss_mod.LossConfig = field(default_factory=loss_mod.LossConfig)
    tol: float = 1e-8
    max_iter: int = 2000
    preconditioner: str = "hierarchical"
    supervised: bool = False
    depth_gt: np.ndarray | None = None
    threads: int = 1

    def for_views(self, views: MultiViewSet) -> "PipelineConfig":
        """Match the splat depth ordering to the camera model (disparity
        labels put larger values in front)."""
        if views.mode is CameraMode.LIGHTFIELD_SHIFT and self.splat.depth_order != "descending":
            self.splat.depth_order = "descending"
        return self


def forward(state: ParamState, views: MultiViewSet, cfg: PipelineConfig):
    """Render, assemble, and solve; returns (D, splat images, diffusion system)."""
    shape = views.shape
    images = splat.render(state.points, shape, cfg.splat, threads=cfg.threads)
    system = diffusion.assemble(images.labels, images.weights, diffusion.SmoothnessField(state.q))
    d = diffusion.solve(system, tol=cfg.tol, max_iter=cfg.max_iter,
                        preconditioner=cfg.preconditioner)
    return d, images, system


def forward_backward(state: ParamState, views: MultiViewSet, cfg: PipelineConfig):
    """Full pipeline evaluation with gradients for every parameter group.

    Returns (loss breakdown, {"Z","XY","R","Q"} gradients, depth map).
    In supervised mode the objective is the mean squared error to
    ``cfg.depth_gt`` and the breakdown carries it in ``total``.
    """
    d, images, system = forward(state, views, cfg)
    if cfg.supervised:
        if cfg.depth_gt is None:
            raise ValueError("supervised mode needs depth_gt")
        value, dd = loss_mod.supervised_loss(d, cfg.depth_gt)
        breakdown = loss_mod.LossBreakdown(0.0, 0.0, 0.0, 0.0, value)
    else:
        breakdown, dd = loss_mod.total_loss(views, d, cfg.loss)
    if not np.isfinite(breakdown.total):
        raise NumericError("total loss is non-finite")
    adj = diffusion.solve_adjoint(system, dd, tol=cfg.tol, max_iter=cfg.max_iter,
                                  preconditioner=cfg.preconditioner)
    pgrads = splat.render_adjoint(state.points, cfg.splat, adj.labels, adj.weights,
                                  images, threads=cfg.threads)
    grads = {
        "Z": pgrads.z,
        "XY": np.stack([pgrads.x, pgrads.y], axis=1),
        "R": pgrads.r,
        "Q": adj.q,
    }
    return breakdown, grads, d


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update. Moments are updated in place; the step
    count passed in is the new (1-based) step."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class TraceRow(NamedTuple):
    iteration: int
    group: str
    e_theta: float
    e_smooth: float
    e_ssim: float
    reward: float
    total: float


def _apply_group(state: ParamState, group: str, grad: np.ndarray, sched: Schedule) -> None:
    param = state.group_param(group)
    m, v = state.get_moments(group, param.shape)
    state.steps[group] += 1
    new = adam_step(param, grad, m, v, state.steps[group], sched.lr[group],
                    sched.beta1, sched.beta2, sched.eps)
    state.set_group_param(group, new)


def run(state: ParamState, views: MultiViewSet, schedule: Schedule, cfg: PipelineConfig):
    """Alternating optimization loop.

    Iterates passes x groups x iters_per_group, recording the loss breakdown
    of every evaluation, and returns (state, final depth map, trace). A
    non-finite total aborts with :class:`NumericError`. With zero passes the
    initial diffusion is returned unchanged.
    """
    schedule.validate()
    cfg.for_views(views)
    trace: list[TraceRow] = []
    it = 0
    for _ in range(schedule.passes):
        for group in schedule.groups:
            for _ in range(schedule.iters_per_group):
                breakdown, grads, _ = forward_backward(state, views, cfg)
                if not np.isfinite(breakdown.total):
                    raise NumericError(
                        f"total loss became non-finite at iteration {it} (group {group})"
                    )
                _apply_group(state, group, grads[group], schedule)
                trace.append(TraceRow(it, group, breakdown.e_theta, breakdown.e_smooth,
                                      breakdown.e_ssim, breakdown.grad_reward, breakdown.total))
                it += 1
    d, _, _ = forward(state, views, cfg)
    return state, d, trace


def augment_points(state: ParamState, depth: np.ndarray, image: np.ndarray,
                   percentile: float = 90.0) -> ParamState:
    """Densify the point set by sampling a preliminary depth map at image edges.

    Pixels whose gradient magnitude is above the given percentile become new
    points with the preliminary depth as label and zero log-weight. Point
    moments are reset (shapes change); Q and its moments are kept.
    """
    mag = diffusion.smoothness_from_image(image)
    thresh = np.percentile(mag, percentile)
    ys, xs = np.nonzero(mag > thresh)
    pts = state.points
    new = PointSet(
        np.concatenate([pts.x, xs.astype(np.float64)]),
        np.concatenate([pts.y, ys.astype(np.float64)]),
        np.concatenate([pts.z, depth[ys, xs].astype(np.float64)]),
        np.concatenate([pts.r, np.zeros(len(xs))]),
        np.concatenate([pts.active, np.ones(len(xs), dtype=bool)]),
    )
    fresh = ParamState(new, state.q.copy())
    if "Q" in state.moments:
        fresh.moments["Q"] = state.moments["Q"]
        fresh.steps["Q"] = state.steps["Q"]
    return fresh
