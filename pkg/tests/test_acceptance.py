"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one ``ACCEPTANCE <n> ... PASS`` line (visible with -s);
an assertion failure marks the criterion FAIL with the offending values.
"""

import math
import time

import numpy as np
import pytest

from diffsplat.cli import main, make_synthetic_scene
from diffsplat.diffusion import SmoothnessField, assemble, solve, solve_adjoint
from diffsplat.loss import metrics, scale_fit, supervised_loss
from diffsplat.optim import PipelineConfig, Schedule, forward, init_state, run
from diffsplat.scene_io import Point, PointSet
from diffsplat.splat import SplatConfig, label_single, render, render_adjoint, transmittance_point

from conftest import random_points, scene_to_views

from test_diffusion import dense_matrix, random_system


def _report(n, name):
    print(f"ACCEPTANCE {n} ({name}): PASS")


# ---------------------------------------------------------------------------
# 1. Transmittance closed form vs quadrature


def test_acceptance_01_transmittance_closed_form():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        cfg = SplatConfig(sigma_z=float(rng.uniform(0.25, 2.0)))
        point = Point(float(rng.uniform(2, 14)), float(rng.uniform(2, 14)),
                      float(rng.uniform(0.5, 8.0)))
        pixel = (int(rng.integers(0, 16)), int(rng.integers(0, 16)))
        closed = transmittance_point(point, pixel, cfg)
        # trapezoid quadrature of the single-point attenuation integral
        rho = cfg.resolved_rho()
        gs = label_single(point, pixel, cfg) / point.z
        t = 6.0 * cfg.sigma_z
        z = np.linspace(0.0, t, 10_001)
        integrand = rho * gs * np.exp(-((z - t / 2) ** 2) / (2 * cfg.sigma_z**2))
        oracle = math.exp(-np.trapezoid(integrand, z))
        worst = max(worst, abs(closed - oracle) / abs(oracle))
    elapsed = time.monotonic() - start
    assert worst < 1e-6, f"worst relative error {worst:.3e}"
    assert elapsed < 5.0, f"took {elapsed:.1f}s"
    _report(1, f"transmittance closed form, worst rel {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Splat adjoint vs central finite differences


def test_acceptance_02_splat_adjoint():
    start = time.monotonic()
    rng = np.random.default_rng(202)
    shape = (16, 16)
    cfg = SplatConfig(tile=16)
    h = 1e-4
    worst = 0.0
    for scene_idx in range(50):
        n = int(rng.integers(3, 11))
        pts = random_points(rng, n, shape)
        grad_s = rng.normal(size=shape)
        grad_l = rng.normal(size=shape)

        def value(p):
            img = render(p, shape, cfg)
            return float((img.labels * grad_s).sum() + (img.weights * grad_l).sum())

        img = render(pts, shape, cfg)
        g = render_adjoint(pts, cfg, grad_s, grad_l, img)
        for name, grads in (("x", g.x), ("y", g.y), ("z", g.z), ("r", g.r)):
            for i in range(n):
                plus, minus = pts.copy(), pts.copy()
                getattr(plus, name)[i] += h
                getattr(minus, name)[i] -= h
                fd = (value(plus) - value(minus)) / (2 * h)
                err = abs(grads[i] - fd) / max(abs(fd), 1e-8)
                worst = max(worst, err)
                assert err < 1e-3, f"scene {scene_idx} {name}[{i}]: adj {grads[i]!r} fd {fd!r}"
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    _report(2, f"splat adjoint vs finite differences, worst rel {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Diffusion solve oracle and adjoint


def test_acceptance_03_diffusion_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(303)
    worst_solve = 0.0
    for _ in range(50):
        labels, lam, q = random_system(rng, 16, 16)
        d = solve(assemble(labels, lam, SmoothnessField(q)), tol=1e-12)
        ref = np.linalg.solve(dense_matrix(lam, np.exp(-q)),
                              (lam * labels).ravel()).reshape(16, 16)
        rel = np.abs(d - ref).max() / np.abs(ref).max()
        worst_solve = max(worst_solve, rel)
        assert rel < 1e-6, f"solve vs dense oracle rel {rel:.3e}"
    worst_fd = 0.0
    step = 1e-5
    for _ in range(3):
        labels, lam, q = random_system(rng, 8, 8, sparsity=0.5)
        lam = lam + 0.05
        gd = rng.normal(size=(8, 8))
        system = assemble(labels, lam, SmoothnessField(q))
        solve(system, tol=1e-13)
        adj = solve_adjoint(system, gd, tol=1e-13)
        for name, arr, grad in (("labels", labels, adj.labels),
                                ("weights", lam, adj.weights), ("q", q, adj.q)):
            for _ in range(10):
                i, j = rng.integers(0, 8), rng.integers(0, 8)
                plus, minus = arr.copy(), arr.copy()
                plus[i, j] += step
                minus[i, j] -= step
                kw = {"labels": labels, "weights": lam, "q": q}
                kw[name] = plus
                up = float((solve(assemble(kw["labels"], kw["weights"],
                                           SmoothnessField(kw["q"])), tol=1e-13) * gd).sum())
                kw[name] = minus
                down = float((solve(assemble(kw["labels"], kw["weights"],
                                             SmoothnessField(kw["q"])), tol=1e-13) * gd).sum())
                fd = (up - down) / (2 * step)
                err = abs(grad[i, j] - fd) / max(abs(fd), 1e-9)
                worst_fd = max(worst_fd, err)
                assert err < 1e-3, f"{name}[{i},{j}]: adj {grad[i, j]!r} fd {fd!r}"
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _report(3, f"diffusion oracle rel {worst_solve:.2e}, adjoint fd rel {worst_fd:.2e}, "
               f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. Maximum principle


def test_acceptance_04_maximum_principle():
    rng = np.random.default_rng(404)
    for _ in range(200):
        h = int(rng.integers(6, 17))
        w = int(rng.integers(6, 17))
        labels, lam, q = random_system(rng, h, w, sparsity=float(rng.uniform(0.1, 0.6)))
        d = solve(assemble(labels, lam, SmoothnessField(q)), tol=1e-10)
        constrained = labels[lam > 0]
        assert d.min() >= constrained.min() - 1e-9
        assert d.max() <= constrained.max() + 1e-9
    _report(4, "maximum principle on 200 random systems")


# ---------------------------------------------------------------------------
# 5. Tiling equivalence


def test_acceptance_05_tiling_equivalence():
    rng = np.random.default_rng(505)
    shape = (64, 48)
    pts = random_points(rng, 200, shape, z_range=(0.5, 9.0))
    reference = None
    for tile in (8, 16, 64, shape[0]):
        img = render(pts, shape, SplatConfig(tile=tile), threads=1)
        blob = img.labels.tobytes() + img.weights.tobytes()
        if reference is None:
            reference = blob
        assert blob == reference, f"tile={tile} differs from reference"
    _report(5, "tiling equivalence at 0 ULP for tiles 8/16/64/full")


# ---------------------------------------------------------------------------
# 6. No vanishing points


def test_acceptance_06_no_vanish():
    # 1000 points on an 8-px cell grid (kernel windows never overlap), each at
    # a uniformly random sub-pixel offset: the failure mode being excluded is
    # a point losing all pixel weight from raster misalignment
    rng = np.random.default_rng(606)
    rows, cols, cell = 25, 40, 8
    shape = (rows * cell, cols * cell)
    n = rows * cols
    cy, cx = np.divmod(np.arange(n), cols)
    x = cx * cell + cell / 2 + rng.uniform(-0.5, 0.5, n)
    y = cy * cell + cell / 2 + rng.uniform(-0.5, 0.5, n)
    z = rng.uniform(1.0, 6.0, n)
    r = rng.normal(0.0, 0.5, n)
    pts = PointSet(x, y, z, r, np.ones(n, dtype=bool))
    cfg = SplatConfig()
    img = render(pts, shape, cfg)
    contributions = img.cache.alphas * pts.weights[img.cache.pair_pt] * img.cache.gl
    best = np.zeros(n)
    np.maximum.at(best, img.cache.pair_pt, contributions)
    floor = 1e-4 * pts.weights
    assert (best >= floor).all(), f"{int((best < floor).sum())} vanishing points"
    _report(6, f"no-vanish: min weight ratio {float((best / pts.weights).min()):.3f} >= 1e-4")


# ---------------------------------------------------------------------------
# 7. Occlusion limit


def test_acceptance_07_occlusion_limit():
    errs = {}
    for sz in (1.0, 0.85, 0.7, 0.5, 0.25):
        cfg = SplatConfig(sigma_z=sz)
        pts = PointSet(np.array([8.0, 8.0]), np.array([8.0, 8.0]),
                       np.array([2.0, 6.0]), np.zeros(2), np.ones(2, bool))
        errs[sz] = abs(float(render(pts, (16, 16), cfg).labels[8, 8]) - 2.0)
    assert errs[0.5] < 0.1 * 2.0, f"error at sigma_z=0.5 is {errs[0.5]:.4f}"
    ordered = [errs[s] for s in (1.0, 0.85, 0.7, 0.5, 0.25)]
    assert all(b <= a + 1e-12 for a, b in zip(ordered, ordered[1:])), ordered
    assert ordered[-1] < ordered[0], ordered
    _report(7, "occlusion limit: errors " + ", ".join(f"{e:.4f}" for e in ordered))


# ---------------------------------------------------------------------------
# 8 & 9. End-to-end regressions on the synthetic two-plane light field


def _two_plane_setup(supervised):
    scene = make_synthetic_scene("two_plane", size=96, grid=3, n_points=1200,
                                 noise=0.02, outliers=0.2, seed=11)
    views = scene_to_views(scene, quantize=True)
    state = init_state(scene.points, views.central.image)
    cfg = PipelineConfig(supervised=supervised,
                         depth_gt=scene.gt if supervised else None)
    cfg.for_views(views)
    return scene, views, state, cfg


def test_acceptance_08_supervised_denoising():
    start = time.monotonic()
    scene, views, state, cfg = _two_plane_setup(supervised=True)
    d0, _, _ = forward(state, views, cfg)
    m0 = metrics(d0, scene.gt)
    state, d1, trace = run(state, views, Schedule(), cfg)
    m1 = metrics(d1, scene.gt)
    elapsed = time.monotonic() - start
    assert len(trace) == 13 * 5 * 4
    assert m1["mse"] < 0.5 * m0["mse"], f"mse {m0['mse']:.5f} -> {m1['mse']:.5f}"
    assert m1["bp_0.1"] < m0["bp_0.1"], f"bp {m0['bp_0.1']:.2f} -> {m1['bp_0.1']:.2f}"
    assert elapsed < 600.0, f"took {elapsed:.0f}s"
    _report(8, f"supervised mse {m0['mse']:.4f}->{m1['mse']:.4f} "
               f"(x{m1['mse'] / m0['mse']:.2f}), bp0.1 {m0['bp_0.1']:.1f}->{m1['bp_0.1']:.1f}, "
               f"{elapsed:.0f}s")


def test_acceptance_09_self_supervised_direction():
    start = time.monotonic()
    scene, views, state, cfg = _two_plane_setup(supervised=False)
    d0, _, _ = forward(state, views, cfg)
    mse0 = supervised_loss(d0, scene.gt)[0]
    state, d1, _ = run(state, views, Schedule(), cfg)
    mse1 = supervised_loss(d1, scene.gt)[0]
    elapsed = time.monotonic() - start
    assert mse1 <= 0.8 * mse0, f"gt-measured mse {mse0:.5f} -> {mse1:.5f}"
    assert elapsed < 600.0, f"took {elapsed:.0f}s"
    _report(9, f"self-supervised gt mse {mse0:.4f}->{mse1:.4f} "
               f"(x{mse1 / mse0:.2f}), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. Metric unit oracles


def _oracle_metrics(err_flat, thresholds):
    values = sorted(abs(e) for e in err_flat)
    n = len(values)
    mse = sum(e * e for e in err_flat) / n
    bps = {t: 100.0 * sum(1 for v in values if v > t) / n for t in thresholds}
    pos = 0.25 * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    q25 = values[lo] + (pos - lo) * (values[hi] - values[lo])
    return mse, bps, q25


def _oracle_scale_fit(d, gt, n_samples, n_fits, seed):
    rng = np.random.default_rng(seed)
    valid = np.isfinite(gt) & np.isfinite(d)
    idx = np.flatnonzero(valid.ravel())
    dv, gv = d.ravel(), gt.ravel()
    best_s, best_mse = 1.0, float("inf")
    k = min(n_samples, idx.size)
    for _ in range(n_fits):
        sample = rng.choice(idx, size=k, replace=False)
        num = sum(float(dv[i]) * float(gv[i]) for i in sample)
        den = sum(float(dv[i]) ** 2 for i in sample)
        s = num / den if den > 0 else 1.0
        mse = float(np.mean((s * dv[idx] - gv[idx]) ** 2))
        if mse < best_mse:
            best_s, best_mse = s, mse
    return best_s


def test_acceptance_10_metric_oracles():
    rng = np.random.default_rng(1010)
    thresholds = (0.01, 0.03, 0.07, 0.1, 0.3, 0.7)
    for _ in range(1000):
        n = int(rng.integers(4, 60))
        err = rng.normal(0, rng.uniform(0.05, 1.0), n)
        d = err.reshape(1, n)
        m = metrics(d, np.zeros_like(d), thresholds=thresholds)
        mse, bps, q25 = _oracle_metrics(err.tolist(), thresholds)
        assert abs(m["mse"] - mse) <= 1e-12
        for t in thresholds:
            assert abs(m[f"bp_{t:g}"] - bps[t]) <= 1e-12
        assert abs(m["q25"] - q25) <= 1e-12
    for trial in range(50):
        d = rng.uniform(0.5, 3.0, (12, 12))
        gt = d * rng.uniform(0.5, 4.0) + rng.normal(0, 0.05, d.shape)
        fitted = scale_fit(d, gt, n_samples=30, n_fits=10,
                           rng=np.random.default_rng(trial))
        s_oracle = _oracle_scale_fit(d, gt, 30, 10, trial)
        assert np.abs(fitted - s_oracle * d).max() <= 1e-12
    _report(10, "metrics and scale fit match brute-force oracles to 1e-12")


# ---------------------------------------------------------------------------
# 11. CLI determinism


def test_acceptance_11_cli_determinism(tmp_path):
    scene_dir = tmp_path / "scene"
    assert main(["make-synthetic", "--out", str(scene_dir), "--size", "32",
                 "--n-points", "120", "--seed", "7"]) == 0
    outputs = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        code = main(["optimize", "--manifest", str(scene_dir / "manifest.txt"),
                     "--points", str(scene_dir / "points.csv"), "--out", str(out),
                     "--seed", "7", "--threads", "1",
                     "--passes", "2", "--iters-per-group", "2"])
        assert code == 0
        outputs.append(((out / "depth.pfm").read_bytes(), (out / "trace.csv").read_bytes()))
    assert outputs[0][0] == outputs[1][0], "depth.pfm differs between runs"
    assert outputs[0][1] == outputs[1][1], "trace.csv differs between runs"
    _report(11, "cmd_optimize twice with --threads 1 is byte-identical")
