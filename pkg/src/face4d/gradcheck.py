"""Central finite-difference checks of every analytic gradient in the package.

Each seed builds a small synthetic model and a three-camera observation in
memory, then compares analytic gradients to central differences at a random
subset of coordinates of every parameter block.  Rasterization visibility is
frozen across the perturbations, so the checked functions are smooth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import anim, losses
from .fitting import FitConfig, FitProblem, FrameObservation, CameraObservation, from_blocks, to_blocks
from .model import FaceParams, VertexOffsets, edges_from_triangles, face_albedo, shape_vertices, synth_model, \
    umbrella_operator
from .render import rasterize, render_backward
from .scene import render_camera, rig_cameras

H_GEOMETRY = 1e-6
H_APPEARANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float

    def passed(self, tol: float) -> bool:
        return bool(self.max_rel_error <= tol)


@dataclass
class GradcheckReport:
    results: list
    tol: float
    wall_time: float

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tol) for r in self.results)

    def worst(self) -> dict:
        out = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.max_rel_error)
        return out


def relative_error(numeric: np.ndarray, analytic: np.ndarray, scale: float) -> float:
    """Largest ``|numeric - analytic|`` relative to the larger magnitude, floored at 1e-3 of ``scale``."""
    floor = max(1e-3 * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return float(np.max(np.abs(numeric - analytic) / denom))


def check_block(f, x: np.ndarray, grad: np.ndarray, h: float, rng, probes: int = 8) -> float:
    """Compare ``grad`` with central differences of scalar ``f`` at up to ``probes`` coordinates of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    flat_g = np.asarray(grad).reshape(-1)
    size = x.size
    idx = np.arange(size) if size <= probes else rng.choice(size, probes, replace=False)
    num = np.empty(len(idx))
    for k, j in enumerate(idx):
        xp = x.copy().reshape(-1)
        xm = xp.copy()
        xp[j] += h
        xm[j] -= h
        num[k] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return relative_error(num, flat_g[idx], float(np.max(np.abs(flat_g))) if size else 0.0)


# --------------------------------------------------------------------------
# random instances


def random_params(model, camera_ids, rng, scale=0.5) -> FaceParams:
    p = model.zero_params(camera_ids)
    p.alpha = rng.normal(0.0, scale, model.k_id)
    p.beta = rng.normal(0.0, scale, model.k_exp)
    p.delta = rng.normal(0.0, 0.3 * scale, model.k_tex)
    for c in p.gamma:
        p.gamma[c] = p.gamma[c] + rng.normal(0.0, 0.1, 27)
    return p


def synthetic_instance(seed: int, n: int = 200, image_size: int = 64, cameras: int = 3, k: int = 6):
    """Model, camera rig, an observation of a random face and a nearby evaluation point."""
    rng = np.random.default_rng(seed)
    model = synth_model(seed, n, k, k, k)
    rig = rig_cameras(cameras, image_size)
    ids = [c.id for c in rig]
    truth = random_params(model, ids, rng)
    v = shape_vertices(model, truth.alpha, truth.beta)
    albedo = face_albedo(model, truth.delta)
    cams = []
    for cam in rig:
        out = render_camera(model, v, albedo, truth.gamma[cam.id], cam)
        color = np.where(out.coverage[..., None], out.color, 0.0) + rng.normal(0.0, 0.01, out.color.shape)
        depth = np.where(out.coverage, out.depth + rng.normal(0.0, 0.002, out.depth.shape), 0.0)
        lm = cam.intrinsics.project(cam.extrinsics.apply(v[model.landmark_indices]))
        cams.append(CameraObservation(cam, np.clip(color, 0.0, 1.0), depth, lm + rng.normal(0.0, 0.5, lm.shape)))
    lm3d = v[model.landmark_indices] + rng.normal(0.0, 0.002, (len(model.landmark_indices), 3))
    obs = FrameObservation(0, cams, lm3d)
    point = random_params(model, ids, rng, scale=0.5)
    offsets = VertexOffsets(rng.normal(0.0, 0.003, (n, 3)))
    _clear_depth_kinks(model, obs, shape_vertices(model, point.alpha, point.beta, offsets.offsets))
    reference = shape_vertices(model, point.alpha, point.beta) + rng.normal(0.0, 0.002, (n, 3))
    return model, rig, obs, point, offsets, reference, rng


def _clear_depth_kinks(model, obs, verts, margin=1e-5, trunc=0.05):
    # the truncated L1 depth term has kinks at |residual| = 0 and = trunc;
    # nudge observations sitting on one so a finite-difference step cannot straddle it
    for co in obs.cameras:
        x = co.camera.extrinsics.apply(verts)
        out = rasterize(x, model.triangles, co.camera.intrinsics)
        valid = out.coverage & (co.depth > 0)
        err = np.abs(np.where(valid, out.depth - co.depth, 1.0))
        near = valid & ((err < margin) | (np.abs(err - trunc) < margin))
        co.depth[near] += 10.0 * margin


# --------------------------------------------------------------------------
# suites


def _term_checks(seed, model, rig, obs, point, offsets, reference, rng):
    n = model.vertex_count
    res = {}
    verts = shape_vertices(model, point.alpha, point.beta, offsets.offsets)
    lm = model.landmark_indices

    _, g = losses.loss_landmark3d(verts, lm, obs.landmarks3d)
    res["landmark3d"] = check_block(lambda x: losses.loss_landmark3d(x, lm, obs.landmarks3d)[0], verts, g,
                                    H_GEOMETRY, rng)

    co = obs.cameras[0]
    cam = co.camera
    x = cam.extrinsics.apply(verts)
    _, g = losses.loss_landmark2d(x, lm, co.landmarks2d, cam.intrinsics)
    res["landmark2d"] = check_block(lambda y: losses.loss_landmark2d(y, lm, co.landmarks2d, cam.intrinsics)[0],
                                    x, g, H_GEOMETRY, rng)

    colors = rng.uniform(0.1, 0.9, (n, 3))
    base = rasterize(x, model.triangles, cam.intrinsics, colors)
    tri_id = base.tri_id

    def rgb_of(v, c):
        return losses.loss_rgb(rasterize(v, model.triangles, cam.intrinsics, c, tri_id=tri_id), co.color)

    def depth_of(v):
        return losses.loss_depth(rasterize(v, model.triangles, cam.intrinsics, colors, tri_id=tri_id), co.depth)

    _, g_img = rgb_of(x, colors)
    gv, gc = render_backward(base, grad_color=g_img)
    res["rgb"] = max(check_block(lambda v: rgb_of(v, colors)[0], x, gv, H_GEOMETRY, rng),
                     check_block(lambda c: rgb_of(x, c)[0], colors, gc, H_APPEARANCE, rng))
    _, g_dep = depth_of(x)
    gv, _ = render_backward(base, grad_depth=g_dep)
    res["depth"] = check_block(lambda v: depth_of(v)[0], x, gv, H_GEOMETRY, rng)

    _, (ga, gb, gd) = losses.loss_prior(point.alpha, point.beta, point.delta)
    res["prior"] = max(
        check_block(lambda a: losses.loss_prior(a, point.beta, point.delta)[0], point.alpha, ga, H_GEOMETRY, rng),
        check_block(lambda b: losses.loss_prior(point.alpha, b, point.delta)[0], point.beta, gb, H_GEOMETRY, rng),
        check_block(lambda d: losses.loss_prior(point.alpha, point.beta, d)[0], point.delta, gd, H_APPEARANCE, rng),
    )

    edges = edges_from_triangles(model.triangles)
    _, g = losses.loss_edge(verts, reference, edges)
    res["edge"] = check_block(lambda v: losses.loss_edge(v, reference, edges)[0], verts, g, H_GEOMETRY, rng)
    lap = umbrella_operator(model.triangles, n)
    _, g = losses.loss_laplacian(offsets.offsets, lap)
    res["laplacian"] = check_block(lambda r: losses.loss_laplacian(r, lap)[0], offsets.offsets, g, H_GEOMETRY, rng)
    _, g = losses.loss_offset(offsets.offsets)
    res["offset"] = check_block(lambda r: losses.loss_offset(r)[0], offsets.offsets, g, H_GEOMETRY, rng)

    w = rng.normal(size=(8, n))
    _, g = anim.sparsity_reg(w)
    res["sparsity_reg"] = check_block(lambda m: anim.sparsity_reg(m)[0], w, g, 1e-6, rng)
    pred = rng.normal(size=(5, n, 3))
    gt = pred + rng.normal(0.0, 0.1, pred.shape)
    beta = 1e-2   # large enough that the W path is visible above rounding
    _, gp, gw = anim.anim_total_loss_grad(pred, gt, w, beta)
    res["anim_total_loss"] = max(
        check_block(lambda p: anim.anim_total_loss(p, gt, w, beta), pred, gp, 1e-6, rng),
        check_block(lambda m: anim.anim_total_loss(pred, gt, m, beta), w, gw, 1e-6, rng),
    )
    return res


def _stage_checks(model, obs, point, offsets, reference, rng):
    problem = FitProblem(model, FitConfig())
    res = {}
    for stage in ("landmark", "dmm", "vertex"):
        ev = problem.evaluate(stage, point, offsets, obs, reference)
        vis = ev.visibility
        blocks = to_blocks(point, offsets)
        worst = 0.0
        for name, g in sorted(ev.grads.items()):
            def f(xb, name=name):
                b = dict(blocks)
                b[name] = xb
                return problem.evaluate(stage, *from_blocks(b), obs, reference, vis).total
            h = H_APPEARANCE if name == "delta" or name.startswith("gamma/") else H_GEOMETRY
            worst = max(worst, check_block(f, blocks[name], g, h, rng))
        res[f"stage_{stage}"] = worst
    return res


SUITES = ("landmark3d", "landmark2d", "rgb", "depth", "prior", "edge", "laplacian", "offset",
          "sparsity_reg", "anim_total_loss", "stage_landmark", "stage_dmm", "stage_vertex")


def run_gradcheck(seeds=range(20), n: int = 200, image_size: int = 64, tol: float = 1e-4,
                  stages: bool = True) -> GradcheckReport:
    t0 = time.perf_counter()
    results = []
    for seed in seeds:
        model, rig, obs, point, offsets, reference, rng = synthetic_instance(int(seed), n, image_size)
        res = _term_checks(seed, model, rig, obs, point, offsets, reference, rng)
        if stages:
            res.update(_stage_checks(model, obs, point, offsets, reference, rng))
        results.extend(CheckResult(name, int(seed), err) for name, err in res.items())
    return GradcheckReport(results, tol, time.perf_counter() - t0)
