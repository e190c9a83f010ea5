"""Three-stage multi-camera RGB-D face fitting and sequence reconstruction.

Stages, each warm-started from the previous one:

``landmark``  3D landmark distance + prior, offsets frozen at zero
``dmm``       sum over cameras of color + depth + 2D landmark terms, plus prior
``vertex``    the ``dmm`` objective plus edge, Laplacian and offset regularizers
              with the per-vertex offsets free

Identity, expression, texture and offsets are shared by all cameras; each
camera owns its lighting coefficients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import losses
from .camera import landmarks_to_3d
from .model import FaceParams, MorphableModel, VertexOffsets, edges_from_triangles, face_albedo_unclamped, \
    shape_vertices, umbrella_operator
from .optim import AdamState, adam_step
from .render import rasterize, render_backward, sh_shade, sh_shade_backward, vertex_normals, \
    vertex_normals_backward
from .scene import CameraSpec, Scene

log = logging.getLogger(__name__)

STAGES = ("landmark", "dmm", "vertex")


class FitError(RuntimeError):
    """A loss term failed during optimization; the message carries stage and iteration."""


@dataclass
class FitConfig:
    lambda_d: float = 2.0
    lambda_lm: float = 100.0
    lambda_p: float = 0.001
    lambda_e: float = 20.0
    lambda_lap: float = 20.0
    lambda_op: float = 0.01
    lr_first: float = 0.01
    lr_seq: float = 0.005
    iters_landmark: int = 100
    iters_stage2: int = 500
    iters_stage3: int = 500
    iters_seq: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    depth_trunc_m: float = 0.05
    # Adam sees offsets in units of offset_scale (R = offset_scale * R_opt)
    offset_scale: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.startswith("iters_"):
                if int(value) != value or value < 1:
                    raise ValueError(f"{f.name} must be an integer >= 1, got {value}")
                setattr(self, f.name, int(value))
            elif value < 0:
                raise ValueError(f"{f.name} must be non-negative, got {value}")
        if self.offset_scale <= 0:
            raise ValueError("offset_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CameraObservation:
    camera: CameraSpec
    color: np.ndarray        # (H, W, 3) linear [0, 1]
    depth: np.ndarray        # (H, W) meters, 0 = invalid
    landmarks2d: np.ndarray  # (L, 2)


@dataclass
class FrameObservation:
    index: int
    cameras: list
    landmarks3d: np.ndarray  # (L, 3) world space, NaN where no camera saw valid depth


def frame_observation(scene: Scene, frame: int) -> FrameObservation:
    """Load all cameras of one frame and lift the landmarks to world space.

    A landmark's 3D position is the per-axis median of its back-projections
    over the cameras that have valid depth there, which discards a single
    occluded view in a three-camera rig.
    """
    cams = []
    lifted = []
    for spec in scene.cameras:
        fr = scene.load_frame(spec.id, frame)
        cams.append(CameraObservation(spec, fr.color_linear(), fr.depth_meters(), fr.landmarks2d))
        local = landmarks_to_3d(fr.landmarks2d, fr.depth, spec.intrinsics)
        lifted.append(spec.extrinsics.inverse().apply(local))
    stack = np.stack(lifted)
    with np.errstate(all="ignore"):
        lm3d = np.full(stack.shape[1:], np.nan)
        ok = np.any(np.all(np.isfinite(stack), axis=2), axis=0)
        if ok.any():
            lm3d[ok] = np.nanmedian(stack[:, ok], axis=0)
    return FrameObservation(frame, cams, lm3d)


@dataclass
class FitState:
    params: FaceParams
    offsets: VertexOffsets
    adam: AdamState = field(default_factory=AdamState)
    iteration: int = 0

    def copy(self) -> "FitState":
        return FitState(self.params.copy(), self.offsets.copy(), self.adam.copy(), self.iteration)


@dataclass
class StageReport:
    stage: str
    frame: int
    losses: list
    terms: dict
    wall_time: float
    final_params: FaceParams
    final_offsets: VertexOffsets

    def summary(self) -> dict:
        return {"stage": self.stage, "frame": self.frame, "iterations": max(len(self.losses) - 1, 0),
                "final_loss": self.losses[-1] if self.losses else None}


@dataclass
class Evaluation:
    total: float
    terms: dict
    grads: dict
    visibility: dict


def to_blocks(params: FaceParams, offsets: VertexOffsets) -> dict:
    blocks = {"alpha": params.alpha, "beta": params.beta, "delta": params.delta, "offsets": offsets.offsets}
    for c, g in params.gamma.items():
        blocks[f"gamma/{c}"] = g
    return blocks


def from_blocks(blocks: dict):
    gamma = {int(k.split("/")[1]): v for k, v in blocks.items() if k.startswith("gamma/")}
    params = FaceParams(blocks["alpha"], blocks["beta"], blocks["delta"], dict(sorted(gamma.items())))
    return params, VertexOffsets(blocks["offsets"])


def free_blocks(stage: str, camera_ids) -> list:
    if stage == "landmark":
        return ["alpha", "beta"]
    names = ["alpha", "beta", "delta"] + [f"gamma/{c}" for c in camera_ids]
    if stage == "vertex":
        names.append("offsets")
    elif stage != "dmm":
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return names


class FitProblem:
    """Evaluates stage objectives and their analytic gradients for one model."""

    def __init__(self, model: MorphableModel, config: FitConfig | None = None):
        self.model = model
        self.config = config or FitConfig()
        self.edges = edges_from_triangles(model.triangles)
        self.laplacian = umbrella_operator(model.triangles, model.vertex_count)

    def vertices(self, params: FaceParams, offsets: VertexOffsets | None = None) -> np.ndarray:
        return shape_vertices(self.model, params.alpha, params.beta, None if offsets is None else offsets.offsets)

    def evaluate(self, stage: str, params: FaceParams, offsets: VertexOffsets, obs: FrameObservation,
                 reference: np.ndarray | None = None, visibility: dict | None = None) -> Evaluation:
        """Total loss, per-term values and gradients for the blocks free in ``stage``.

        ``visibility`` (camera id -> triangle-id image) freezes rasterization;
        the visibility actually used is returned for reuse.
        """
        cfg = self.config
        model = self.model
        n = model.vertex_count
        cam_ids = [c.camera.id for c in obs.cameras]
        free = free_blocks(stage, cam_ids)
        if stage == "vertex":
            r = offsets.offsets
        else:
            r = np.zeros((n, 3))
        verts = shape_vertices(model, params.alpha, params.beta, r)

        terms = {}
        grad_v = np.zeros((n, 3))
        grads = {}
        lp, (ga, gb, gd) = losses.loss_prior(params.alpha, params.beta, params.delta)
        terms["prior"] = lp
        total = cfg.lambda_p * lp
        grad_alpha = cfg.lambda_p * ga
        grad_beta = cfg.lambda_p * gb
        grad_delta = cfg.lambda_p * gd
        used_vis = {}

        if stage == "landmark":
            l3, g3 = losses.loss_landmark3d(verts, model.landmark_indices, obs.landmarks3d)
            terms["landmark3d"] = l3
            total += l3
            grad_v += g3
        else:
            albedo_raw = face_albedo_unclamped(model, params.delta)
            inside = (albedo_raw > 0.0) & (albedo_raw < 1.0)
            albedo = np.clip(albedo_raw, 0.0, 1.0)
            grad_albedo = np.zeros((n, 3))
            for name in ("rgb", "depth", "landmark2d"):
                terms[name] = 0.0
            for co in obs.cameras:
                cid = co.camera.id
                ext = co.camera.extrinsics
                x = ext.apply(verts)
                normals = vertex_normals(x, model.triangles)
                gamma = params.gamma[cid]
                colors = sh_shade(albedo, normals, gamma)
                tri_id = None if visibility is None else visibility.get(cid)
                out = rasterize(x, model.triangles, co.camera.intrinsics, colors, tri_id=tri_id)
                used_vis[cid] = out.tri_id

                l_rgb, g_img = losses.loss_rgb(out, co.color)
                l_d, g_dep = losses.loss_depth(out, co.depth, cfg.depth_trunc_m)
                l_lm, g_lm = losses.loss_landmark2d(x, model.landmark_indices, co.landmarks2d, co.camera.intrinsics)
                terms["rgb"] += l_rgb
                terms["depth"] += l_d
                terms["landmark2d"] += l_lm
                total += l_rgb + cfg.lambda_d * l_d + cfg.lambda_lm * l_lm

                gx, g_col = render_backward(out, g_img, cfg.lambda_d * g_dep)
                gx += cfg.lambda_lm * g_lm
                g_alb, g_nrm, g_gam = sh_shade_backward(g_col, albedo, normals, gamma)
                gx += vertex_normals_backward(g_nrm, x, model.triangles)
                grad_v += gx @ ext.rotation
                grad_albedo += g_alb
                grads[f"gamma/{cid}"] = g_gam
            grad_delta = grad_delta + model.texture_basis.T @ (grad_albedo * inside).reshape(-1)

        if stage == "vertex":
            ref = verts if reference is None else reference
            le, ge = losses.loss_edge(verts, ref, self.edges)
            llap, glap = losses.loss_laplacian(r, self.laplacian)
            lop, gop = losses.loss_offset(r)
            terms.update(edge=le, laplacian=llap, offset=lop)
            total += cfg.lambda_e * le + cfg.lambda_lap * llap + cfg.lambda_op * lop
            grad_v += cfg.lambda_e * ge
            grads["offsets"] = grad_v + cfg.lambda_lap * glap + cfg.lambda_op * gop

        flat = grad_v.reshape(-1)
        grads["alpha"] = grad_alpha + model.identity_basis.T @ flat
        grads["beta"] = grad_beta + model.expression_basis.T @ flat
        grads["delta"] = grad_delta
        grads = {k: grads[k] for k in free}
        return Evaluation(float(total), terms, grads, used_vis)


def run_stage(problem: FitProblem, stage: str, state: FitState, obs: FrameObservation, iters: int,
              lr: float, reference: np.ndarray | None = None):
    """Optimize one stage with a fresh Adam state; returns ``(state, report)``.

    The returned state is the lowest-loss iterate seen, including the start
    and the state after the last step, so a stage never ends worse than it began.
    ``report.losses`` holds ``iters + 1`` values: one per evaluated iterate.
    """
    cfg = problem.config
    t0 = time.perf_counter()
    scale = cfg.offset_scale
    blocks = to_blocks(state.params.copy(), VertexOffsets(state.offsets.offsets / scale))
    adam = AdamState()
    history = []
    term_history = {}
    best_total, best_blocks = np.inf, blocks
    for it in range(iters + 1):
        params, offsets = from_blocks(blocks)
        offsets = VertexOffsets(offsets.offsets * scale)
        try:
            ev = problem.evaluate(stage, params, offsets, obs, reference)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise FitError(f"frame {obs.index}, stage {stage}, iteration {it}: {exc}") from exc
        if not np.isfinite(ev.total):
            raise FitError(f"frame {obs.index}, stage {stage}, iteration {it}: non-finite loss")
        history.append(ev.total)
        for k, v in ev.terms.items():
            term_history.setdefault(k, []).append(v)
        if ev.total < best_total:
            best_total, best_blocks = ev.total, blocks
        if it == iters:
            break
        grads = dict(ev.grads)
        if "offsets" in grads:
            grads["offsets"] = grads["offsets"] * scale
        blocks, adam = adam_step(blocks, grads, adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    params, offsets = from_blocks(best_blocks)
    offsets = VertexOffsets(offsets.offsets * scale)
    new_state = FitState(params, offsets, adam, state.iteration + iters)
    report = StageReport(stage, obs.index, history, term_history, time.perf_counter() - t0,
                         params.copy(), offsets.copy())
    log.info("frame %d stage %s: loss %.6g -> %.6g (%d iters, %.1fs)", obs.index, stage,
             history[0], history[-1], iters, report.wall_time)
    return new_state, report


def initial_state(model: MorphableModel, camera_ids) -> FitState:
    return FitState(model.zero_params(camera_ids), VertexOffsets.zeros(model.vertex_count))


def fit_first_frame(obs: FrameObservation, model: MorphableModel, config: FitConfig | None = None,
                    problem: FitProblem | None = None):
    """Landmark, 3DMM and vertex-level stages on one frame; returns ``(state, [reports])``."""
    problem = problem or FitProblem(model, config)
    cfg = problem.config
    state = initial_state(model, [c.camera.id for c in obs.cameras])
    state, r1 = run_stage(problem, "landmark", state, obs, cfg.iters_landmark, cfg.lr_first)
    state, r2 = run_stage(problem, "dmm", state, obs, cfg.iters_stage2, cfg.lr_first)
    reference = problem.vertices(state.params)
    state, r3 = run_stage(problem, "vertex", state, obs, cfg.iters_stage3, cfg.lr_first, reference)
    return state, [r1, r2, r3]


def fit_next_frame(prev: FitState, obs: FrameObservation, model: MorphableModel, config: FitConfig | None = None,
                   problem: FitProblem | None = None):
    """Vertex-level stage only, warm-started from the previous frame's solution."""
    problem = problem or FitProblem(model, config)
    cfg = problem.config
    reference = problem.vertices(prev.params, prev.offsets)
    return run_stage(problem, "vertex", prev.copy(), obs, cfg.iters_seq, cfg.lr_seq, reference)


@dataclass
class SequenceResult:
    vertices: np.ndarray          # (T, n, 3)
    params: list
    offsets: list
    reports: list                 # per frame: list of StageReport

    @property
    def frame_count(self) -> int:
        return self.vertices.shape[0]


def reconstruct_sequence(scene: Scene, model: MorphableModel, config: FitConfig | None = None,
                         frames: int | None = None) -> SequenceResult:
    problem = FitProblem(model, config)
    count = scene.frame_count if frames is None else min(frames, scene.frame_count)
    verts, params, offsets, reports = [], [], [], []
    state = None
    for t in range(count):
        obs = frame_observation(scene, t)
        if state is None:
            state, reps = fit_first_frame(obs, model, problem=problem)
        else:
            state, rep = fit_next_frame(state, obs, model, problem=problem)
            reps = [rep]
        verts.append(problem.vertices(state.params, state.offsets))
        params.append(state.params.copy())
        offsets.append(state.offsets.copy())
        reports.append(reps)
    return SequenceResult(np.stack(verts), params, offsets, reports)


def reports_to_json(result: SequenceResult) -> dict:
    return {
        "frames": [
            {"frame": reps[0].frame,
             "stages": [{"stage": r.stage, "loss": r.losses, "terms": r.terms} for r in reps]}
            for reps in result.reports
        ]
    }
