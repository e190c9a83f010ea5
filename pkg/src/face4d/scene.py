"""Scene directories: camera rig description plus per-frame RGB-D images and landmarks.

Layout::

    scene.json                      cameras (id, intrinsics, 4x4 world->camera), frame_count, fps
    cam{ID}/color_{frame:06}.png    8-bit RGB
    cam{ID}/depth_{frame:06}.png    16-bit millimeters, 0 = invalid
    cam{ID}/landmarks_{frame:06}.json   [[u, v], ...] in model landmark order
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .camera import PointCloud, RGBDFrame, RigidTransform, backproject_depth, icp_point_to_plane, \
    landmark_init_extrinsics, landmarks_to_3d, rotation_about
from .model import FaceParams, MorphableModel, face_albedo, shape_vertices
from .render import SH_C0, CameraIntrinsics, rasterize, sh_shade, vertex_normals

SCENE_VERSION = 1


class SceneError(ValueError):
    pass


@dataclass
class CameraSpec:
    id: int
    intrinsics: CameraIntrinsics
    extrinsics: RigidTransform   # world -> camera


@dataclass
class Scene:
    root: str
    cameras: list
    frame_count: int
    fps: float = 30.0

    def camera(self, cam_id: int) -> CameraSpec:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise SceneError(f"scene has no camera {cam_id}")

    @property
    def camera_ids(self) -> list:
        return [c.id for c in self.cameras]

    def frame_path(self, cam_id: int, kind: str, frame: int, ext: str) -> str:
        return os.path.join(self.root, f"cam{cam_id}", f"{kind}_{frame:06d}.{ext}")

    def load_frame(self, cam_id: int, frame: int) -> RGBDFrame:
        paths = {k: self.frame_path(cam_id, k, frame, e)
                 for k, e in (("color", "png"), ("depth", "png"), ("landmarks", "json"))}
        for kind, p in paths.items():
            if not os.path.exists(p):
                raise FileNotFoundError(f"camera {cam_id}, frame {frame}: missing {kind} file {p}")
        color = np.asarray(Image.open(paths["color"]).convert("RGB"), dtype=np.uint8)
        depth = np.asarray(Image.open(paths["depth"]), dtype=np.uint16)
        with open(paths["landmarks"]) as f:
            lm = np.asarray(json.load(f), dtype=np.float64).reshape(-1, 2)
        k = self.camera(cam_id).intrinsics
        if color.shape != (k.height, k.width, 3) or depth.shape != (k.height, k.width):
            raise SceneError(f"camera {cam_id}, frame {frame}: image size does not match intrinsics")
        return RGBDFrame(cam_id, color, depth, lm, frame)

    def with_extrinsics(self, extrinsics: dict) -> "Scene":
        cams = [CameraSpec(c.id, c.intrinsics, extrinsics.get(c.id, c.extrinsics)) for c in self.cameras]
        return Scene(self.root, cams, self.frame_count, self.fps)


def _scene_manifest(cameras, frame_count, fps) -> dict:
    return {
        "format_version": SCENE_VERSION,
        "fps": fps,
        "frame_count": frame_count,
        "cameras": [{"id": c.id, "intrinsics": c.intrinsics.to_dict(),
                     "extrinsics": c.extrinsics.matrix().reshape(-1).tolist()} for c in cameras],
    }


def write_scene_manifest(path, cameras, frame_count, fps=30.0) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "scene.json"), "w") as f:
        json.dump(_scene_manifest(cameras, frame_count, fps), f, indent=1, sort_keys=True)
        f.write("\n")


def load_scene(path) -> Scene:
    mpath = os.path.join(path, "scene.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"missing scene manifest {mpath}")
    with open(mpath) as f:
        d = json.load(f)
    if d.get("format_version") != SCENE_VERSION:
        raise SceneError(f"unknown scene version {d.get('format_version')!r}")
    cams = []
    for c in d["cameras"]:
        ext = RigidTransform.from_matrix(np.asarray(c["extrinsics"], dtype=np.float64), orthonormalize_rotation=False)
        cams.append(CameraSpec(int(c["id"]), CameraIntrinsics.from_dict(c["intrinsics"]), ext))
    if not cams:
        raise SceneError("scene has no cameras")
    if int(d["frame_count"]) < 1:
        raise SceneError("scene has no frames")
    return Scene(str(path), cams, int(d["frame_count"]), float(d.get("fps", 30.0)))


def write_frame(scene_root, frame: RGBDFrame) -> None:
    cam_dir = os.path.join(scene_root, f"cam{frame.camera_id}")
    os.makedirs(cam_dir, exist_ok=True)
    t = frame.timestamp_index
    Image.fromarray(frame.color, mode="RGB").save(os.path.join(cam_dir, f"color_{t:06d}.png"))
    Image.fromarray(frame.depth.astype(np.uint16)).save(os.path.join(cam_dir, f"depth_{t:06d}.png"))
    with open(os.path.join(cam_dir, f"landmarks_{t:06d}.json"), "w") as f:
        json.dump([[float(u), float(v)] for u, v in frame.landmarks2d], f)
        f.write("\n")


# --------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    extrinsics: dict            # camera id -> world->camera RigidTransform
    landmark_init: dict         # camera id -> camera->master transform before ICP
    icp: dict                   # camera id -> IcpResult (master excluded)


def _merge_clouds(clouds) -> PointCloud:
    return PointCloud(np.concatenate([c.points for c in clouds]), np.concatenate([c.normals for c in clouds]))


def calibrate_scene(scene: Scene, frames=(0,), master: int | None = None, stride: int = 1,
                    max_iters: int = 50) -> CalibrationResult:
    """Estimate extrinsics of all cameras relative to the master camera.

    The master keeps its stored world->camera transform, which fixes the
    world frame.  Every other camera is first aligned to the master through
    its back-projected landmarks, then refined by point-to-plane ICP of its
    depth cloud against the master's.  With several ``frames`` the clouds
    and landmarks of all of them are pooled (the rig is static).
    """
    frames = list(frames)
    if not frames:
        raise SceneError("calibration needs at least one frame")
    ids = scene.camera_ids
    master = ids[0] if master is None else master
    if master not in ids:
        raise SceneError(f"scene has no camera {master}")
    order = [master] + [c for c in ids if c != master]
    clouds, lms = {}, {}
    for cid in order:
        k = scene.camera(cid).intrinsics
        per_frame, lm = [], []
        for t in frames:
            fr = scene.load_frame(cid, t)
            per_frame.append(backproject_depth(fr.depth, k, stride))
            lm.append(landmarks_to_3d(fr.landmarks2d, fr.depth, k))
        clouds[cid] = _merge_clouds(per_frame)
        lms[cid] = np.concatenate(lm)
    init = dict(zip(order, landmark_init_extrinsics([lms[c] for c in order], master=0)))
    master_ext = scene.camera(master).extrinsics
    extrinsics = {master: master_ext}
    icp = {}
    for cid in order[1:]:
        res = icp_point_to_plane(clouds[cid], clouds[master], init[cid], max_iters=max_iters)
        icp[cid] = res
        # camera -> master, so world -> camera is inverse(res) after world -> master
        extrinsics[cid] = res.transform.inverse().compose(master_ext)
    return CalibrationResult(extrinsics, init, icp)


# --------------------------------------------------------------------------
# synthetic scenes


def rig_cameras(count: int = 3, image_size: int = 96, distance: float = 2.5, spread_deg: float = 45.0) -> list:
    """Cameras on a horizontal arc around the origin, all looking at it.

    Camera 0 faces the head; the others alternate to the left and right by
    ``spread_deg`` (the usual three-camera capture layout).
    """
    f = 3.0 * image_size
    c = (image_size - 1) / 2.0
    k = CameraIntrinsics(f, f, c, c, image_size, image_size)
    angles = [0.0]
    step = 1
    while len(angles) < count:
        angles.append(-spread_deg * step)
        if len(angles) < count:
            angles.append(spread_deg * step)
        step += 1
    return [CameraSpec(i, k, RigidTransform(rotation_about([0.0, 1.0, 0.0], math.radians(a)), [0.0, 0.0, distance]))
            for i, a in enumerate(angles)]


def render_camera(model: MorphableModel, vertices: np.ndarray, albedo: np.ndarray, gamma: np.ndarray,
                  cam: CameraSpec):
    x = cam.extrinsics.apply(vertices)
    colors = sh_shade(albedo, vertex_normals(x, model.triangles), gamma)
    return rasterize(x, model.triangles, cam.intrinsics, colors)


def observe(model: MorphableModel, vertices, albedo, gamma, cam: CameraSpec, frame: int, depth_noise=None):
    """Quantized RGB-D observation of a mesh, as a camera would record it."""
    out = render_camera(model, vertices, albedo, gamma, cam)
    color = np.round(np.clip(out.color, 0.0, 1.0) * 255.0).astype(np.uint8)
    mm = np.where(out.coverage, out.depth * 1000.0, 0.0)
    if depth_noise is not None:
        mm = np.where(out.coverage, mm + depth_noise, 0.0)
    depth = np.where(out.coverage, np.clip(np.round(mm), 1, 65535), 0).astype(np.uint16)
    lm = cam.intrinsics.project(cam.extrinsics.apply(vertices[model.landmark_indices]))
    return RGBDFrame(cam.id, color, depth, lm, frame)


def synth_trajectory(model: MorphableModel, frames: int, camera_ids, seed: int):
    """Smooth ground-truth parameters: fixed identity/texture/lighting, sinusoidal expressions."""
    rng = np.random.default_rng(seed)
    alpha = rng.normal(0.0, 1.0, model.k_id)
    delta = rng.normal(0.0, 0.5, model.k_tex)
    base = rng.normal(0.0, 0.5, model.k_exp)
    amp = rng.uniform(0.3, 1.0, model.k_exp)
    freq = rng.uniform(0.5, 2.0, model.k_exp)
    phase = rng.uniform(0.0, 2.0 * math.pi, model.k_exp)
    gamma = {}
    for c in camera_ids:
        g = np.zeros(27)
        for ch in range(3):
            g[9 * ch] = rng.uniform(0.8, 1.0) / SH_C0
            g[9 * ch + 1: 9 * ch + 4] = rng.normal(0.0, 0.3, 3)
            g[9 * ch + 4: 9 * ch + 9] = rng.normal(0.0, 0.1, 5)
        gamma[int(c)] = g
    params = []
    for t in range(frames):
        beta = base + amp * np.sin(2.0 * math.pi * freq * t / 30.0 + phase)
        params.append(FaceParams(alpha.copy(), beta, delta.copy(), {c: g.copy() for c, g in gamma.items()}))
    return params


def synth_scene(model: MorphableModel, out_dir, frames: int = 10, cameras: int = 3, seed: int = 0,
                noise_mm: float = 0.0, image_size: int = 96):
    """Render a synthetic multi-camera RGB-D scene; returns (scene, ground-truth params, vertices)."""
    if frames < 1 or cameras < 1:
        raise SceneError("need at least one frame and one camera")
    rig = rig_cameras(cameras, image_size)
    params = synth_trajectory(model, frames, [c.id for c in rig], seed)
    noise_rng = np.random.default_rng([seed, 7919])
    write_scene_manifest(out_dir, rig, frames)
    verts = []
    for t, p in enumerate(params):
        v = shape_vertices(model, p.alpha, p.beta)
        albedo = face_albedo(model, p.delta)
        verts.append(v)
        for cam in rig:
            noise = None
            if noise_mm > 0:
                noise = noise_rng.normal(0.0, noise_mm, (cam.intrinsics.height, cam.intrinsics.width))
            write_frame(out_dir, observe(model, v, albedo, p.gamma[cam.id], cam, t, noise))
    return load_scene(out_dir), params, np.stack(verts)
