"""``face4d`` command line.

Exit codes: 0 success, 2 usage error, 3 invalid input, 4 numerical failure.
Every command that writes an output directory also writes
``run_manifest.json`` there (command, resolved configuration, input
digests, version, wall time).  Option values resolve as
flags > ``--config`` file > built-in defaults.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .camera import DegenerateConfigurationError, NoCorrespondencesError
from .fitting import FitConfig, FitError, reconstruct_sequence, reports_to_json
from .metrics import VertexSequence, lip_metrics, region_correlation, vertex_velocity, write_json
from .model import load_model, save_model, synth_model
from .scene import CameraSpec, calibrate_scene, load_scene, synth_scene, write_scene_manifest
from .sequence import SequenceData, load_sequence, save_sequence

log = logging.getLogger("face4d")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# option tables


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _iters(text: str) -> list:
    vals = _int_list(text)
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("--iters takes four counts: landmark,dmm,vertex,sequence")
    return vals


def _str_list(text: str) -> list:
    return [x.strip() for x in str(text).split(",") if x.strip()]


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object = None
    help: str = ""
    required: bool = False
    many: bool = False           # flag takes one or more values

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


OUT = Opt("out", str, help="output directory", required=True)
MODEL = Opt("model", str, help="model container directory", required=True)
REGIONS = Opt("regions", str, help="JSON file mapping region names to vertex indices (default: model regions)")

_fit_defaults = FitConfig()
FIT_OPTS = [Opt(name, float, getattr(_fit_defaults, name.replace("-", "_")))
            for name in ("lambda-d", "lambda-lm", "lambda-p", "lambda-e", "lambda-lap", "lambda-op",
                         "lr-first", "lr-seq", "depth-trunc-m", "offset-scale")]

COMMANDS = {
    "synth-model": [
        Opt("seed", int, 0), Opt("vertices", int, 642), Opt("k-id", int, 80), Opt("k-exp", int, 64),
        Opt("k-tex", int, 80), OUT,
    ],
    "synth-scene": [
        MODEL, Opt("frames", int, 10), Opt("cameras", int, 3), Opt("seed", int, 0),
        Opt("noise-mm", float, 0.0), Opt("image-size", int, 96), OUT,
    ],
    "calibrate": [
        Opt("scene", str, required=True, help="input scene directory (left untouched)"),
        Opt("frames", _int_list, [0], help="comma-separated frames whose clouds are pooled"),
        Opt("stride", int, 1), Opt("max-iters", int, 50), OUT,
    ],
    "reconstruct": [
        Opt("scene", str, required=True, many=True, help="one or more scene directories"),
        MODEL, *FIT_OPTS,
        Opt("iters", _iters, [_fit_defaults.iters_landmark, _fit_defaults.iters_stage2,
                              _fit_defaults.iters_stage3, _fit_defaults.iters_seq],
            help="landmark,dmm,vertex,sequence iteration counts"),
        Opt("frames", int, 0, help="reconstruct only the first N frames (0 = all)"),
        Opt("jobs", int, 1, help="scenes reconstructed in parallel"),
        OUT,
    ],
    "metrics": [
        Opt("pred", str, required=True), Opt("gt", str, required=True),
        Opt("model", str, help="model container providing the regions"), REGIONS, OUT,
    ],
    "stats": [
        Opt("seq", str, required=True, many=True, help="one or more sequence containers"),
        Opt("model", str, help="model container providing the regions"), REGIONS,
        Opt("region-list", _str_list, None, help="regions in the correlation graph (default: all)"),
        Opt("velocity-region", str, "lip"), Opt("threshold", float, 0.5),
        Opt("plot", str, None, help="write an SVG figure to this path"), OUT,
    ],
    "gradcheck": [
        Opt("seeds", int, 20), Opt("vertices", int, 200), Opt("image-size", int, 64), Opt("tol", float, 1e-4),
        Opt("out", str, help="directory for gradcheck.json", required=True),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="face4d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"face4d {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file; keys mirror flag names")
        for o in opts:
            kw = {"type": o.type, "default": None, "dest": o.dest}
            if o.many:
                kw["nargs"] = "+"
            default = "" if o.default is None else f" (default: {o.default})"
            p.add_argument(f"--{o.name}", help=o.help + default, **kw)
    return parser


def read_config(path) -> dict:
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("_", "-")] = value
    return out


def resolve(opts, args, config: dict) -> dict:
    config = dict(config)
    resolved = {}
    for o in opts:
        value = o.default
        if o.name in config:
            text = config.pop(o.name)
            try:
                value = [o.type(t) for t in text.split()] if o.many else o.type(text)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {o.name}: {exc}") from None
        flag = getattr(args, o.dest)
        if flag is not None:
            value = flag
        if value is None and o.required:
            raise UsageError(f"missing required option --{o.name}")
        resolved[o.dest] = value
    if config:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(config))}")
    return resolved


# --------------------------------------------------------------------------
# run manifest


def digest_path(path) -> str:
    """SHA-256 of a file, or of a directory tree (sorted relative paths and file digests)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest()
    if not path.is_dir():
        raise FileNotFoundError(f"no such file or directory: {path}")
    for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name != MANIFEST):
        h.update(p.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(bytes.fromhex(digest_path(p)))
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs: dict, wall_time: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": digest_path(v)} for k, v in sorted(inputs.items())},
        "version": __version__,
        "wall_time_s": wall_time,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


# --------------------------------------------------------------------------
# commands; each returns (inputs, exit code)


def _require_positive(cfg, *names):
    for n in names:
        if cfg[n] < 1:
            raise UsageError(f"--{n.replace('_', '-')} must be >= 1")


def cmd_synth_model(cfg):
    if cfg["vertices"] < 12:
        raise UsageError(f"vertex count too small: need --vertices >= 12, got {cfg['vertices']}")
    try:
        model = synth_model(cfg["seed"], cfg["vertices"], cfg["k_id"], cfg["k_exp"], cfg["k_tex"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_model(model, cfg["out"])
    print(f"model: {model.vertex_count} vertices, {len(model.triangles)} triangles -> {cfg['out']}")
    return {}, 0


def cmd_synth_scene(cfg):
    _require_positive(cfg, "frames", "cameras", "image_size")
    if cfg["noise_mm"] < 0:
        raise UsageError("--noise-mm must be >= 0")
    model = load_model(cfg["model"])
    scene, params, verts = synth_scene(model, cfg["out"], cfg["frames"], cfg["cameras"], cfg["seed"],
                                       cfg["noise_mm"], cfg["image_size"])
    save_sequence(SequenceData(verts, scene.fps, params, model.triangles), os.path.join(cfg["out"], "ground_truth"))
    print(f"scene: {len(scene.cameras)} cameras x {scene.frame_count} frames -> {cfg['out']}")
    return {"model": cfg["model"]}, 0


def _same_dir(a, b) -> bool:
    return os.path.realpath(a) == os.path.realpath(b)


def cmd_calibrate(cfg):
    _require_positive(cfg, "stride", "max_iters")
    if _same_dir(cfg["scene"], cfg["out"]):
        raise UsageError("--out must differ from --scene; calibration never modifies its input")
    scene = load_scene(cfg["scene"])
    bad = [t for t in cfg["frames"] if not 0 <= t < scene.frame_count]
    if bad:
        raise UsageError(f"frames {bad} outside 0..{scene.frame_count - 1}")
    result = calibrate_scene(scene, cfg["frames"], stride=cfg["stride"], max_iters=cfg["max_iters"])
    os.makedirs(cfg["out"], exist_ok=True)
    for cam in scene.cameras:
        shutil.copytree(os.path.join(scene.root, f"cam{cam.id}"), os.path.join(cfg["out"], f"cam{cam.id}"),
                        dirs_exist_ok=True)
    cams = [CameraSpec(c.id, c.intrinsics, result.extrinsics[c.id]) for c in scene.cameras]
    write_scene_manifest(cfg["out"], cams, scene.frame_count, scene.fps)
    report = {"master": scene.cameras[0].id, "frames": cfg["frames"], "cameras": []}
    for c in scene.cameras:
        entry = {"id": c.id, "extrinsics": result.extrinsics[c.id].matrix().reshape(-1).tolist(),
                 "landmark_init": result.landmark_init[c.id].matrix().reshape(-1).tolist()}
        if c.id in result.icp:
            icp = result.icp[c.id]
            entry.update(icp_iterations=icp.iterations, icp_residual=icp.residual, icp_history=icp.history)
            print(f"camera {c.id}: icp residual {icp.residual:.3e} m after {icp.iterations} iterations")
        report["cameras"].append(entry)
    write_json(report, os.path.join(cfg["out"], "calibration.json"))
    return {"scene": cfg["scene"]}, 0


def _fit_config(cfg) -> FitConfig:
    it = cfg["iters"]
    kw = {o.dest: cfg[o.dest] for o in FIT_OPTS}
    try:
        return FitConfig(iters_landmark=it[0], iters_stage2=it[1], iters_stage3=it[2], iters_seq=it[3], **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _reconstruct_one(scene_path, model_path, config: FitConfig, frames: int, out):
    scene = load_scene(scene_path)
    model = load_model(model_path)
    result = reconstruct_sequence(scene, model, config, frames or None)
    save_sequence(SequenceData(result.vertices, scene.fps, result.params, model.triangles), out)
    report = reports_to_json(result)
    report["config"] = config.to_dict()
    write_json(report, os.path.join(out, "report.json"))
    return out, result.frame_count


def cmd_reconstruct(cfg):
    _require_positive(cfg, "jobs")
    if cfg["frames"] < 0:
        raise UsageError("--frames must be >= 0")
    config = _fit_config(cfg)
    scenes = cfg["scene"]
    if len(scenes) == 1:
        outs = [cfg["out"]]
    else:
        names = [Path(s).resolve().name for s in scenes]
        if len(set(names)) != len(names):
            raise UsageError("scene directories must have distinct names when reconstructing several")
        outs = [os.path.join(cfg["out"], n) for n in names]
    for s, o in zip(scenes, outs):
        if _same_dir(s, o):
            raise UsageError("--out must not be a scene directory")
    load_model(cfg["model"])           # fail fast on a bad model
    for s in scenes:
        load_scene(s)
    jobs = [(s, cfg["model"], config, cfg["frames"], o) for s, o in zip(scenes, outs)]
    if cfg["jobs"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            done = list(pool.map(_reconstruct_one, *zip(*jobs)))
    else:
        done = [_reconstruct_one(*j) for j in jobs]
    for out, count in done:
        print(f"sequence: {count} frames -> {out}")
    inputs = {"model": cfg["model"]}
    inputs.update({f"scene{i}": s for i, s in enumerate(scenes)})
    return inputs, 0


def _regions(cfg) -> dict:
    if cfg.get("regions"):
        with open(cfg["regions"]) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError("regions file must hold an object of name -> index list")
        return {k: np.asarray(v, dtype=np.int64) for k, v in data.items()}
    if cfg.get("model"):
        return dict(load_model(cfg["model"]).regions)
    raise UsageError("need --model or --regions to know the facial regions")


def _vertex_sequence(path, regions) -> VertexSequence:
    seq = load_sequence(path)
    n = seq.vertices.shape[1]
    for name, idx in regions.items():
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError(f"region {name!r} indexes beyond the {n} vertices of {path}")
    return VertexSequence(seq.vertices, seq.fps, regions)


def _region_inputs(cfg) -> dict:
    return {k: cfg[k] for k in ("model", "regions") if cfg.get(k)}


def cmd_metrics(cfg):
    regions = _regions(cfg)
    pred = _vertex_sequence(cfg["pred"], regions)
    gt = _vertex_sequence(cfg["gt"], regions)
    result = lip_metrics(pred, gt, regions)
    os.makedirs(cfg["out"], exist_ok=True)
    write_json(result, os.path.join(cfg["out"], "metrics.json"))
    for k, v in result.items():
        print(f"{k:12s} {v:.6g}")
    return {"pred": cfg["pred"], "gt": cfg["gt"], **_region_inputs(cfg)}, 0


def cmd_stats(cfg):
    regions = _regions(cfg)
    names = cfg["region_list"] or sorted(regions)
    unknown = [r for r in names + [cfg["velocity_region"]] if r not in regions]
    if unknown:
        raise UsageError(f"unknown region(s): {', '.join(sorted(set(unknown)))}")
    velocities, graphs = [], []
    for path in cfg["seq"]:
        seq = _vertex_sequence(path, regions)
        name = Path(path).resolve().name
        v = {"name": name, "frames": seq.frame_count, "fps": seq.fps}
        if seq.frame_count >= 2:
            v.update({a: vertex_velocity(seq, cfg["velocity_region"], a) for a in ("x", "y", "z", "all")})
            velocities.append(v)
        else:
            log.warning("%s: fewer than 2 frames, no velocity", path)
        if seq.frame_count >= 3:
            graphs.append((name, region_correlation(seq, names, cfg["threshold"])))
    os.makedirs(cfg["out"], exist_ok=True)
    stats = {"region": cfg["velocity_region"], "sequences": velocities,
             "mean_velocity": float(np.mean([v["all"] for v in velocities])) if velocities else None}
    write_json(stats, os.path.join(cfg["out"], "stats.json"))
    write_json({"sequences": [{"name": n, **g.to_dict()} for n, g in graphs]},
               os.path.join(cfg["out"], "corr_graph.json"))
    if cfg["plot"]:
        from .plots import stats_figure
        stats_figure(velocities, graphs[0][1] if graphs else None, cfg["plot"])
    if stats["mean_velocity"] is not None:
        print(f"mean {cfg['velocity_region']} velocity: {stats['mean_velocity']:.6g} units/frame "
              f"over {len(velocities)} sequences")
    inputs = _region_inputs(cfg)
    inputs.update({f"seq{i}": s for i, s in enumerate(cfg["seq"])})
    return inputs, 0


def cmd_gradcheck(cfg):
    from .gradcheck import SUITES, run_gradcheck
    _require_positive(cfg, "seeds", "image_size")
    if cfg["vertices"] < 12:
        raise UsageError(f"vertex count too small: need --vertices >= 12, got {cfg['vertices']}")
    report = run_gradcheck(range(cfg["seeds"]), cfg["vertices"], cfg["image_size"], cfg["tol"])
    worst = report.worst()
    for name in SUITES:
        ok = worst[name] <= cfg["tol"]
        print(f"{'PASS' if ok else 'FAIL'}  {name:16s} max rel err {worst[name]:.2e}")
    print(f"{len(report.results)} checks over {cfg['seeds']} seeds in {report.wall_time:.1f}s")
    os.makedirs(cfg["out"], exist_ok=True)
    write_json({"tol": cfg["tol"], "passed": report.passed, "worst": worst,
                "results": [r.__dict__ for r in report.results]}, os.path.join(cfg["out"], "gradcheck.json"))
    return {}, 0 if report.passed else EXIT_NUMERIC


HANDLERS = {
    "synth-model": cmd_synth_model,
    "synth-scene": cmd_synth_scene,
    "calibrate": cmd_calibrate,
    "reconstruct": cmd_reconstruct,
    "metrics": cmd_metrics,
    "stats": cmd_stats,
    "gradcheck": cmd_gradcheck,
}


def _run(args) -> int:
    config = read_config(args.config) if args.config else {}
    cfg = resolve(COMMANDS[args.command], args, config)
    t0 = time.perf_counter()
    inputs, code = HANDLERS[args.command](cfg)
    if cfg.get("out"):
        write_manifest(cfg["out"], args.command, cfg, inputs, time.perf_counter() - t0)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except UsageError as exc:
        print(f"face4d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, NoCorrespondencesError, DegenerateConfigurationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"face4d {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"face4d {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
