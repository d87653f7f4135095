"""Command-line entry point: ``anchorsfm <command> ...``.

Exit status: 0 success, 2 usage or input error, 3 an image needs a manual
annotation (provider declined), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bundle import BAMode, BundleProblem, bundle_adjust
from .camera import Camera
from .errors import NumericalError, ProviderDeclined, SfMError
from .evaluate import compare_cameras
from .io import (
    cameras_to_json,
    fmt,
    read_anchor_dir,
    read_cameras,
    read_cloud,
    read_images,
    read_matches,
    read_points,
    write_cameras,
    write_event_log,
    write_tracks,
)
from .lm import LMOptions
from .mesh import read_obj
from .occlusion import classify_static_occlusions, compute_background_and_dynamic_mask, read_ppm, write_ppm
from .pipeline import FileProvider, PipelineOptions, Registrar
from .synth import Rig, SceneSpec, generate_scene
from .tracks import Track

log = logging.getLogger("anchorsfm")

EXIT_OK, EXIT_USAGE, EXIT_DECLINED, EXIT_NUMERICAL = 0, 2, 3, 4


def cmd_synth(args) -> int:
    spec = SceneSpec(args.cameras, args.points, Rig(args.rig), args.noise, args.outliers, args.seed)
    scene = generate_scene(spec)
    out = scene.write(args.out)
    print(f"wrote {len(scene.cameras)} cameras, {len(scene.points)} points, {len(scene.matches)} matches to {out}")
    return EXIT_OK


def _scene_path(args, value, default_name):
    if value is not None:
        return Path(value)
    if args.scene is None:
        raise SfMError(f"--{default_name.split('.')[0]} or --scene is required")
    return Path(args.scene) / default_name


def cmd_register(args) -> int:
    images = read_images(_scene_path(args, args.images, "images.txt"))
    matches_path = _scene_path(args, args.matches, "matches.txt")
    matches = read_matches(matches_path) if matches_path.exists() else []
    annotations = read_anchor_dir(_scene_path(args, args.anchors, "anchors"))
    mesh_path = _scene_path(args, args.mesh, "mesh.obj")
    mesh = read_obj(mesh_path) if mesh_path.exists() else None
    provider = FileProvider(args.provider)
    options = PipelineOptions(
        mode=BAMode(args.mode), seed=args.seed, fov_deg=args.fov_deg, ransac_iterations=args.ransac_iterations,
        fundamental_threshold=args.fundamental_threshold, homography_threshold=args.homography_threshold,
        pnp_threshold=args.pnp_threshold, anchor_weight=args.anchor_weight, track_threshold=args.track_threshold,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reg = Registrar(images, matches, mesh, provider, options)
    status = EXIT_OK
    try:
        reg.run(annotations)
    except ProviderDeclined as exc:
        print(f"needs-annotation: {exc.image_id}", file=sys.stderr)
        print(f"image {exc.image_id} needs 2D-3D annotations; add {exc.image_id}.txt to the provider directory",
              file=sys.stderr)
        status = EXIT_DECLINED
    st = reg.state
    write_cameras(out / "cameras.json", st.registered)
    write_tracks(out / "tracks.txt", st.track_graph.tracks)
    write_event_log(Path(args.event_log) if args.event_log else out / "events.txt", st.event_log)
    print(f"registered {len(st.registered)}/{len(images)} images ({len(st.anchors)} anchors); results in {out}")
    return status


def _problem_from_json(data) -> BundleProblem:
    cameras = {cid: Camera.from_dict(d) for cid, d in data["cameras"].items()}
    tracks = [Track({k: tuple(v) for k, v in t["observations"].items()}, np.array(t["point"], dtype=float),
                    "triangulated") for t in data["tracks"]]
    return BundleProblem(cameras, tracks, data.get("anchor_ids", []), data.get("mode", "hard"),
                         data.get("weights"), data.get("anchor_weight", 100.0), data.get("fixed_ids", []))


def cmd_ba(args) -> int:
    problem = _problem_from_json(json.loads(Path(args.problem).read_text()))
    res = bundle_adjust(problem, LMOptions(max_iterations=args.max_iterations))
    rep = res.report
    body = {
        "cameras": json.loads(cameras_to_json(res.cameras))["cameras"],
        "points": [None if p is None else [float(v) for v in p] for p in res.points],
        "report": {"initial_cost": rep.initial_cost, "final_cost": rep.final_cost, "iterations": rep.iterations,
                   "termination": rep.termination.value, "accepted_steps": len(rep.step_costs)},
        "dropped_ray_constraints": [[int(t), a] for t, a in res.dropped_ray_constraints],
    }
    text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"cost {rep.initial_cost:.6e} -> {rep.final_cost:.6e} in {rep.iterations} iterations", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_cameras(args.estimated)
    truth = read_cameras(args.truth)
    pts = read_points(args.eval_points) if args.eval_points else None
    report = compare_cameras(est, truth, pts, align=args.align)
    table = report.to_table()
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.write_text(report.to_json())
        out.with_suffix(".txt").write_text(table)
    return EXIT_OK


def cmd_occlude_static(args) -> int:
    points, normals = read_cloud(args.cloud)
    mesh = read_obj(args.mesh)
    cams = read_cameras(args.camera)
    if args.image is None:
        if len(cams) != 1:
            raise SfMError("--image is required when the cameras file holds several cameras")
        cam = next(iter(cams.values()))
    else:
        cam = cams[args.image]
    verdicts = classify_static_occlusions(points, normals, mesh, cam, args.depth_gap, args.max_angle)
    lines = ["# index occluding reason model_x model_y model_z"]
    for v in verdicts:
        mp = " ".join(fmt(x) for x in v.model_point) if v.model_point is not None else "- - -"
        lines.append(f"{v.index} {int(v.occluding)} {v.reason.value} {mp}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"{sum(v.occluding for v in verdicts)} of {len(verdicts)} points occlude the mesh", file=sys.stderr)
    return EXIT_OK


def _read_homographies(path, count):
    rows = [[float(x) for x in line.split()] for line in Path(path).read_text().splitlines()
            if line.strip() and not line.startswith("#")]
    if len(rows) != count or any(len(r) != 9 for r in rows):
        raise SfMError(f"{path}: expected {count} lines of 9 numbers")
    return [np.array(r).reshape(3, 3) for r in rows]


def cmd_occlude_dynamic(args) -> int:
    ref = read_ppm(args.reference)
    imgs = [read_ppm(p) for p in args.images]
    Hs = _read_homographies(args.homographies, len(imgs)) if args.homographies else [np.eye(3)] * len(imgs)
    res = compute_background_and_dynamic_mask(ref, list(zip(imgs, Hs)), args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "background.ppm", res.background)
    write_ppm(out / "mask.ppm", res.mask)
    print(f"dynamic pixels: {int(res.mask.sum())} of {res.mask.size}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="anchorsfm", description="Mesh-anchored structure from motion.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene directory")
    s.add_argument("--rig", default="orbit", choices=[r.value for r in Rig])
    s.add_argument("--cameras", type=int, default=10)
    s.add_argument("--points", type=int, default=300)
    s.add_argument("--noise", type=float, default=0.0, help="observation noise (px)")
    s.add_argument("--outliers", type=float, default=0.0, help="fraction of matches replaced by random pixels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("register", parents=[common], help="register all images of a scene")
    r.add_argument("--scene", help="scene directory supplying defaults for the paths below")
    r.add_argument("--images")
    r.add_argument("--mesh")
    r.add_argument("--matches")
    r.add_argument("--anchors", help="directory of anchor annotation files")
    r.add_argument("--provider", help="directory of annotations served on request")
    r.add_argument("--mode", default="hard", choices=[m.value for m in BAMode])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--fov-deg", type=float, default=50.0)
    r.add_argument("--ransac-iterations", type=int, default=2000)
    r.add_argument("--fundamental-threshold", type=float, help="px (default 0.5%% of width)")
    r.add_argument("--homography-threshold", type=float, help="px (default 1%% of width)")
    r.add_argument("--pnp-threshold", type=float, help="px (default 1%% of width)")
    r.add_argument("--track-threshold", type=int, default=60)
    r.add_argument("--anchor-weight", type=float, default=100.0)
    r.add_argument("--event-log", help="event log path (default OUT/events.txt)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("ba", parents=[common], help="bundle-adjust a serialized problem")
    b.add_argument("--problem", required=True)
    b.add_argument("--max-iterations", type=int, default=200)
    b.add_argument("--out")
    b.set_defaults(func=cmd_ba)

    e = sub.add_parser("eval", parents=[common], help="compare cameras with ground truth")
    e.add_argument("--estimated", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--eval-points")
    e.add_argument("--align", action="store_true", help="similarity-align the estimate first")
    e.add_argument("--out", help="metrics JSON (a .txt table is written alongside)")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("occlude-static", parents=[common], help="classify cloud points against the mesh")
    o.add_argument("--cloud", required=True, help="text file of 'X Y Z nx ny nz'")
    o.add_argument("--mesh", required=True)
    o.add_argument("--camera", required=True, help="cameras JSON")
    o.add_argument("--image", help="camera id inside the cameras file")
    o.add_argument("--depth-gap", type=float, default=0.3)
    o.add_argument("--max-angle", type=float, default=30.0)
    o.add_argument("--out")
    o.set_defaults(func=cmd_occlude_static)

    d = sub.add_parser("occlude-dynamic", parents=[common], help="time-lapse background and dynamic mask")
    d.add_argument("--reference", required=True)
    d.add_argument("--images", nargs="+", required=True)
    d.add_argument("--homographies", help="one line of 9 numbers per image (image -> reference)")
    d.add_argument("--threshold", type=float, default=0.05)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_occlude_dynamic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code != 0 else EXIT_OK
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SfMError, ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
