"""Command-line entry point: ``mocapkit <subcommand> ...``.

Exit codes: 0 success, 2 validation or schema failure, 3 optimizer divergence,
1 any other library error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import DivergenceError, MocapError, StageError, ValidationError
from .io.archive import SequenceArchive, read_archive, write_archive
from .io.config import ENV_VAR, load_config
from .io.scene import SceneSpec, generate_synthetic_scene
from .model import CameraState, KeypointFrame2D, KeypointFrame3D
from .pipeline import evaluate_trajectories, run_pipeline, run_stage

logger = logging.getLogger("mocapkit")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3

# subcommand -> pipeline stage
STAGE_COMMANDS = {"shots": "shots", "smooth": "smooth", "fit": "fit", "mvba": "multiview",
                  "traj": "trajectory", "caption": "caption", "augment": "augment"}


def import_keypoints(data):
    """Build an archive from a JSON-style detector dump.

    Expected keys: ``fps``; ``keypoints_2d`` as a list over views of (T, J, 3)
    arrays holding x, y, confidence; optional ``keypoints_3d`` (T, J, 4),
    ``poses`` (T, 215), ``bboxes`` (T, N, 4) as cx, cy, w, h, and ``cameras``
    as a list over views of {intrinsics, rotation, translation, scale}.
    """
    try:
        views = [np.asarray(v, dtype=np.float64) for v in data["keypoints_2d"]]
        fps = float(data.get("fps", 30.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed keypoint file: {exc}") from None
    if not views or any(v.ndim != 3 or v.shape[-1] != 3 for v in views):
        raise ValidationError("keypoints_2d must be a list of (T, J, 3) arrays")
    n = views[0].shape[0]
    if any(v.shape[0] != n for v in views):
        raise ValidationError("views disagree on frame count")
    arc = SequenceArchive(fps=fps, n_frames=n, skeleton_id=data.get("skeleton_id", "wholebody71-v1"),
                          view_count=len(views), arrays={}, records={"source": "import"})
    for i, v in enumerate(views):
        arc.set_keypoints_2d(KeypointFrame2D(v[..., :2], v[..., 2]), i)
    if "keypoints_3d" in data:
        k3 = np.asarray(data["keypoints_3d"], dtype=np.float64)
        arc.set_keypoints_3d(KeypointFrame3D(k3[..., :3], k3[..., 3]))
    if "poses" in data:
        arc["poses"] = np.asarray(data["poses"], dtype=np.float64)
    if "bboxes" in data:
        arc["detections"] = np.asarray(data["bboxes"], dtype=np.float64).reshape(n, -1, 4)
    for i, cam in enumerate(data.get("cameras", [])):
        state = CameraState(np.asarray(cam["intrinsics"], float), np.asarray(cam.get("rotation", np.eye(3)), float),
                            np.asarray(cam.get("translation", np.zeros(3)), float), float(cam.get("scale", 1.0)))
        arc.set_cameras([state] * n, i)
    return arc


def _config(args):
    return load_config(args.config, args.set or ())


def _write_report(report, path):
    text = json.dumps(report, indent=1, default=float)
    if path:
        Path(path).write_text(text)


def cmd_import(args):
    data = json.loads(Path(args.input).read_text())
    write_archive(import_keypoints(data), args.output)


def cmd_stage(args):
    config = _config(args)
    out, info = run_stage(STAGE_COMMANDS[args.command], read_archive(args.input), config)
    write_archive(out, args.output)
    _write_report([info], args.report)


def cmd_run(args):
    config = _config(args)
    updates = {k: v for k, v in (("input", args.input), ("output", args.output), ("report", args.report)) if v}
    config = config.model_copy(update=updates)
    run_pipeline(config)


def cmd_eval(args):
    ate, rte = evaluate_trajectories(read_archive(args.estimate), read_archive(args.truth))
    print(json.dumps({"ate": ate, "rte": rte}))


def cmd_synth(args):
    spec = {}
    if args.spec:
        spec = yaml.safe_load(Path(args.spec).read_text()) or {}
    for item in args.set or ():
        key, _, value = item.partition("=")
        spec[key] = yaml.safe_load(value)
    try:
        spec = SceneSpec.model_validate(spec)
    except Exception as exc:  # pydantic ValidationError
        raise ValidationError(f"invalid scene spec: {exc}") from None
    write_archive(generate_synthetic_scene(spec, args.seed), args.output)


def build_parser():
    parser = argparse.ArgumentParser(prog="mocapkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help=f"config file (default: ${ENV_VAR})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = sub.add_parser("import", help="convert a JSON keypoint dump to an archive")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_import)

    for name, stage in STAGE_COMMANDS.items():
        p = with_config(sub.add_parser(name, help=f"run the {stage} stage on one archive"))
        p.add_argument("input")
        p.add_argument("output")
        p.add_argument("--report", help="write the stage report (JSON)")
        p.set_defaults(func=cmd_stage)

    p = with_config(sub.add_parser("run", help="run all enabled stages"))
    p.add_argument("input", nargs="?")
    p.add_argument("output", nargs="?")
    p.add_argument("--report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="ATE and RTE of an estimate against a truth archive")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic scene archive")
    p.add_argument("output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="scene spec file (YAML or JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)
    return parser


def exit_code(exc):
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(cause, ValidationError):
        return EXIT_INVALID
    return EXIT_ERROR


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except MocapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
