"""Command-line driver: one subcommand per stage plus ``run-all``.

Exit codes: 0 ok, 1 usage, 2 input validation, 3 segmenter failure,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable

from crownlabel import __version__, pipeline
from crownlabel.errors import InputError, InvariantError, SegmenterError

log = logging.getLogger("crownlabel")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_SEGMENTER, EXIT_INVARIANT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which here means bad input data
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _channels(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _jobs(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("--jobs must be at least 1")
    return v


# (flag, key, type); defaults come from pipeline.DEFAULTS so file values can sit in between
OPTIONS: dict[str, list[tuple[str, str, Callable]]] = {
    "chm": [("--cell", "cell", float), ("--channels", "channels", _channels),
            ("--ground-grid", "ground_grid", float), ("--ground-tol", "ground_tol", float)],
    "delineate": [("--sigma", "sigma", float), ("--min-height", "min_height", float),
                  ("--win-a", "win_a", float), ("--win-b", "win_b", float)],
    "ndvi-filter": [("--threshold", "threshold", float)],
    "tile": [("--size", "size", int), ("--stride", "stride", int)],
    "enhance": [("--endpoint", "endpoint", str), ("--file-dir", "file_dir", str),
                ("--mock-threshold", "mock_threshold", float), ("--attempts", "attempts", int)],
    "postfilter": [("--mask", "mask", float), ("--score", "score", float), ("--nms-iou", "nms_iou", float),
                   ("--ios", "ios", float)],
    "eval": [("--overlap", "overlap", float), ("--mode", "mode", str), ("--window", "window", str),
             ("--bootstrap", "bootstrap", int), ("--level", "level", float)],
}
STAGE_DEFAULTS = {"ndvi-filter": "ndvi"}
CHOICES = {"mode": ("iou", "iogt"), "window": ("center", "full")}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crownlabel", description="Tree crown pseudo-labels from lidar and orthophotos.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--jobs", type=_jobs, default=1, help="worker threads inside a stage")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def stage(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON file of flag values; flags win")
        for flag, key, typ in OPTIONS.get(name, []):
            sp.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS, choices=CHOICES.get(key))
        return sp

    sp = stage("chm", "lidar CSV to filled canopy height raster")
    sp.add_argument("--points", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = stage("delineate", "treetops and marker watershed on a CHM")
    sp.add_argument("--chm", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = stage("ndvi-filter", "drop segments with low mean NDVI, move to ortho pixels")
    sp.add_argument("--ortho", type=Path, required=True)
    sp.add_argument("--bands", type=Path, help="band index JSON (default b,g,r,re,nir)")
    sp.add_argument("--annotations", type=Path, required=True)
    sp.add_argument("--hist", type=Path, help="per-segment NDVI CSV; a PNG is written beside it")
    sp.add_argument("--ndvi-out", type=Path, help="also write the NDVI raster")
    sp.add_argument("--out", type=Path, required=True)

    sp = stage("tile", "cut into overlapping tiles by centroid")
    sp.add_argument("--annotations", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = stage("enhance", "refine masks with a box-prompted segmenter")
    sp.add_argument("--tiles", type=Path, required=True)
    sp.add_argument("--ortho", type=Path)
    sp.add_argument("--mock-guide", type=Path, help="answer locally by flooding this raster")
    sp.add_argument("--out", type=Path, required=True)

    sp = stage("postfilter", "score gate, NMS and containment filter")
    sp.add_argument("--annotations", type=Path, required=True)
    sp.add_argument("--box-nms", action="store_true", default=argparse.SUPPRESS, help="box IoU for NMS")
    sp.add_argument("--out", type=Path, required=True)

    sp = stage("eval", "match predictions to ground truth and report metrics")
    sp.add_argument("--pred", type=Path, required=True)
    sp.add_argument("--gt", type=Path, required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--name", default="prediction", help="method label in the report")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("run-all", help="every stage from a pipeline config")
    sp.add_argument("--config", type=Path, required=True)
    sp.add_argument("--out-dir", type=Path, required=True)
    sp.add_argument("--seed", type=int, default=None)

    # hidden: no help entry
    sp = sub.add_parser("synth")
    sp.add_argument("--out-dir", type=Path, required=True)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--size", type=int, default=2048)
    sp.add_argument("--trees", type=int, default=90)
    sp.add_argument("--felled", type=int, default=8)
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "synth"]
    return p


def _load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    if not path.exists():
        raise InputError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a JSON object")
    return doc


def resolve_options(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Built-in defaults, then config file values, then explicit flags."""
    base = pipeline.DEFAULTS[STAGE_DEFAULTS.get(command, command)]
    file_cfg = _load_config(getattr(args, "config", None))
    opts = dict(base)
    for k, v in file_cfg.items():
        key = k.replace("-", "_")
        if key in base:
            opts[key] = v
    for key in base:
        if hasattr(args, key):
            opts[key] = getattr(args, key)
    if "channels" in opts and isinstance(opts["channels"], str):
        try:
            opts["channels"] = _channels(opts["channels"])
        except argparse.ArgumentTypeError as exc:
            raise InputError(f"config: {exc}") from None
    return opts


def dispatch(args: argparse.Namespace) -> None:
    cmd = args.command
    if cmd == "synth":
        from crownlabel.synth import make_scene
        make_scene(args.out_dir, args.seed, args.size, args.trees, args.felled)
        return
    if cmd == "run-all":
        pipeline.run_all(args.config, args.out_dir, seed=args.seed, jobs=args.jobs)
        return
    o = resolve_options(cmd, args)
    if cmd == "chm":
        pipeline.run_chm(args.points, args.out, o["cell"], o["channels"], o["ground_grid"], o["ground_tol"])
    elif cmd == "delineate":
        pipeline.run_delineate(args.chm, args.out, o["sigma"], o["min_height"], o["win_a"], o["win_b"])
    elif cmd == "ndvi-filter":
        pipeline.run_ndvi_filter(args.ortho, args.bands, args.annotations, args.out, o["threshold"],
                                 args.hist, args.ndvi_out)
    elif cmd == "tile":
        pipeline.run_tile(args.annotations, args.out, o["size"], o["stride"])
    elif cmd == "enhance":
        pipeline.run_enhance(args.tiles, args.out, ortho=args.ortho, endpoint=o["endpoint"],
                             mock_guide=args.mock_guide, file_dir=o["file_dir"],
                             mock_threshold=o["mock_threshold"], attempts=o["attempts"], jobs=args.jobs)
    elif cmd == "postfilter":
        pipeline.run_postfilter(args.annotations, args.out, o["score"], o["nms_iou"], o["ios"],
                                o["box_nms"], o["mask"])
    elif cmd == "eval":
        seed = args.seed
        if seed is None:
            seed = _load_config(args.config).get("seed", pipeline.evaluate.DEFAULT_SEED)
        pipeline.run_eval(args.pred, args.gt, args.out, o["overlap"], o["mode"], o["window"],
                          o["bootstrap"], o["level"], seed, args.jobs, args.name)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("crownlabel: a command is required (see --help)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except SegmenterError as exc:
        print(f"segmenter error: {exc}", file=sys.stderr)
        return EXIT_SEGMENTER
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
