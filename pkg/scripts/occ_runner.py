#!/usr/bin/env python3
"""Occupancy forecasting runner.

Subcommands:
- convert: OCCV / OCCS / raw dump / frame directory conversion
- bev: height map (16-bit PGM) and top-label map (CSV) of one grid
- flow: homography between two BEV maps, FLOW raster, correspondence CSV
- forecast: BEV-flow forecast of future frames
- baseline: Copy&Paste baseline
- fuse: quality fusion of two coarse predictions
- loss: softmax CE and Lovasz-softmax of a FEAT dump against ground truth
- eval: per-horizon IoU / mIoU table (3D and BEV)
- synth: synthetic preset sequence plus ground-truth motion
- run: end-to-end pipeline driven by a YAML config
- self-test: property suite on the synthetic presets

Typed pipeline errors print one ``error code=<CODE> message="..."`` line on
stderr and exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from scripts.utils import log_stage
from src.occupancy import __version__
from src.occupancy.artifacts import ArtifactLog, ArtifactOperation
from src.occupancy.bev import (
    project_height,
    project_label,
    save_height_pgm,
    save_label_csv,
)
from src.occupancy.config import (
    RunConfig,
    default_class_set,
    load_run_config,
)
from src.occupancy.errors import (
    IndexOutOfRange,
    InvalidParameter,
    IoFailure,
    LengthMismatch,
    OccupancyError,
)
from src.occupancy.flow import (
    FlowParams,
    flow_field,
    save_correspondences_csv,
    save_flow_field,
    save_matrix_text,
)
from src.occupancy.forecast import (
    ForecastParams,
    Strategy,
    WarpMode,
    copy_paste,
    estimate_history_flow,
    forecast,
)
from src.occupancy.fusion import (
    LossReport,
    combined_loss,
    get_refiner,
    load_feature_grid,
    one_hot,
    quality_fuse,
)
from src.occupancy.grid import (
    DEFAULT_NUM_CLASSES,
    GridSummary,
    OccSequence,
    export_raw,
    import_raw,
    load_grid,
    load_sequence,
    save_grid,
    save_sequence,
    save_sequence_dir,
)
from src.occupancy.metrics import (
    HorizonTable,
    comparison_csv,
    evaluate_horizons,
)
from src.occupancy.synth import (
    generate,
    get_preset,
    save_motion_yaml,
    split,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
MOTION_SUFFIX = ".motion.yaml"

SUBCOMMANDS = (
    "convert",
    "bev",
    "flow",
    "forecast",
    "baseline",
    "fuse",
    "loss",
    "eval",
    "synth",
    "run",
    "self-test",
    "help",
)

_MODE_ALIASES = {
    "backward": WarpMode.BACKWARD_NN,
    "backward_nn": WarpMode.BACKWARD_NN,
    "forward": WarpMode.FORWARD_SPLAT,
    "forward_splat": WarpMode.FORWARD_SPLAT,
}


# Input helpers


def read_frames(path: str | Path, num_classes: Optional[int] = None):
    """A sequence from an OCCS file or frame directory, or a one-frame
    sequence from an OCCV file."""
    path = Path(path)
    if path.suffix == ".occv":
        return OccSequence(frames=(load_grid(path, num_classes),))
    return load_sequence(path, num_classes)


def ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create directory {path}: {e}") from e
    return path


def write_text(path: str | Path, text: str) -> Path:
    """Write a UTF-8 text artifact, creating its parent directory."""
    path = Path(path)
    ensure_dir(path.parent)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return path


def write_frames(seq: OccSequence, path: str | Path) -> Path:
    """OCCV for single frames with a ``.occv`` target, OCCS otherwise."""
    path = Path(path)
    if path.suffix == ".occv":
        if len(seq) != 1:
            raise InvalidParameter(
                f"cannot write {len(seq)} frames to a single OCCV file"
            )
        save_grid(seq[0], path)
    else:
        save_sequence(seq, path)
    return path


def flow_params_from_args(args: argparse.Namespace) -> FlowParams:
    overrides = {
        key: getattr(args, key)
        for key in (
            "block_size",
            "search_radius",
            "min_texture",
            "ransac_iters",
            "inlier_thresh",
            "min_inliers",
            "ransac_confidence",
            "refine_passes",
            "refine_radius",
        )
        if getattr(args, key, None) is not None
    }
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return FlowParams(**overrides)
    except ValidationError as e:
        raise InvalidParameter(f"invalid flow parameters: {e}") from e


def _class_set(args: argparse.Namespace, num_classes: int) -> List[int]:
    if args.class_set:
        return sorted(set(args.class_set))
    return default_class_set(num_classes)


# Subcommands


def cmd_convert(args: argparse.Namespace) -> int:
    src = Path(args.input)
    if src.suffix == ".raw":
        if not args.dims:
            raise InvalidParameter("raw input needs --dims X Y Z")
        seq = OccSequence(
            frames=(
                import_raw(
                    src, args.dims, args.num_classes or DEFAULT_NUM_CLASSES
                ),
            )
        )
    else:
        seq = read_frames(src, args.num_classes)

    out = Path(args.output)
    if out.suffix == ".raw":
        if len(seq) != 1:
            raise InvalidParameter("raw output holds exactly one frame")
        export_raw(seq[0], out)
    elif out.suffix in (".occv", ".occs"):
        write_frames(seq, out)
    else:
        save_sequence_dir(seq, out)

    for i, frame in enumerate(seq):
        summary = GridSummary.of(frame)
        print(
            f"frame {i}: dims={'x'.join(map(str, summary.dims))} "
            f"occupied={summary.occupied}"
        )
    return 0


def cmd_bev(args: argparse.Namespace) -> int:
    seq = read_frames(args.input, args.num_classes)
    if not 0 <= args.frame < len(seq):
        raise IndexOutOfRange(
            f"frame {args.frame} not in a {len(seq)}-frame input"
        )
    grid = seq[args.frame]
    if args.pgm:
        save_height_pgm(project_height(grid), args.pgm)
    if args.labels:
        save_label_csv(project_label(grid), args.labels)
    print(f"bev {grid.dims_x}x{grid.dims_y} depth={grid.dims_z}")
    return 0


def cmd_flow(args: argparse.Namespace) -> int:
    if args.history:
        history = read_frames(args.history, args.num_classes)
    else:
        if not (args.a and args.b):
            raise InvalidParameter("flow needs --history or both --a and --b")
        a = load_grid(args.a, args.num_classes)
        b = load_grid(args.b, args.num_classes)
        history = OccSequence(frames=(a, b))
    estimate = estimate_history_flow(
        history, flow_params_from_args(args), threads=args.threads
    )
    h = estimate.homography
    if args.out:
        width, height = history.dims[0], history.dims[1]
        save_flow_field(flow_field(h, width, height), args.out)
    if args.csv:
        save_correspondences_csv(
            estimate.correspondences, args.csv, estimate.inliers
        )
    print(" ".join(f"{v:.12g}" for v in h.as_rows()))
    return 0


def cmd_forecast(args: argparse.Namespace) -> int:
    history = read_frames(args.history, args.num_classes)
    params = ForecastParams(
        horizon=args.horizon,
        warp=_MODE_ALIASES[args.mode],
        strategy=Strategy(args.strategy),
        flow=flow_params_from_args(args),
    )
    pred = forecast(history, params, threads=args.threads)
    write_frames(pred, args.out)
    print(f"forecast {len(pred)} frames -> {args.out}")
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    history = read_frames(args.history, args.num_classes)
    pred = copy_paste(history, args.horizon)
    write_frames(pred, args.out)
    print(f"{args.method} {len(pred)} frames -> {args.out}")
    return 0


def fuse_sequences(
    a: OccSequence,
    b: OccSequence,
    w: float,
    refiner_kind: str = "identity",
    order: str = "ascending",
    refiner_args: Optional[Dict] = None,
) -> OccSequence:
    if len(a) != len(b):
        raise LengthMismatch(
            f"fusion inputs have {len(a)} and {len(b)} frames",
            {"a": len(a), "b": len(b)},
        )
    refiner = get_refiner(refiner_kind, **(refiner_args or {}))
    frames = tuple(
        quality_fuse(fa, fb, w, refiner, order) for fa, fb in zip(a, b)
    )
    return OccSequence(frames=frames, frame_period_s=a.frame_period_s)


def cmd_fuse(args: argparse.Namespace) -> int:
    if not 0.0 <= args.w <= 1.0:
        raise InvalidParameter(f"gate weight must be in [0, 1], got {args.w}")
    a = read_frames(args.a, args.num_classes)
    b = read_frames(args.b, args.num_classes)
    refiner_args = {"path": args.refiner_path} if args.refiner_path else {}
    fused = fuse_sequences(
        a, b, args.w, args.refiner, args.order, refiner_args
    )
    write_frames(fused, args.out)
    print(f"fused {len(fused)} frames -> {args.out}")
    return 0


def cmd_loss(args: argparse.Namespace) -> int:
    pred = load_feature_grid(args.pred)
    gt = load_grid(args.gt, args.num_classes)
    report = combined_loss(
        pred, gt, lam=args.lam, ignore_free=args.ignore_free
    )
    print(f"softmax_ce={report.softmax_ce:.12g}")
    print(f"lovasz={report.lovasz:.12g}")
    print(f"total={report.total:.12g}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred = read_frames(args.pred, args.num_classes)
    gt = read_frames(args.gt, args.num_classes)
    num_classes = args.num_classes or pred[0].num_classes
    table = evaluate_horizons(
        pred, gt, _class_set(args, num_classes), num_classes
    )
    text = table.to_json() if args.json else table.to_csv()
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    scenario = get_preset(args.preset, seed=args.seed)
    seq, motion = generate(scenario)
    out = write_frames(seq, args.out)
    save_motion_yaml(motion, out.with_name(out.name + MOTION_SUFFIX))
    print(f"{scenario.name}: {len(seq)} frames -> {out}")
    if args.split is not None:
        history, future = split(seq, args.split)
        for part, frames in (("history", history), ("future", future)):
            target = out.with_name(f"{out.stem}.{part}.occs")
            save_sequence(frames, target)
            print(f"{part}: {len(frames)} frames -> {target}")
    return 0


def horizon_losses(
    pred: OccSequence,
    gt: OccSequence,
    num_classes: int,
    lam: float,
    class_set: Optional[Sequence[int]] = None,
) -> List[LossReport]:
    """Combined loss of each forecast frame scored as a one-hot volume."""
    return [
        combined_loss(one_hot(p, num_classes), g, lam=lam, class_set=class_set)
        for p, g in zip(pred, gt)
    ]


def loss_csv(losses: Sequence[LossReport]) -> str:
    lines = ["horizon,softmax_ce,lovasz,lambda,total"]
    for k, r in enumerate(losses, start=1):
        lines.append(
            f"{k},{r.softmax_ce:.12g},{r.lovasz:.12g},{r.lam:.12g},"
            f"{r.total:.12g}"
        )
    return "\n".join(lines) + "\n"


# End-to-end pipeline


@dataclass
class RunResult:
    output_dir: Path
    tables: List[HorizonTable] = field(default_factory=list)
    fallback: Optional[str] = None


@log_stage(logger, "run")
def run_pipeline(config: RunConfig) -> RunResult:
    out = ensure_dir(config.output_dir)
    artifacts = ArtifactLog(out)
    history = read_frames(config.history_path, config.num_classes)
    params = config.forecast_params()

    estimate = estimate_history_flow(
        history, params.flow, threads=config.threads
    )
    prediction = forecast(history, params, estimate, threads=config.threads)
    baseline = copy_paste(history, config.horizon)

    save_sequence(prediction, out / "prediction.occs")
    artifacts.record(
        ArtifactOperation.SEQUENCE_WRITE,
        out / "prediction.occs",
        {"method": "bev_flow", "frames": len(prediction)},
    )
    save_sequence(baseline, out / "copy_paste.occs")
    artifacts.record(
        ArtifactOperation.SEQUENCE_WRITE,
        out / "copy_paste.occs",
        {"method": "copy_paste", "frames": len(baseline)},
    )
    save_matrix_text(estimate.homography, out / "flow_matrix.txt")
    artifacts.record(
        ArtifactOperation.MATRIX_WRITE,
        out / "flow_matrix.txt",
        {
            "fallback": estimate.fallback,
            "inliers": estimate.inlier_count,
            "correspondences": len(estimate.correspondences),
        },
    )
    width, height, _ = history.dims
    save_flow_field(
        flow_field(estimate.homography, width, height), out / "flow.flow"
    )
    artifacts.record(ArtifactOperation.FLOW_WRITE, out / "flow.flow")

    final = prediction
    methods = {"bev_flow": prediction, "copy_paste": baseline}
    if config.second_path:
        second = read_frames(config.second_path, config.num_classes)
        fused = fuse_sequences(
            prediction,
            second,
            config.gate_weight,
            config.refiner,
            config.weight_order.value,
            config.refiner_args,
        )
        save_sequence(fused, out / "fused.occs")
        artifacts.record(
            ArtifactOperation.SEQUENCE_WRITE,
            out / "fused.occs",
            {"method": "fused", "gate_weight": config.gate_weight},
        )
        methods["second"] = second
        methods["fused"] = fused
        final = fused
    else:
        logger.warning(
            "no second coarse prediction; gate weight forced to 0, "
            "output is the BEV-flow forecast"
        )

    tables: List[HorizonTable] = []
    if config.gt_path:
        gt = read_frames(config.gt_path, config.num_classes)
        class_set = config.resolved_class_set()
        primary = evaluate_horizons(
            final, gt, class_set, config.num_classes, method="output"
        )
        tables.append(primary)
        for name, seq in methods.items():
            tables.append(
                evaluate_horizons(
                    seq, gt, class_set, config.num_classes, method=name
                )
            )
        write_text(out / "metrics.csv", primary.to_csv())
        artifacts.record(ArtifactOperation.METRICS_WRITE, out / "metrics.csv")
        report = {t.method: t.to_dict() for t in tables}
        write_text(
            out / "metrics.json",
            json.dumps(report, indent=2, sort_keys=True) + "\n",
        )
        artifacts.record(ArtifactOperation.METRICS_WRITE, out / "metrics.json")
        write_text(out / "comparison.csv", comparison_csv(tables))
        artifacts.record(
            ArtifactOperation.METRICS_WRITE, out / "comparison.csv"
        )
        losses = horizon_losses(
            final, gt, config.num_classes, config.loss_lambda, class_set
        )
        write_text(out / "loss.csv", loss_csv(losses))
        artifacts.record(
            ArtifactOperation.METRICS_WRITE,
            out / "loss.csv",
            {"lambda": config.loss_lambda},
        )

    artifacts.write_manifest()
    return RunResult(
        output_dir=out, tables=tables, fallback=estimate.fallback
    )


def cmd_run(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    update = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.threads_set:
        update["threads"] = args.threads
    if args.output_dir:
        update["output_dir"] = args.output_dir
    if update:
        config = config.model_copy(update=update)
    result = run_pipeline(config)
    print(f"run complete -> {result.output_dir}")
    for table in result.tables[:1]:
        sys.stdout.write(table.to_csv())
    return 0


def cmd_self_test(args: argparse.Namespace) -> int:
    from scripts.self_test import PropertyChecker

    result = PropertyChecker(threads=args.threads).run_checks()
    for check in result.checks:
        status = check.status.value.upper()
        print(f"{status:7s} {check.name}: {check.message}")
    print(f"overall: {result.overall_status.value}")
    return 0 if result.passed else 1


# Parser


def _add_flow_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--block-size", type=int, dest="block_size")
    p.add_argument("--search-radius", type=int, dest="search_radius")
    p.add_argument("--min-texture", type=float, dest="min_texture")
    p.add_argument("--ransac-iters", type=int, dest="ransac_iters")
    p.add_argument("--inlier-thresh", type=float, dest="inlier_thresh")
    p.add_argument("--min-inliers", type=int, dest="min_inliers")
    p.add_argument(
        "--ransac-confidence", type=float, dest="ransac_confidence"
    )
    p.add_argument("--refine-passes", type=int, dest="refine_passes")
    p.add_argument("--refine-radius", type=int, dest="refine_radius")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occ_runner",
        description="Coarse-to-fine 4D occupancy forecasting toolkit",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument(
        "--num-classes", type=int, default=None, dest="num_classes"
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("convert", help="convert between grid formats")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--dims", type=int, nargs=3)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("bev", help="dump BEV height and label maps")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--pgm")
    p.add_argument("--labels")
    p.set_defaults(func=cmd_bev)

    p = sub.add_parser("flow", help="estimate the BEV flow homography")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--history")
    p.add_argument("--out")
    p.add_argument("--csv")
    _add_flow_flags(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("forecast", help="BEV-flow forecast")
    p.add_argument("--history", required=True)
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument(
        "--mode", choices=sorted(_MODE_ALIASES), default="backward"
    )
    p.add_argument(
        "--strategy", choices=[s.value for s in Strategy], default="composed"
    )
    p.add_argument("--out", required=True)
    _add_flow_flags(p)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("baseline", help="Copy&Paste baseline")
    p.add_argument("method", choices=["copy-paste"])
    p.add_argument("--history", required=True)
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("fuse", help="quality fusion of two predictions")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--w", type=float, default=0.5)
    p.add_argument(
        "--order", choices=["ascending", "descending"], default="ascending"
    )
    p.add_argument(
        "--refiner", choices=["identity", "file"], default="identity"
    )
    p.add_argument("--refiner-path", dest="refiner_path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("loss", help="softmax CE and Lovasz-softmax")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--ignore-free", action="store_true", dest="ignore_free")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("eval", help="per-horizon IoU / mIoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--class-set", type=int, nargs="+", dest="class_set")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--split",
        type=int,
        help="also write history/future sequences split after N frames",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="end-to-end pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("self-test", help="run the property suite")
    p.set_defaults(func=cmd_self_test)

    p = sub.add_parser("help", help="list subcommands")
    p.set_defaults(func=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    args.threads_set = args.threads is not None
    if args.threads is None:
        args.threads = 1
    if args.command is None or args.func is None:
        parser.print_help()
        return 0
    try:
        if args.threads < 1:
            raise InvalidParameter(
                f"--threads must be >= 1, got {args.threads}"
            )
        return args.func(args)
    except OccupancyError as e:
        print(e.one_line(), file=sys.stderr)
        return 2
    except ValidationError as e:
        error = InvalidParameter(str(e).splitlines()[0])
        print(error.one_line(), file=sys.stderr)
        return 2
    except OSError as e:
        print(IoFailure(str(e)).one_line(), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
