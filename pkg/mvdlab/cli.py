from __future__ import annotations

import argparse
import logging
import os
import sys

import torch

from . import __version__
from .config import RunConfig, load_run_config
from .dataset import TASKS
from .errors import ConfigError, GeometryError, ModalityError, MvdLabError
from .pipeline import (
    BASELINES,
    DATA_ROOT,
    replay_manifest,
    run_analyze,
    run_distill,
    run_eval,
    run_pretrain,
    run_summarize,
    run_synth,
)

logger = logging.getLogger("mvdlab")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; keep that but with our message prefix."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="Sectioned key = value file, or a run manifest JSON to replay.")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value; repeatable, later flags win.",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mvdlab",
        description="Desk-scale masked video distillation: teacher pretraining, co-teaching distillation, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="Generate a synthetic labeled video corpus.")
    p.add_argument("--task", type=str, required=True, help=f"One of {', '.join(TASKS)}.")
    p.add_argument("--n", type=int, required=True, help="Number of clips.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--out", type=str, required=True, help="Corpus directory.")
    _add_config_flags(p)

    p = sub.add_parser("pretrain", help="Stage 1: masked pixel reconstruction of an image or video teacher.")
    p.add_argument("--modality", choices=("image", "video"), required=True)
    p.add_argument("--data", type=str, required=True, help="Training corpus directory.")
    p.add_argument("--out", type=str, required=True, help="Checkpoint directory.")
    _add_config_flags(p)

    p = sub.add_parser("distill", help="Stage 2: masked feature distillation into a student.")
    p.add_argument("--image-teacher", type=str, default=None, help="Frozen image teacher checkpoint.")
    p.add_argument("--video-teacher", type=str, default=None, help="Frozen video teacher checkpoint.")
    p.add_argument("--lambda-img", type=float, default=None, help="Weight of the image-teacher loss.")
    p.add_argument("--lambda-vid", type=float, default=None, help="Weight of the video-teacher loss.")
    p.add_argument("--pixel-branch", action="store_true", help="Add a third decoder reconstructing pixels.")
    p.add_argument("--baseline", choices=BASELINES, default=None)
    p.add_argument("--momentum", type=float, default=None, help="EMA momentum for --baseline ema.")
    p.add_argument("--init", type=str, default=None, help="Start the EMA baseline from this video checkpoint.")
    p.add_argument("--cache-dir", type=str, default=None, help="Persist teacher targets here.")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="Finetune every model on every task; write model,task,top1 CSV.")
    p.add_argument("--models", type=str, required=True, help="Comma-separated [name=]checkpoint list.")
    p.add_argument(
        "--tasks",
        type=str,
        required=True,
        help="Comma-separated list of [name=]train_dir:val_dir entries or bare task names.",
    )
    p.add_argument(
        "--data-root",
        type=str,
        default=DATA_ROOT,
        help="Where a bare task name NAME is read from: DATA_ROOT/NAME_train and DATA_ROOT/NAME_val.",
    )
    p.add_argument("--random-init", action="store_true", help="Also evaluate an untrained student as the floor.")
    p.add_argument("--linear-probe", action="store_true", help="Train the head only.")
    p.add_argument("--similarity-data", type=str, default=None, help="Also report mean cross-frame similarity on this corpus.")
    p.add_argument("--out", type=str, required=True)
    _add_config_flags(p)

    p = sub.add_parser("analyze", help="Cross-frame cosine similarity of a model's features.")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--modality", choices=("image", "video"), default=None, help="Require this checkpoint modality.")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--frame-axis", action="store_true", help="Repeat temporal tokens so the axes count frames.")
    p.add_argument("--heatmap", type=str, default=None, help="Also render a PNG heatmap (needs matplotlib).")
    p.add_argument("--out", type=str, required=True)
    _add_config_flags(p)

    p = sub.add_parser("summarize", help="Check the directional results over every seed<k>/ run directory.")
    p.add_argument("--runs", type=str, required=True, help="Directory holding seed<k>/report.csv and the similarity grids.")
    p.add_argument("--strict", action="store_true", help="Exit 1 when a check does not hold.")
    p.add_argument("--out", type=str, required=True, help="Summary CSV; per-seed CSV and markdown go next to it.")
    _add_config_flags(p)

    p = sub.add_parser("replay", help="Re-run the command a run manifest records.")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--out", type=str, default=None, help="Write here instead of the recorded output.")

    return parser


def configure_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[%(name)s] %(message)s"))
    root = logging.getLogger("mvdlab")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _configure_threads() -> None:
    raw = os.environ.get("MVDLAB_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MVDLAB_THREADS must be an integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(f"MVDLAB_THREADS must be >= 1, got {threads}")
    torch.set_num_threads(threads)


def _cli_overrides(args: argparse.Namespace) -> tuple[list[str], list[str]]:
    """(implied, explicit) overrides from dedicated flags.

    Implied ones go before ``--set`` and explicit ones after it, so a dedicated
    flag always wins and an implied value never hides a ``--set``.
    """
    implied: list[str] = []
    explicit: list[str] = []
    if args.command == "distill":
        for flag, teacher, key in (
            (args.lambda_img, args.image_teacher, "lambda_img"),
            (args.lambda_vid, args.video_teacher, "lambda_vid"),
        ):
            if flag is not None:
                explicit.append(f"stage2.{key}={flag!r}")
            elif teacher is None and args.baseline is None:
                # an absent teacher carries no weight
                implied.append(f"stage2.{key}=0.0")
        if args.pixel_branch:
            explicit.append("stage2.pixel_branch=true")
        if args.momentum is not None:
            explicit.append(f"stage2.momentum={args.momentum!r}")
    if args.command == "eval" and args.linear_probe:
        explicit.append("eval.linear_probe=true")
    return implied, explicit


def _dispatch(args: argparse.Namespace, config: RunConfig) -> str:
    if args.command == "synth":
        run_synth(config, task=args.task, n=args.n, seed=args.seed, out=args.out, split=args.split)
        return args.out
    if args.command == "pretrain":
        return run_pretrain(config, modality=args.modality, data=args.data, out=args.out)
    if args.command == "distill":
        return run_distill(
            config,
            data=args.data,
            out=args.out,
            image_teacher=args.image_teacher,
            video_teacher=args.video_teacher,
            baseline=args.baseline,
            init=args.init,
            cache_dir=args.cache_dir,
        )
    if args.command == "eval":
        return run_eval(
            config,
            models=[m for m in args.models.split(",") if m],
            tasks=[t for t in args.tasks.split(",") if t],
            out=args.out,
            similarity_data=args.similarity_data,
            data_root=args.data_root,
            random_init=args.random_init,
        )
    if args.command == "summarize":
        return run_summarize(config, runs=args.runs, out=args.out, strict=args.strict)
    if args.command == "replay":
        return replay_manifest(args.manifest, config, args.out)
    summary = run_analyze(
        config,
        model=args.model,
        data=args.data,
        out=args.out,
        modality=args.modality,
        frame_axis=args.frame_axis,
        heatmap=args.heatmap,
    )
    logger.info("similarity summary %.6f", summary)
    return args.out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    if args.command == "synth" and args.task not in TASKS:
        parser.exit(EXIT_USAGE, f"error: unknown task {args.task!r}; expected one of {', '.join(TASKS)}\n")

    try:
        _configure_threads()
        if args.command == "replay":
            config = load_run_config(args.manifest)
        else:
            implied, explicit = _cli_overrides(args)
            config = load_run_config(args.config, [*implied, *args.overrides, *explicit])
    except (ConfigError, GeometryError) as exc:
        parser.exit(EXIT_USAGE, f"error: {exc}\n")

    try:
        out = _dispatch(args, config)
    except ModalityError as exc:
        parser.exit(EXIT_RUNTIME, f"error: {exc}\n")
    except ConfigError as exc:
        parser.exit(EXIT_USAGE, f"error: {exc}\n")
    except (MvdLabError, OSError, RuntimeError, ValueError) as exc:
        parser.exit(EXIT_RUNTIME, f"error: {exc}\n")
    print(out)
    return EXIT_OK
