"""Command bodies for the CLI and the run manifest each of them writes.

A manifest (``<output>.manifest.json``) is written when a command starts and
finalised when it finishes. It records the resolved config snapshot, the seeds,
hashes of every input artifact and the output paths with their hashes.
It also keeps the command's arguments, so :func:`replay_manifest` can re-run
the command from the manifest alone.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable

from .backbone import freeze, init_model
from .cache import CacheConfig, TargetCache
from .checkpoint import load_checkpoint, load_teacher, parameter_hash, save_checkpoint
from .config import RunConfig
from .dataset import (
    NORM_NAME,
    TASKS,
    LabeledVideoSet,
    NormStats,
    compute_norm_stats,
    corpus_fingerprint,
    load_corpus,
    load_norm_stats,
    save_corpus,
    save_norm_stats,
)
from .distill import TeacherBundle, check_ema_init, distill, ema_teacher_distill, per_token_distill
from .errors import AnalysisError, ConfigError
from .evaluation import EvalTask, aggregate_similarity, compare_report, render_heatmap
from .pretrain import pretrain_image_teacher, pretrain_video_teacher
from .summary import IMAGE_SIM_NAME, RANDOM_INIT, REPORT_NAME, VIDEO_SIM_NAME, load_seed_results, run_checks, write_summary
from .training import TrainLog, derive_seed

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"
BASELINES = ("per-token", "ema")
DATA_ROOT = "runs"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def artifact_hash(path: str) -> str:
    """sha256 over a file, or over every file of a directory in sorted order."""
    digest = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                if name.endswith(MANIFEST_SUFFIX):
                    continue
                full = os.path.join(root, name)
                digest.update(os.path.relpath(full, path).encode("utf-8"))
                with open(full, "rb") as f:
                    digest.update(f.read())
    else:
        with open(path, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


def manifest_path_for(output: str) -> str:
    return output.rstrip("/\\") + MANIFEST_SUFFIX


@dataclass
class RunManifest:
    command: str
    config: dict[str, dict[str, Any]]
    seeds: dict[str, int]
    args: dict[str, Any] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str | None] = field(default_factory=dict)
    started: str = ""
    finished: str | None = None
    seconds: float | None = None
    status: str = "running"
    path: str = ""
    _t0: float = field(default=0.0, repr=False)

    @classmethod
    def begin(
        cls,
        path: str,
        command: str,
        config: RunConfig,
        seeds: dict[str, int],
        inputs: dict[str, str] | None = None,
        args: dict[str, Any] | None = None,
    ) -> "RunManifest":
        manifest = cls(
            command=command,
            config=config.snapshot(),
            seeds=dict(seeds),
            args=dict(args or {}),
            inputs=dict(inputs or {}),
            started=_now(),
            path=path,
        )
        manifest._t0 = time.perf_counter()
        manifest.write()
        return manifest

    def finish(self, outputs: dict[str, str]) -> None:
        self.outputs = {}
        for role, out in outputs.items():
            self.outputs[role] = out
            if os.path.exists(out):
                self.outputs[f"{role}_sha256"] = artifact_hash(out)
        self.finished = _now()
        self.seconds = time.perf_counter() - self._t0
        self.status = "finished"
        self.write()

    def write(self) -> None:
        parent = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(parent, exist_ok=True)
        payload = {k: v for k, v in asdict(self).items() if k not in ("path", "_t0")}
        tmp = f"{self.path}.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2)
            f.write("\n")
        os.replace(tmp, self.path)


def _load_stats(corpus_dir: str) -> NormStats | None:
    path = os.path.join(corpus_dir, NORM_NAME)
    if not os.path.exists(path):
        logger.warning("no %s in %s; training on raw pixel values", NORM_NAME, corpus_dir)
        return None
    return load_norm_stats(path)


def _write_log(log: TrainLog, out: str) -> str:
    path = out.rstrip("/\\") + ".log.csv"
    log.write_csv(path)
    window = max(1, len(log.rows) // 10)
    rises = log.non_monotone_epochs(window=window)
    if rises > 2:
        logger.warning("loss rose %d times over %d-epoch blocks; see %s", rises, window, path)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_synth(config: RunConfig, *, task: str, n: int, seed: int, out: str, split: str = "train") -> LabeledVideoSet:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    if n < 1:
        raise ConfigError(f"--n must be >= 1, got {n}")
    args = {"task": task, "n": n, "seed": seed, "out": out, "split": split}
    manifest = RunManifest.begin(manifest_path_for(out), "synth", config, {"data": seed}, args=args)
    corpus = TASKS[task](seed, n, config.geometry, config.get("data", "class_count"), patch=config.patch, split=split)
    save_corpus(corpus, out)
    save_norm_stats(compute_norm_stats(corpus), os.path.join(out, NORM_NAME))
    manifest.finish({"corpus": out})
    return corpus


def run_pretrain(config: RunConfig, *, modality: str, data: str, out: str) -> str:
    corpus = load_corpus(data)
    stats = _load_stats(data)
    model_config = config.model_config(modality, teacher=True)
    pre_config = config.pretrain_config(modality)
    manifest = RunManifest.begin(
        manifest_path_for(out),
        f"pretrain/{modality}",
        config,
        {"root": pre_config.seed},
        {data: corpus_fingerprint(data)},
        args={"modality": modality, "data": data, "out": out},
    )
    train = pretrain_image_teacher if modality == "image" else pretrain_video_teacher
    encoder, log = train(corpus, model_config, pre_config, stats)
    save_checkpoint(freeze(encoder), out)
    log_path = _write_log(log, out)
    manifest.finish({"checkpoint": out, "train_log": log_path})
    return out


def run_distill(
    config: RunConfig,
    *,
    data: str,
    out: str,
    image_teacher: str | None = None,
    video_teacher: str | None = None,
    baseline: str | None = None,
    init: str | None = None,
    cache_dir: str | None = None,
) -> str:
    """Co-teaching distillation, or one of the baselines."""
    if baseline is not None and baseline not in BASELINES:
        raise ConfigError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")
    dist_config = config.distill_config()
    student_config = config.model_config("video")
    teachers: dict[str, str] = {}
    if image_teacher:
        teachers[image_teacher] = "image"
    if video_teacher:
        teachers[video_teacher] = "video"

    if init and baseline != "ema":
        raise ConfigError("--init only applies to --baseline ema")
    if baseline == "ema":
        if teachers:
            raise ConfigError("the EMA baseline bootstraps its own teacher; drop --image-teacher/--video-teacher")
    elif not teachers:
        raise ConfigError("distillation needs --image-teacher and/or --video-teacher")
    elif baseline == "per-token" and len(teachers) != 1:
        raise ConfigError("per-token distillation takes exactly one teacher")
    elif baseline is None:
        # weights are checked before any checkpoint is read
        dist_config.check_weights(has_image=bool(image_teacher), has_video=bool(video_teacher))

    corpus = load_corpus(data)
    stats = _load_stats(data)
    inputs = {data: corpus_fingerprint(data)}
    loaded = {path: load_teacher(path, modality) for path, modality in teachers.items()}
    inputs.update({path: parameter_hash(model) for path, model in loaded.items()})
    init_encoder = load_checkpoint(init, modality="video") if init else None
    if init_encoder is not None:
        check_ema_init(init_encoder, student_config)
        inputs[init] = parameter_hash(init_encoder)  # type: ignore[index]
    args = {
        "data": data,
        "out": out,
        "image_teacher": image_teacher,
        "video_teacher": video_teacher,
        "baseline": baseline,
        "init": init,
        "cache_dir": cache_dir,
    }
    manifest = RunManifest.begin(
        manifest_path_for(out), f"distill/{baseline or 'mvd'}", config, {"root": dist_config.seed}, inputs, args=args
    )

    if baseline == "ema":
        student, log = ema_teacher_distill(student_config, corpus, dist_config, init=init_encoder, stats=stats)
    elif baseline == "per-token":
        (teacher,) = loaded.values()
        student, log = per_token_distill(
            student_config, teacher, corpus, dist_config, stats=stats, cache=TargetCache(CacheConfig(cache_dir))
        )
    else:
        bundle = TeacherBundle(
            image_teacher=loaded.get(image_teacher) if image_teacher else None,
            video_teacher=loaded.get(video_teacher) if video_teacher else None,
        )
        student, log = distill(student_config, bundle, corpus, dist_config, stats=stats, cache=TargetCache(CacheConfig(cache_dir)))
    for path, model in loaded.items():
        if parameter_hash(model) != inputs[path]:
            raise RuntimeError(f"teacher {path} changed during distillation")
    save_checkpoint(student, out)
    log_path = _write_log(log, out)
    manifest.finish({"checkpoint": out, "train_log": log_path})
    return out


def _task_sets(entry: str, data_root: str = DATA_ROOT) -> EvalTask:
    """``[name=]train_dir:val_dir``, or a bare task name read from ``<data_root>/<name>_train`` and ``_val``."""
    name, sep, dirs = entry.partition("=")
    if not sep:
        dirs, name = entry, ""
    train_dir, colon, val_dir = dirs.partition(":")
    if not colon:
        task = dirs.strip()
        if not task:
            raise ConfigError(f"task {entry!r} must be a task name or [name=]train_dir:val_dir")
        train_dir, val_dir = (os.path.join(data_root, f"{task}_{split}") for split in ("train", "val"))
        missing = [d for d in (train_dir, val_dir) if not os.path.isdir(d)]
        if missing:
            raise ConfigError(f"task {task!r} resolves to {train_dir}:{val_dir}, but {', '.join(missing)} does not exist")
        name = name or task
    name = name or os.path.basename(os.path.normpath(train_dir))
    return EvalTask(name=name, train=load_corpus(train_dir), val=load_corpus(val_dir), stats=_load_stats(train_dir))


def run_eval(
    config: RunConfig,
    *,
    models: list[str],
    tasks: list[str],
    out: str,
    similarity_data: str | None = None,
    data_root: str = DATA_ROOT,
    random_init: bool = False,
) -> str:
    """Finetune every model on every task. ``random_init`` adds an untrained student as a floor."""
    if not models and not random_init:
        raise ConfigError("--models lists no checkpoints")
    if not tasks:
        raise ConfigError("--tasks lists no task corpora")
    eval_tasks = [_task_sets(entry, data_root) for entry in tasks]
    students = []
    inputs: dict[str, str] = {}
    for entry in models:
        name, sep, path = entry.partition("=")
        if not sep:
            path, name = entry, os.path.basename(os.path.normpath(entry)).removesuffix(".ckpt")
        model = load_checkpoint(path, modality="video")
        students.append((name, model))
        inputs[path] = parameter_hash(model)
    ft_config = config.finetune_config()
    seeds = {"root": ft_config.seed}
    if random_init:
        # the weights every stage-2 student starts from
        seeds[RANDOM_INIT] = config.get("stage2", "seed")
        students.append((RANDOM_INIT, init_model(config.model_config("video"), derive_seed(seeds[RANDOM_INIT], "init"))))
    args = {
        "models": list(models),
        "tasks": list(tasks),
        "out": out,
        "similarity_data": similarity_data,
        "data_root": data_root,
        "random_init": random_init,
    }
    manifest = RunManifest.begin(manifest_path_for(out), "eval", config, seeds, inputs, args=args)
    sim_set = load_corpus(similarity_data) if similarity_data else None
    sim_stats = _load_stats(similarity_data) if similarity_data else None
    report = compare_report(students, eval_tasks, ft_config, similarity_set=sim_set, similarity_stats=sim_stats)
    report.to_csv(out)
    md_path = os.path.splitext(out)[0] + ".md"
    report.to_markdown(md_path)
    manifest.finish({"report": out, "summary": md_path})
    return out


def run_analyze(
    config: RunConfig,
    *,
    model: str,
    data: str,
    out: str,
    modality: str | None = None,
    frame_axis: bool = False,
    heatmap: str | None = None,
) -> float:
    encoder = load_checkpoint(model, modality=modality)
    corpus = load_corpus(data)
    manifest = RunManifest.begin(
        manifest_path_for(out),
        "analyze",
        config,
        {},
        {model: parameter_hash(encoder), data: corpus_fingerprint(data)},
        args={"model": model, "data": data, "out": out, "modality": modality, "frame_axis": frame_axis, "heatmap": heatmap},
    )
    matrix = aggregate_similarity(encoder, corpus, stats=_load_stats(data))
    summary = matrix.summary
    if frame_axis:
        matrix = matrix.expanded_to_frames()
    matrix.to_csv(out)
    outputs = {"similarity": out}
    if heatmap:
        render_heatmap(matrix, heatmap, title=f"{os.path.basename(model)}: {summary:.3f}")
        outputs["heatmap"] = heatmap
    logger.info("mean off-diagonal similarity %.6f over %d clips", summary, len(corpus))
    manifest.finish(outputs)
    return summary


def run_summarize(config: RunConfig, *, runs: str, out: str, strict: bool = False) -> str:
    """Aggregate the per-seed reports under ``runs``; with ``strict`` a check that does not hold is an error."""
    results = load_seed_results(runs, config.patch[0])
    inputs = {
        os.path.join(runs, f"seed{r.seed}", name): artifact_hash(os.path.join(runs, f"seed{r.seed}", name))
        for r in results
        for name in (REPORT_NAME, IMAGE_SIM_NAME, VIDEO_SIM_NAME)
        if os.path.exists(os.path.join(runs, f"seed{r.seed}", name))
    }
    manifest = RunManifest.begin(
        manifest_path_for(out),
        "summarize",
        config,
        {f"seed{r.seed}": r.seed for r in results},
        inputs,
        args={"runs": runs, "out": out, "strict": strict},
    )
    checks = run_checks(results)
    _, seeds_path, md_path = write_summary(results, checks, out)
    manifest.finish({"summary": out, "per_seed": seeds_path, "markdown": md_path})
    failed = [c.name for c in checks if not c.holds]
    if strict and failed:
        raise AnalysisError(f"checks that do not hold over {len(results)} seeds: {', '.join(failed)}")
    return out


RUNNERS: dict[str, Callable[..., Any]] = {
    "synth": run_synth,
    "pretrain": run_pretrain,
    "distill": run_distill,
    "eval": run_eval,
    "analyze": run_analyze,
    "summarize": run_summarize,
}


def read_manifest(path: str) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read run manifest ({exc})") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("command"), str):
        raise ConfigError(f"{path}: run manifest has no command")
    return payload


def replay_manifest(path: str, config: RunConfig, out: str | None = None) -> str:
    """Re-run the command a manifest records, with its config snapshot and arguments.

    ``out`` redirects the output; without it the original output is overwritten.
    """
    payload = read_manifest(path)
    command = payload["command"].split("/", 1)[0]
    if command not in RUNNERS:
        raise ConfigError(f"{path}: cannot replay command {payload['command']!r}")
    args = payload.get("args")
    if not isinstance(args, dict) or not args:
        raise ConfigError(f"{path}: run manifest records no command arguments")
    args = dict(args)
    if out:
        args["out"] = out
    logger.info("replaying %s from %s", payload["command"], path)
    RUNNERS[command](config, **args)
    return str(args["out"])
