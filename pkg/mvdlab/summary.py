"""Cross-seed checks of the directional results a full run should reproduce.

Each seed directory (``seed<k>/``) holds the eval report ``report.csv`` and the
two teacher similarity grids ``sim_image.csv`` and ``sim_video.csv`` on the
frame axis. A check passes on a seed or fails; it holds when enough seeds pass.
"""
from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import AnalysisError, ConfigError
from .report import read_matrix_csv, read_report_csv, render_markdown_table, write_csv_rows, write_text

logger = logging.getLogger(__name__)

REPORT_NAME = "report.csv"
IMAGE_SIM_NAME = "sim_image.csv"
VIDEO_SIM_NAME = "sim_video.csv"
SEED_DIR = re.compile(r"^seed(\d+)$")

IMAGE_STUDENT = "img"
VIDEO_STUDENT = "vid"
COTEACHING_STUDENT = "mvd"
PER_TOKEN_STUDENT = "per_token"
RANDOM_INIT = "random"
SPATIAL_TASK = "spatial"
TEMPORAL_TASK = "temporal"

COTEACHING_TOLERANCE = 0.01
RANDOM_MARGIN = 0.10
STRICT_FRACTION = 0.8

SUMMARY_HEADER = ["check", "seeds_passed", "seeds", "required", "holds"]
SEED_HEADER = ["seed", "check", "passed"]


def cross_slice_similarity(values: np.ndarray, pt: int) -> float:
    """Mean similarity over frame pairs in different ``pt``-frame slices.

    Pairs inside one tubelet are skipped, so an image grid and a video grid
    repeated onto the frame axis are compared over the same pairs.
    """
    n = values.shape[0]
    if pt < 1 or n % pt:
        raise AnalysisError(f"a {n}-frame grid does not split into slices of {pt}")
    slices = np.arange(n) // pt
    across = slices[:, None] != slices[None, :]
    if not across.any():
        raise AnalysisError("the grid holds a single slice; nothing to compare")
    return float(values[across].mean())


@dataclass(frozen=True)
class SeedResult:
    seed: int
    rows: list[tuple[str, str, float]]
    image_similarity: float | None = None
    video_similarity: float | None = None

    def top1(self, model: str, task: str) -> float:
        for m, t, value in self.rows:
            if m == model and t == task:
                return value
        raise ConfigError(f"seed {self.seed}: report has no {model}/{task} row")


def frames_less_similar(result: SeedResult) -> bool:
    """The video teacher separates frames more than the image teacher does."""
    if result.image_similarity is None or result.video_similarity is None:
        raise ConfigError(f"seed {result.seed}: both teacher similarity grids are needed")
    return result.video_similarity < result.image_similarity


def coteaching_ordering(result: SeedResult, tolerance: float = COTEACHING_TOLERANCE) -> bool:
    """Image-taught student wins spatial, video-taught wins temporal, co-teaching is never far behind."""
    top = {(m, t): v for m, t, v in result.rows}
    for key in ((m, t) for m in (IMAGE_STUDENT, VIDEO_STUDENT, COTEACHING_STUDENT) for t in (SPATIAL_TASK, TEMPORAL_TASK)):
        if key not in top:
            raise ConfigError(f"seed {result.seed}: report has no {key[0]}/{key[1]} row")
    if top[(IMAGE_STUDENT, SPATIAL_TASK)] <= top[(VIDEO_STUDENT, SPATIAL_TASK)]:
        return False
    if top[(VIDEO_STUDENT, TEMPORAL_TASK)] <= top[(IMAGE_STUDENT, TEMPORAL_TASK)]:
        return False
    return all(
        top[(COTEACHING_STUDENT, task)] >= max(top[(IMAGE_STUDENT, task)], top[(VIDEO_STUDENT, task)]) - tolerance
        for task in (SPATIAL_TASK, TEMPORAL_TASK)
    )


def beats_random(result: SeedResult, margin: float = RANDOM_MARGIN) -> bool:
    """Mean top-1 over tasks of the co-taught student beats a random encoder by more than ``margin``."""
    tasks = sorted({t for m, t, _ in result.rows if m == RANDOM_INIT})
    if not tasks:
        raise ConfigError(f"seed {result.seed}: report has no {RANDOM_INIT!r} rows")
    student = np.mean([result.top1(COTEACHING_STUDENT, t) for t in tasks])
    baseline = np.mean([result.top1(RANDOM_INIT, t) for t in tasks])
    return bool(student - baseline > margin)


@dataclass
class Check:
    name: str
    required: int
    passed: dict[int, bool] = field(default_factory=dict)

    @property
    def seeds_passed(self) -> int:
        return sum(self.passed.values())

    @property
    def holds(self) -> bool:
        return self.seeds_passed >= self.required


CHECKS = (
    ("video teacher frames less similar", frames_less_similar, "strict"),
    ("co-teaching ordering", coteaching_ordering, "strict"),
    ("distilled student beats random init", beats_random, "majority"),
)


def required_seeds(n: int, rule: str) -> int:
    return math.ceil(STRICT_FRACTION * n) if rule == "strict" else n // 2 + 1


def run_checks(results: list[SeedResult]) -> list[Check]:
    if not results:
        raise ConfigError("no seed results to summarize")
    checks = []
    for name, fn, rule in CHECKS:
        check = Check(name, required_seeds(len(results), rule))
        for result in results:
            check.passed[result.seed] = fn(result)
        checks.append(check)
    return checks


def per_token_table(results: list[SeedResult]) -> tuple[list[str], list[list[object]]]:
    """Per-token baseline against co-teaching, mean top-1 per task over seeds."""
    tasks = sorted({t for r in results for m, t, _ in r.rows if m == COTEACHING_STUDENT})
    rows = []
    for model in (PER_TOKEN_STUDENT, COTEACHING_STUDENT):
        rows.append([model, *(float(np.mean([r.top1(model, t) for r in results])) for t in tasks)])
    return ["Model", *tasks], rows


def load_seed_results(runs: str, pt: int) -> list[SeedResult]:
    if not os.path.isdir(runs):
        raise ConfigError(f"runs directory {runs} does not exist")
    results = []
    for name in sorted(os.listdir(runs), key=lambda n: (len(n), n)):
        match = SEED_DIR.match(name)
        if not match or not os.path.isdir(os.path.join(runs, name)):
            continue
        seed_dir = os.path.join(runs, name)
        report = os.path.join(seed_dir, REPORT_NAME)
        if not os.path.exists(report):
            raise ConfigError(f"{seed_dir} has no {REPORT_NAME}")
        sims = []
        for sim_name in (IMAGE_SIM_NAME, VIDEO_SIM_NAME):
            path = os.path.join(seed_dir, sim_name)
            sims.append(cross_slice_similarity(read_matrix_csv(path), pt) if os.path.exists(path) else None)
        results.append(SeedResult(int(match.group(1)), read_report_csv(report), *sims))
    if not results:
        raise ConfigError(f"{runs} holds no seed<k> directories")
    return results


def summary_markdown(results: list[SeedResult], checks: list[Check]) -> str:
    seeds = [r.seed for r in results]
    parts = [f"# Summary over seeds {', '.join(map(str, seeds))}\n\n"]
    rows = [[c.name, f"{c.seeds_passed}/{len(seeds)}", c.required, "yes" if c.holds else "**no**"] for c in checks]
    parts.append(render_markdown_table(["Check", "Seeds passed", "Required", "Holds"], rows))
    parts.append("\n## Per seed\n\n")
    seed_rows = [[r.seed, *("pass" if c.passed[r.seed] else "fail" for c in checks)] for r in results]
    parts.append(render_markdown_table(["Seed", *(c.name for c in checks)], seed_rows))
    parts.append("\n## Teacher similarity across slices\n\n")
    sim_rows = [[r.seed, r.image_similarity, r.video_similarity] for r in results]
    parts.append(render_markdown_table(["Seed", "Image teacher", "Video teacher"], sim_rows, numeric=(1, 2)))
    if all(any(m == PER_TOKEN_STUDENT for m, _, _ in r.rows) for r in results):
        headers, table = per_token_table(results)
        parts.append("\n## Per-token distillation against co-teaching (mean top-1)\n\n")
        parts.append(render_markdown_table(headers, table, numeric=tuple(range(1, len(headers)))))
    return "".join(parts)


def write_summary(results: list[SeedResult], checks: list[Check], out: str) -> tuple[str, str, str]:
    """``out`` gets one row per check; ``*_seeds.csv`` one row per seed and check; ``*.md`` the tables."""
    stem = os.path.splitext(out)[0]
    write_csv_rows(
        SUMMARY_HEADER,
        [[c.name, c.seeds_passed, len(results), c.required, "true" if c.holds else "false"] for c in checks],
        out,
    )
    seeds_path = f"{stem}_seeds.csv"
    write_csv_rows(
        SEED_HEADER,
        [[r.seed, c.name, "true" if c.passed[r.seed] else "false"] for r in results for c in checks],
        seeds_path,
    )
    md_path = f"{stem}.md"
    write_text(md_path, summary_markdown(results, checks))
    for check in checks:
        log = logger.info if check.holds else logger.warning
        log("%s: %d/%d seeds (need %d)", check.name, check.seeds_passed, len(results), check.required)
    return out, seeds_path, md_path
