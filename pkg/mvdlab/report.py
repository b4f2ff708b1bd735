from __future__ import annotations

import csv
import io
import os
from collections.abc import Iterable, Sequence
from typing import Any

import numpy as np

REPORT_HEADER = ["model", "task", "top1"]
MD_HEADERS = ["Model", "Task", "Top-1", "Best on task"]


def md_cell(value: Any) -> str:
    """One Markdown table cell: floats at six decimals, pipes escaped, single line."""
    if value is None:
        return ""
    if isinstance(value, float):
        return format_top1(value)
    return " ".join(str(value).split()).replace("|", "\\|")


def render_markdown_table(headers: Sequence[str], rows: Sequence[Sequence[Any]], numeric: Sequence[int] = ()) -> str:
    """Columns listed in ``numeric`` are right-aligned; short rows are padded with blanks."""
    width = len(headers)
    lines = [[md_cell(h) for h in headers], ["---:" if col in numeric else "---" for col in range(width)]]
    for row in rows:
        cells = [md_cell(v) for v in list(row)[:width]]
        lines.append(cells + [""] * (width - len(cells)))
    return "".join("| " + " | ".join(cells) + " |\n" for cells in lines)


def write_text(path: str, text: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def format_top1(value: float) -> str:
    return f"{value:.6f}"


def write_report_csv(rows: Sequence[tuple[str, str, float]], path: str) -> None:
    write_csv_rows(REPORT_HEADER, [[model, task, format_top1(top1)] for model, task, top1 in rows], path)


def write_csv_rows(header: Sequence[str], rows: Iterable[Sequence[Any]], path: str) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_text(path, buffer.getvalue())


def read_report_csv(path: str) -> list[tuple[str, str, float]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(REPORT_HEADER)}, got {header}")
        return [(row[0], row[1], float(row[2])) for row in reader if row]


def write_matrix_csv(values: np.ndarray, path: str) -> None:
    """Square grid, one row per frame index, fixed six decimals."""
    lines = [",".join(f"{float(v):.6f}" for v in row) for row in values]
    write_text(path, "\n".join(lines) + "\n")


def read_matrix_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        rows = [[float(v) for v in line.strip().split(",")] for line in f if line.strip()]
    return np.asarray(rows, dtype=np.float64)


def report_markdown(
    rows: Sequence[tuple[str, str, float]],
    best: dict[str, str],
    similarity: dict[str, float] | None = None,
) -> str:
    """Accuracy table with the per-task argmax flagged, plus a one-line verdict per task."""
    table_rows = [[model, task, float(top1), "**best**" if best.get(task) == model else ""] for model, task, top1 in rows]
    parts = ["# Evaluation report\n", render_markdown_table(MD_HEADERS, table_rows, numeric=(2,))]
    parts.append("\n## Per-task best\n")
    for task, model in best.items():
        top1 = next(t for m, k, t in rows if m == model and k == task)
        parts.append(f"- {md_cell(task)}: {md_cell(model)} ({format_top1(top1)})\n")
    if similarity:
        parts.append("\n## Cross-frame similarity (mean off-diagonal)\n\n")
        parts.append(render_markdown_table(["Model", "Similarity"], [[m, float(s)] for m, s in similarity.items()], numeric=(1,)))
    return "".join(parts)


def write_report_markdown(
    rows: Sequence[tuple[str, str, float]],
    best: dict[str, str],
    path: str,
    similarity: dict[str, float] | None = None,
) -> None:
    write_text(path, report_markdown(rows, best, similarity))
