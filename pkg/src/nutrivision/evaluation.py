"""Per-task and combined MAE over a split, and comparison-table rendering.

The combined metric is the plain sum of the five per-task MAEs. Per-task
MAE is computed in one pass over the whole split (sample-weighted), never
as an average of batch averages, so the result does not depend on batch
size. Accumulation order is fixed, keeping results identical across worker
counts.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .dataio import NUM_TASKS, DatasetManifest, array_batches, batches
from .model import NutritionModel
from .validation import check_image_batch, check_target_batch

TABLE_COLUMNS = (
    "Calorie (kcal)",
    "Mass (g)",
    "Protein (g)",
    "Fat (g)",
    "Carb (g)",
    "Combined",
)


def combined_mae(per_task: Sequence[float]) -> float:
    """Sum of per-task MAEs; every component must be finite and >= 0."""
    per_task = tuple(float(v) for v in per_task)
    if len(per_task) != NUM_TASKS:
        raise ValueError(f"expected {NUM_TASKS} per-task values, got {len(per_task)}")
    for value in per_task:
        if not math.isfinite(value):
            raise ValueError(f"per-task MAE must be finite, got {value!r}")
        if value < 0:
            raise ValueError(f"per-task MAE must be non-negative, got {value!r}")
    return float(sum(per_task))


@dataclass(frozen=True)
class EvalReport:
    """One model's MAE per task plus the combined sum over one split."""

    model_label: str
    per_task_mae: tuple[float, float, float, float, float]
    combined_mae: float
    sample_count: int

    def __post_init__(self):
        object.__setattr__(self, "per_task_mae", tuple(float(v) for v in self.per_task_mae))
        expected = combined_mae(self.per_task_mae)
        if not np.isclose(self.combined_mae, expected, rtol=1e-9, atol=0.0):
            raise ValueError(
                f"combined_mae {self.combined_mae!r} != sum of per-task values {expected!r}"
            )
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")

    def as_dict(self) -> dict:
        from .dataio import TASKS

        return {
            "model_label": self.model_label,
            "per_task_mae": dict(zip(TASKS, self.per_task_mae)),
            "combined_mae": self.combined_mae,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        from .dataio import TASKS

        return cls(
            model_label=str(data["model_label"]),
            per_task_mae=tuple(float(data["per_task_mae"][t]) for t in TASKS),
            combined_mae=float(data["combined_mae"]),
            sample_count=int(data["sample_count"]),
        )


def _accumulate(model: NutritionModel, batch_iter) -> tuple[np.ndarray, int]:
    error_sums = np.zeros(NUM_TASKS, dtype=np.float64)
    count = 0
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for batch in batch_iter:
                preds = model(torch.from_numpy(batch.images)).numpy()
                error_sums += np.abs(batch.targets - preds).sum(axis=0)
                count += len(batch)
    finally:
        model.train(was_training)
    return error_sums, count


def _report(label: str | None, error_sums: np.ndarray, count: int) -> EvalReport:
    per_task = tuple(float(v) for v in error_sums / count)
    return EvalReport(
        model_label=label if label is not None else "model",
        per_task_mae=per_task,
        combined_mae=combined_mae(per_task),
        sample_count=count,
    )


def evaluate(
    model: NutritionModel,
    manifest: DatasetManifest,
    split: str | None,
    *,
    batch_size: int = 32,
    resolution: int | None = None,
    workers: int = 0,
    label: str | None = None,
) -> EvalReport:
    """One-pass MAE report over a split; raises on an empty split."""
    resolution = model.input_resolution if resolution is None else resolution
    batch_iter = batches(
        manifest, split, batch_size, shuffle=False, resolution=resolution, workers=workers
    )
    error_sums, count = _accumulate(model, batch_iter)
    return _report(label, error_sums, count)


def evaluate_arrays(
    model: NutritionModel,
    images: np.ndarray,
    targets: np.ndarray,
    *,
    batch_size: int = 32,
    label: str | None = None,
) -> EvalReport:
    """Like ``evaluate`` but over in-memory arrays (N, 3, R, R) / (N, 5)."""
    images = check_image_batch(images, model.input_resolution)
    targets = check_target_batch(targets, images.shape[0])
    error_sums, count = _accumulate(model, array_batches(images, targets, batch_size))
    return _report(label, error_sums, count)


@dataclass(frozen=True)
class ComparisonTable:
    """Reports in presentation order plus, per column, the rows that attain
    the column minimum (all of them, under ties)."""

    reports: tuple[EvalReport, ...]
    best_rows: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.reports:
            raise ValueError("a comparison table needs at least one report")
        if len(self.best_rows) != len(TABLE_COLUMNS):
            raise ValueError(f"expected {len(TABLE_COLUMNS)} marker columns")
        values = _table_values(self.reports)
        for col, rows in enumerate(self.best_rows):
            minimum = values[:, col].min()
            true_best = {int(r) for r in np.nonzero(values[:, col] == minimum)[0]}
            if set(rows) != true_best:
                raise ValueError(
                    f"best markers for column {TABLE_COLUMNS[col]!r} are {sorted(rows)}, "
                    f"but the column minima sit at rows {sorted(true_best)}"
                )


def _table_values(reports: Sequence[EvalReport]) -> np.ndarray:
    return np.array(
        [list(r.per_task_mae) + [r.combined_mae] for r in reports], dtype=np.float64
    )


def comparison_table(reports: Sequence[EvalReport]) -> ComparisonTable:
    reports = tuple(reports)
    if not reports:
        raise ValueError("a comparison table needs at least one report")
    values = _table_values(reports)
    best = tuple(
        tuple(int(r) for r in np.nonzero(values[:, col] == values[:, col].min())[0])
        for col in range(values.shape[1])
    )
    return ComparisonTable(reports=reports, best_rows=best)


def render_table(reports: Sequence[EvalReport], format: str = "text") -> str:
    """Render reports as a fixed-column comparison table.

    ``text`` and ``markdown`` print one decimal place and mark per-column
    minima (``*`` suffix, respectively bold). ``csv`` carries full-precision
    values and no markers so it round-trips numerically.
    """
    table = comparison_table(reports)
    values = _table_values(table.reports)
    if format == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(("Model",) + TABLE_COLUMNS)
        for report, row in zip(table.reports, values):
            writer.writerow([report.model_label] + [repr(float(v)) for v in row])
        return out.getvalue()

    marked = [
        [
            (f"{values[i, col]:.1f}", i in table.best_rows[col])
            for col in range(len(TABLE_COLUMNS))
        ]
        for i in range(len(table.reports))
    ]
    if format == "markdown":
        lines = ["| Model | " + " | ".join(TABLE_COLUMNS) + " |"]
        lines.append("| --- |" + " ---: |" * len(TABLE_COLUMNS))
        for report, cells in zip(table.reports, marked):
            rendered = [f"**{text}**" if best else text for text, best in cells]
            lines.append("| " + " | ".join([report.model_label] + rendered) + " |")
        return "\n".join(lines) + "\n"
    if format == "text":
        rows = [
            [report.model_label] + [text + ("*" if best else "") for text, best in cells]
            for report, cells in zip(table.reports, marked)
        ]
        headers = ["Model"] + list(TABLE_COLUMNS)
        widths = [
            max(len(headers[c]), *(len(row[c]) for row in rows)) for c in range(len(headers))
        ]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
        for row in rows:
            cells = [row[0].ljust(widths[0])] + [
                cell.rjust(w) for cell, w in zip(row[1:], widths[1:])
            ]
            lines.append("  ".join(cells).rstrip())
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {format!r}, expected text, csv, or markdown")


def improvement_percent(baseline: float, candidate: float) -> float:
    """Relative reduction of ``candidate`` versus ``baseline``, in percent."""
    baseline = float(baseline)
    candidate = float(candidate)
    if not math.isfinite(baseline) or baseline <= 0:
        raise ValueError(f"baseline must be finite and > 0, got {baseline!r}")
    if not math.isfinite(candidate):
        raise ValueError(f"candidate must be finite, got {candidate!r}")
    return 100.0 * (baseline - candidate) / baseline
