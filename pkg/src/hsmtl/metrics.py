"""Accuracy computation, multi-seed aggregation and map rendering.

Overall accuracy tables report the sample mean and (R-1)-denominator standard
deviation over repeated runs, formatted in percent with two decimals.
Classification maps are written as binary P6 portable pixmaps, one image
pixel per scene pixel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    """Result of one evaluation run over the test split of one task."""
    task_id: str
    n_per_class: int
    seed: int
    overall_accuracy: float
    per_class_accuracy: list[float]
    confusion: np.ndarray  # K x K counts, rows = truth

    def __post_init__(self):
        total = self.confusion.sum()
        if total == 0:
            raise ValueError("empty confusion matrix")
        oa = np.trace(self.confusion) / total
        if abs(oa - self.overall_accuracy) > 1e-9:
            raise ValueError(
                f"overall_accuracy {self.overall_accuracy} inconsistent with "
                f"confusion trace ratio {oa}")


@dataclass
class AggregateReport:
    """Mean and sample std of overall accuracy across repeated runs."""
    task_id: str
    n_per_class: int
    mean_oa: float
    std_oa: float | None  # None when fewer than 2 runs
    run_count: int
    oas: list[float] = field(default_factory=list)


def overall_accuracy(pred: np.ndarray, truth: np.ndarray,
                     num_classes: int | None = None) -> tuple[float, np.ndarray]:
    """OA and the K x K confusion matrix (rows = truth) over test pixels.

    ``pred`` and ``truth`` hold 1-based class labels; zeros in ``truth``
    (unlabeled) are excluded.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    keep = truth > 0
    pred, truth = pred[keep], truth[keep]
    if truth.size == 0:
        raise ValueError("no labeled test pixels")
    k = int(num_classes if num_classes is not None else truth.max())
    if pred.min() < 1 or pred.max() > k:
        raise ValueError(f"predictions outside 1..{k}")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth - 1, pred - 1), 1)
    oa = float(np.trace(confusion) / confusion.sum())
    return oa, confusion


def per_class_accuracy(confusion: np.ndarray) -> list[float]:
    """Diagonal over row sums; rows without test pixels yield nan."""
    sums = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.diag(confusion) / sums
    return [float(a) if s > 0 else float("nan") for a, s in zip(acc, sums)]


def make_report(task_id: str, n_per_class: int, seed: int,
                pred: np.ndarray, truth: np.ndarray,
                num_classes: int | None = None) -> EvalReport:
    oa, confusion = overall_accuracy(pred, truth, num_classes)
    return EvalReport(task_id, n_per_class, seed, oa,
                      per_class_accuracy(confusion), confusion)


def aggregate_runs(reports: list[EvalReport]) -> AggregateReport:
    """Mean and sample standard deviation of the runs' overall accuracies."""
    if not reports:
        raise ValueError("no reports to aggregate")
    task_ids = {r.task_id for r in reports}
    ns = {r.n_per_class for r in reports}
    if len(task_ids) > 1 or len(ns) > 1:
        raise ValueError(
            f"cannot aggregate across tasks/sample-sizes: tasks={task_ids}, n={ns}")
    oas = [r.overall_accuracy for r in reports]
    mean = float(np.mean(oas))
    std = float(np.std(oas, ddof=1)) if len(oas) >= 2 else None
    return AggregateReport(reports[0].task_id, reports[0].n_per_class,
                           mean, std, len(oas), oas)


def format_percent(agg: AggregateReport) -> str:
    """Table cell text, e.g. "75.11±3.22"; bare mean when std is unavailable."""
    if agg.std_oa is None:
        return f"{100.0 * agg.mean_oa:.2f}"
    return f"{100.0 * agg.mean_oa:.2f}±{100.0 * agg.std_oa:.2f}"


def emit_table(cells: dict[tuple[int, str], AggregateReport], path: str) -> list[str]:
    """Write the OA table: one row per n_per_class, one column per method.

    Column order is the sorted set of method labels; returns the header row.
    """
    methods = sorted({method for _, method in cells})
    ns = sorted({n for n, _ in cells})
    header = ["n_per_class"] + methods
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for n in ns:
            row = [str(n)]
            for method in methods:
                agg = cells.get((n, method))
                row.append(format_percent(agg) if agg else "")
            writer.writerow(row)
    return header


def write_report_csv(report: EvalReport, path: str) -> None:
    """Tidy per-run report: one metric per row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "i", "j", "value"])
        writer.writerow(["overall_accuracy", "", "", f"{report.overall_accuracy:.6f}"])
        for i, acc in enumerate(report.per_class_accuracy, start=1):
            writer.writerow(["class_accuracy", i, "", f"{acc:.6f}"])
        k = report.confusion.shape[0]
        for i in range(k):
            for j in range(k):
                writer.writerow(["confusion", i + 1, j + 1, int(report.confusion[i, j])])


# ---------------------------------------------------------------------------
# palettes and maps
# ---------------------------------------------------------------------------

def default_palette(num_classes: int) -> dict[int, tuple[int, int, int]]:
    """Black for unlabeled plus visually distinct colors for classes 1..K."""
    base = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
            (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
            (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
            (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
            (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128)]
    palette = {0: (0, 0, 0)}
    for cls in range(1, num_classes + 1):
        r, g, b = base[(cls - 1) % len(base)]
        # repeat cycles get progressively darker so large K stays distinguishable
        shade = 1.0 / (1 + (cls - 1) // len(base))
        palette[cls] = (int(r * shade), int(g * shade), int(b * shade))
    return palette


def read_palette(path: str) -> dict[int, tuple[int, int, int]]:
    """Palette file: one ``class,r,g,b`` line per class."""
    palette = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cls, r, g, b = (int(x) for x in line.split(","))
            palette[cls] = (r, g, b)
    return palette


def write_palette(palette: dict[int, tuple[int, int, int]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cls in sorted(palette):
            r, g, b = palette[cls]
            fh.write(f"{cls},{r},{g},{b}\n")


def render_map(raster: np.ndarray, palette: dict[int, tuple[int, int, int]],
               path: str) -> None:
    """Write a class raster as a binary P6 pixmap, one pixel per scene pixel."""
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"raster must be H x W, got shape {raster.shape}")
    present = np.unique(raster)
    missing = [int(c) for c in present if int(c) not in palette]
    if missing:
        raise ValueError(f"palette has no entry for classes {missing}")
    lut = np.zeros((int(present.max()) + 1, 3), dtype=np.uint8)
    for cls, rgb in palette.items():
        if cls <= present.max():
            lut[cls] = rgb
    img = lut[raster]
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
