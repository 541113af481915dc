"""Analysis artifacts: confusion heatmaps and expert-assignment breakdowns.

Everything is emitted twice: full-precision CSV for downstream tooling and a
self-contained SVG for eyes. SVG output is a pure function of its inputs so
identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_mutual_info_score

from .errors import ShapeError

logger = logging.getLogger(__name__)

# single-hue ramp endpoints, white to dark blue
_RAMP_LO = (255, 255, 255)
_RAMP_HI = (8, 48, 107)


@dataclass
class ExpertAssignmentTable:
    class_names: list
    num_experts: int
    matrix: np.ndarray  # [num classes, num experts], rows sum to 1
    per_source: dict  # source_id -> (label, np int histogram over experts)


def assignment_table(assignments, class_names, num_experts) -> ExpertAssignmentTable:
    """Fold per-segment chosen-expert records into class and source tables."""
    counts = np.zeros((len(class_names), num_experts), dtype=np.float64)
    idx = {name: i for i, name in enumerate(class_names)}
    per_source: dict = {}
    for rec in assignments:
        counts[idx[rec.label], rec.expert] += 1
        label, hist = per_source.setdefault(
            rec.source_id, (rec.label, np.zeros(num_experts, dtype=np.int64)))
        hist[rec.expert] += 1
    matrix = _row_normalize(counts, [f"class {n!r}" for n in class_names])
    return ExpertAssignmentTable(list(class_names), num_experts, matrix, per_source)


def _row_normalize(counts: np.ndarray, row_desc) -> np.ndarray:
    out = np.zeros_like(counts, dtype=np.float64)
    for i, row in enumerate(counts):
        s = row.sum()
        if s == 0:
            logger.warning("%s has no samples; emitting a zero row", row_desc[i])
        else:
            out[i] = row / s
    return out


def _color(t: float) -> str:
    t = min(1.0, max(0.0, t))
    r, g, b = (round(lo + t * (hi - lo)) for lo, hi in zip(_RAMP_LO, _RAMP_HI))
    return f"#{r:02x}{g:02x}{b:02x}"


def _heatmap_svg(values: np.ndarray, row_labels, col_labels, x_title, y_title) -> str:
    cell, left, top, bottom = 46, 130, 40, 96
    rows, cols = values.shape
    width, height = left + cols * cell + 20, top + rows * cell + bottom
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i in range(rows):
        for j in range(cols):
            v = float(values[i, j])
            x, y = left + j * cell, top + i * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{_color(v)}" stroke="#cccccc" stroke-width="1"/>')
            ink = "#ffffff" if v > 0.6 else "#1a1a1a"
            parts.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" '
                         f'text-anchor="middle" font-size="12" fill="{ink}">{v:.2f}</text>')
    for i, name in enumerate(row_labels):
        y = top + i * cell + cell // 2 + 4
        parts.append(f'<text x="{left - 8}" y="{y}" text-anchor="end" '
                     f'font-size="12" fill="#1a1a1a">{_esc(name)}</text>')
    for j, name in enumerate(col_labels):
        x, y = left + j * cell + cell // 2, top + rows * cell + 14
        parts.append(f'<text x="{x}" y="{y}" text-anchor="end" font-size="12" '
                     f'fill="#1a1a1a" transform="rotate(-40 {x} {y})">{_esc(name)}</text>')
    parts.append(f'<text x="{left + cols * cell // 2}" y="{height - 10}" '
                 f'text-anchor="middle" font-size="13" fill="#1a1a1a">{_esc(x_title)}</text>')
    parts.append(f'<text x="16" y="{top + rows * cell // 2}" text-anchor="middle" '
                 f'font-size="13" fill="#1a1a1a" '
                 f'transform="rotate(-90 16 {top + rows * cell // 2})">{_esc(y_title)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def confusion_heatmap(counts: np.ndarray, class_names, out_dir) -> tuple[Path, Path]:
    """Row-normalized confusion matrix as confusion.csv and confusion.svg.

    Rows are the actual class, columns the predicted class.
    """
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {counts.shape}")
    if counts.shape[0] != len(class_names):
        raise ShapeError(f"{len(class_names)} class names for a {counts.shape} matrix")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    norm = _row_normalize(counts.astype(np.float64), [f"class {n!r}" for n in class_names])
    csv_path = out_dir / "confusion.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["actual"] + list(class_names))
        for name, row in zip(class_names, norm):
            w.writerow([name] + [repr(float(v)) for v in row])
    svg_path = out_dir / "confusion.svg"
    svg_path.write_text(_heatmap_svg(norm, class_names, class_names,
                                     "predicted class", "actual class"))
    return csv_path, svg_path


def expert_heatmap(table: ExpertAssignmentTable, out_dir) -> tuple[Path, Path, Path]:
    """Class-by-expert proportions plus the per-source histogram breakdown.

    Writes experts_by_class.csv, experts_by_source.csv, and experts.svg.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    expert_names = [f"expert_{j}" for j in range(table.num_experts)]
    by_class = out_dir / "experts_by_class.csv"
    with open(by_class, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + expert_names)
        for name, row in zip(table.class_names, table.matrix):
            w.writerow([name] + [repr(float(v)) for v in row])
    by_source = out_dir / "experts_by_source.csv"
    with open(by_source, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "label", "n_segments"] + expert_names)
        for sid in sorted(table.per_source):
            label, hist = table.per_source[sid]
            w.writerow([sid, label, int(hist.sum())] + [int(c) for c in hist])
    svg_path = out_dir / "experts.svg"
    svg_path.write_text(_heatmap_svg(table.matrix, table.class_names, expert_names,
                                     "expert", "actual class"))
    return by_class, by_source, svg_path


def specialization_score(assignments, latent_modes: dict) -> float:
    """Adjusted mutual information between chosen experts and latent modes.

    Chance-adjusted, so unrelated partitions score near 0. A single cluster
    on either side scores 0 by convention (nothing was separated).
    """
    experts, modes = [], []
    for rec in assignments:
        if rec.source_id in latent_modes:
            experts.append(rec.expert)
            modes.append(latent_modes[rec.source_id])
    if not experts:
        raise ShapeError("no assignment record matches the latent-mode sidecar")
    if len(set(experts)) < 2 or len(set(modes)) < 2:
        return 0.0
    return float(adjusted_mutual_info_score(modes, experts))
