"""Dice scoring, signed-rank testing, label-swap analysis, report output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Sample
from .model import FilmUNet, one_hot_batch

PREDICTION_THRESHOLD = 0.5


def binarize_prediction(pred: np.ndarray, threshold: float = PREDICTION_THRESHOLD) -> np.ndarray:
    return (np.asarray(pred) > threshold).astype(np.float64)


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty, 0.0 when one is."""
    p = np.asarray(pred_mask)
    g = np.asarray(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"dice_score: shapes {p.shape} and {g.shape} differ")
    for name, arr in (("pred_mask", p), ("gt_mask", g)):
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError(f"dice_score: {name} is not binary")
    psum, gsum = float(p.sum()), float(g.sum())
    if psum == 0.0 and gsum == 0.0:
        return 1.0
    return 2.0 * float((p * g).sum()) / (psum + gsum)


def aggregate(scores) -> tuple[float, float | None]:
    """Mean and sample standard deviation (n-1); std absent for n < 2."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregate: no scores")
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, None
    return mean, float(arr.std(ddof=1))


# ---------------------------------------------------------------------------
# One-sided Wilcoxon signed-rank test


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    n: int            # pairs remaining after zero-difference removal
    statistic: float  # W-: rank sum of negative differences
    degenerate: bool  # all differences were zero


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    i = 0
    sorted_vals = values[order]
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_one_sided(x, y, exact_max_n: int = 20) -> WilcoxonResult:
    """Paired one-sided signed-rank test, alternative median(x - y) > 0.

    Zero differences are dropped and tied absolute differences share averaged
    ranks. Up to ``exact_max_n`` remaining pairs the p-value enumerates all
    sign assignments exactly; beyond that a normal approximation with
    continuity and tie corrections is used. All-zero differences yield the
    degenerate p = 1.0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"wilcoxon_one_sided: need equal-length vectors, got {x.shape} and {y.shape}")
    d = x - y
    d = d[d != 0.0]
    n = int(d.size)
    if n == 0:
        return WilcoxonResult(1.0, 0, 0.0, True)
    ranks = _average_ranks(np.abs(d))
    w_minus = float(ranks[d < 0.0].sum())
    if n <= exact_max_n:
        sums = np.zeros(1)
        for r in ranks:
            sums = np.concatenate([sums, sums + r])
        p = float(np.count_nonzero(sums <= w_minus + 1e-9) / sums.size)
        return WilcoxonResult(p, n, w_minus, False)
    mu = n * (n + 1) / 4.0
    counts = np.unique(ranks, return_counts=True)[1]
    tie_term = float(np.sum(counts ** 3 - counts)) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z = (w_minus - mu + 0.5) / sigma
    p = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    return WilcoxonResult(p, n, w_minus, False)


# ---------------------------------------------------------------------------
# Model scoring


def per_sample_dice(model: FilmUNet, samples: list[Sample], input_class: int | None = None,
                    threshold: float = PREDICTION_THRESHOLD, chunk: int = 16) -> list[float]:
    """Thresholded test Dice per sample.

    ``input_class`` overrides the conditioning label for every sample (the
    label-swap probe); None uses each sample's own class.
    """
    scores = []
    n_classes = model.config.n_metadata_classes
    with T.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            labels = [s.class_id if input_class is None else input_class for s in part]
            md = one_hot_batch(labels, n_classes)
            pred = model.forward(T.Tensor(np.stack([s.image for s in part])), md).data
            for j, s in enumerate(part):
                scores.append(dice_score(binarize_prediction(pred[j], threshold), s.mask))
    return scores


def label_swap_matrix(model: FilmUNet, test_samples: list[Sample], n_classes: int) -> np.ndarray:
    """Mean Dice, rows = true label, columns = conditioning label fed in.

    Rows for classes absent from the test set are NaN (flagged absent).
    """
    matrix = np.full((n_classes, n_classes), np.nan)
    true_classes = np.asarray([s.class_id for s in test_samples])
    for c in range(n_classes):
        scores = np.asarray(per_sample_dice(model, test_samples, input_class=c))
        for t in range(n_classes):
            sel = true_classes == t
            if sel.any():
                matrix[t, c] = float(scores[sel].mean())
    return matrix


# ---------------------------------------------------------------------------
# Experiment report


@dataclass
class ExperimentReport:
    experiment: str
    class_names: tuple[str, ...]
    rows: list[tuple[str, str, int, float]] = field(default_factory=list)  # arm, group, repetition, dice
    reference_arm: str = ""
    p_values: dict[tuple[str, str], float] = field(default_factory=dict)
    swap_matrices: list[np.ndarray] = field(default_factory=list)

    def arms(self) -> list[str]:
        seen = []
        for arm, _, _, _ in self.rows:
            if arm not in seen:
                seen.append(arm)
        return seen

    def groups(self) -> list[str]:
        seen = []
        for _, group, _, _ in self.rows:
            if group not in seen:
                seen.append(group)
        return seen

    def scores(self, arm: str, group: str) -> list[float]:
        by_rep = [(rep, dice) for a, g, rep, dice in self.rows if a == arm and g == group]
        return [dice for _, dice in sorted(by_rep)]

    def mean(self, arm: str, group: str) -> float:
        return aggregate(self.scores(arm, group))[0]

    def mean_swap_matrix(self) -> np.ndarray:
        if not self.swap_matrices:
            raise ValueError("report holds no swap matrices")
        return np.mean(np.stack(self.swap_matrices), axis=0)


def write_results_csv(report: ExperimentReport, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "class", "repetition", "dice"])
        for arm, group, rep, dice in report.rows:
            writer.writerow([arm, group, rep, repr(float(dice))])


def read_results_csv(path) -> list[tuple[str, str, int, float]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [(r["arm"], r["class"], int(r["repetition"]), float(r["dice"])) for r in reader]


def write_summary_csv(report: ExperimentReport, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "class", "mean", "std", "p_value"])
        for arm in report.arms():
            for group in report.groups():
                scores = report.scores(arm, group)
                if not scores:
                    continue
                mean, std = aggregate(scores)
                p = report.p_values.get((arm, group))
                writer.writerow([
                    arm, group, repr(mean),
                    "" if std is None else repr(std),
                    "" if p is None else repr(float(p)),
                ])


def write_swap_matrix_csv(report: ExperimentReport, path):
    matrix = report.mean_swap_matrix()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true_label"] + [f"input_{c}" for c in report.class_names])
        for t, name in enumerate(report.class_names):
            writer.writerow([name] + [repr(float(v)) for v in matrix[t]])


# --- hand-rolled SVG ---------------------------------------------------------

_SVG_W, _SVG_H = 640, 400
_MARGIN_L, _MARGIN_B, _MARGIN_T = 60, 50, 30


def _svg_document(body: list[str]) -> str:
    return (
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_SVG_W}" height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def _axes(title: str) -> list[str]:
    x0, y0, y1 = _MARGIN_L, _SVG_H - _MARGIN_B, _MARGIN_T
    parts = [
        f'<text x="{_SVG_W // 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{_SVG_W - 20}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y0 - frac * (y0 - y1)
        parts.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{frac:.2f}</text>')
    return parts


_ARM_COLORS = ("#c0392b", "#2e6da4", "#5a9e5a", "#8e6bab", "#b08c3f")


def write_bars_svg(report: ExperimentReport, path):
    """Grouped bars (one per arm within each group) with ±std whiskers."""
    arms, groups = report.arms(), report.groups()
    x0, y0, y1 = _MARGIN_L, _SVG_H - _MARGIN_B, _MARGIN_T
    span = _SVG_W - 20 - x0
    group_w = span / max(len(groups), 1)
    bar_w = 0.8 * group_w / max(len(arms), 1)
    body = _axes(f"{report.experiment}: mean Dice by {'group'}")

    def ypos(v: float) -> float:
        return y0 - max(0.0, min(1.0, v)) * (y0 - y1)

    for gi, group in enumerate(groups):
        gx = x0 + gi * group_w + 0.1 * group_w
        body.append(
            f'<text x="{x0 + (gi + 0.5) * group_w:.1f}" y="{y0 + 18}" text-anchor="middle" '
            f'font-size="12">{group}</text>'
        )
        for ai, arm in enumerate(arms):
            scores = report.scores(arm, group)
            if not scores:
                continue
            mean, std = aggregate(scores)
            x = gx + ai * bar_w
            color = _ARM_COLORS[ai % len(_ARM_COLORS)]
            body.append(
                f'<rect x="{x:.1f}" y="{ypos(mean):.1f}" width="{bar_w * 0.9:.1f}" '
                f'height="{y0 - ypos(mean):.1f}" fill="{color}"><title>{arm}</title></rect>'
            )
            if std is not None:
                cx = x + bar_w * 0.45
                body.append(
                    f'<line x1="{cx:.1f}" y1="{ypos(mean - std):.1f}" x2="{cx:.1f}" '
                    f'y2="{ypos(mean + std):.1f}" stroke="black" stroke-width="1.5"/>'
                )
    for ai, arm in enumerate(arms):
        color = _ARM_COLORS[ai % len(_ARM_COLORS)]
        body.append(f'<rect x="{x0 + 10 + ai * 130}" y="{y1 - 18}" width="12" height="12" fill="{color}"/>')
        body.append(f'<text x="{x0 + 26 + ai * 130}" y="{y1 - 7}" font-size="12">{arm}</text>')
    Path(path).write_text(_svg_document(body))


def write_curves_svg(report: ExperimentReport, path):
    """Per-arm mean Dice across groups (numeric groups) or repetitions."""
    arms, groups = report.arms(), report.groups()
    numeric = all(g.isdigit() for g in groups)
    x0, y0, y1 = _MARGIN_L, _SVG_H - _MARGIN_B, _MARGIN_T
    span = _SVG_W - 20 - x0
    body = _axes(f"{report.experiment}: Dice {'vs group size' if numeric else 'per repetition'}")

    def ypos(v: float) -> float:
        return y0 - max(0.0, min(1.0, v)) * (y0 - y1)

    if numeric:
        xs = [int(g) for g in groups]
        xmin, xmax = min(xs), max(xs)
        xr = max(xmax - xmin, 1)
        for ai, arm in enumerate(arms):
            pts = []
            for g, xv in zip(groups, xs):
                scores = report.scores(arm, g)
                if scores:
                    px = x0 + (xv - xmin) / xr * span
                    pts.append(f"{px:.1f},{ypos(aggregate(scores)[0]):.1f}")
            if pts:
                color = _ARM_COLORS[ai % len(_ARM_COLORS)]
                body.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="2"/>')
        for g, xv in zip(groups, xs):
            px = x0 + (xv - xmin) / xr * span
            body.append(f'<text x="{px:.1f}" y="{y0 + 18}" text-anchor="middle" font-size="12">{g}</text>')
    else:
        reps = sorted({rep for _, _, rep, _ in report.rows})
        xr = max(len(reps) - 1, 1)
        for ai, arm in enumerate(arms):
            pts = []
            for k, rep in enumerate(reps):
                vals = [d for a, _, r, d in report.rows if a == arm and r == rep]
                if vals:
                    px = x0 + k / xr * span
                    pts.append(f"{px:.1f},{ypos(float(np.mean(vals))):.1f}")
            if pts:
                color = _ARM_COLORS[ai % len(_ARM_COLORS)]
                body.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="2"/>')
    for ai, arm in enumerate(arms):
        color = _ARM_COLORS[ai % len(_ARM_COLORS)]
        body.append(f'<rect x="{x0 + 10 + ai * 130}" y="{y1 - 18}" width="12" height="12" fill="{color}"/>')
        body.append(f'<text x="{x0 + 26 + ai * 130}" y="{y1 - 7}" font-size="12">{arm}</text>')
    Path(path).write_text(_svg_document(body))


def emit_report(report: ExperimentReport, directory) -> list[str]:
    """Write results/summary CSVs and the SVG figures; returns file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    write_results_csv(report, directory / "results.csv")
    written.append("results.csv")
    write_summary_csv(report, directory / "summary.csv")
    written.append("summary.csv")
    if report.swap_matrices:
        write_swap_matrix_csv(report, directory / "swap_matrix.csv")
        written.append("swap_matrix.csv")
    write_bars_svg(report, directory / "bars.svg")
    written.append("bars.svg")
    write_curves_svg(report, directory / "curves.svg")
    written.append("curves.svg")
    return written
