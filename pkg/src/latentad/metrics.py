"""Evaluation metrics: AUROC, AP, F1max, per-region overlap, and DICE.

All threshold sweeps iterate over the distinct score values actually
present (never a fixed grid), so every function is exact and matches a
brute-force oracle on small instances. Inputs are plain numpy arrays;
nothing here touches the model stack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _as_score_label_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney U) formulation.

    Ties between a positive and a negative count 0.5.
    """
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc requires both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    # average rank within each tie group, 1-based
    _, starts, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    group_rank = starts + (counts - 1) / 2.0 + 1.0
    ranks[order] = np.repeat(group_rank, counts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_sweep(scores, labels):
    """Cumulative TP/FP counts at each distinct score value, descending."""
    s, y = _as_score_label_arrays(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    y_desc = y[order]
    cum_tp = np.cumsum(y_desc)
    cum_fp = np.cumsum(1 - y_desc)
    # last index of each tie group = counts of items >= that threshold
    is_group_end = np.empty(len(s_desc), dtype=bool)
    is_group_end[-1] = True
    is_group_end[:-1] = s_desc[:-1] != s_desc[1:]
    thresholds = s_desc[is_group_end]
    return thresholds, cum_tp[is_group_end], cum_fp[is_group_end]


def average_precision(scores, labels) -> float:
    """Step-interpolated average precision with tied scores grouped."""
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average_precision requires at least one positive")
    _, tp, fp = _threshold_sweep(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * precision))


def f1max(scores, labels) -> tuple[float, float]:
    """Maximum F1 over all realized thresholds; smallest threshold on ties.

    A sample is predicted positive when its score is >= the threshold.
    """
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("f1max requires at least one positive")
    thresholds, tp, fp = _threshold_sweep(s, y)
    fn = n_pos - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    best = len(f1) - 1 - int(np.argmax(f1[::-1]))  # last (= smallest threshold) maximizer
    return float(f1[best]), float(thresholds[best])


def _validate_binary(arr, name):
    a = np.asarray(arr)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def dice(binary_pred, gt_mask) -> float:
    """Overlap coefficient 2|A&B| / (|A|+|B|); 1.0 when both sets are empty."""
    pred = _validate_binary(binary_pred, "binary_pred")
    mask = _validate_binary(gt_mask, "gt_mask")
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {mask.shape}")
    total = int(pred.sum()) + int(mask.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, mask).sum() / total)


def pro_curve(pixel_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]):
    """Mean per-region overlap and global FPR at every distinct map value.

    Regions are 8-connected components of the ground-truth masks. Returns
    (fprs, overlaps) sampled at the distinct thresholds in descending
    order, with the empty-prediction point (0, 0) prepended.
    """
    if len(pixel_maps) != len(gt_masks):
        raise ValueError("pixel_maps and gt_masks differ in length")
    region_vals = []
    region_weights = []
    neg_vals = []
    n_regions = 0
    for pm, gm in zip(pixel_maps, gt_masks):
        pm = np.asarray(pm, dtype=np.float64)
        gm = _validate_binary(gm, "gt_mask")
        if pm.shape != gm.shape:
            raise ValueError(f"map/mask shape mismatch {pm.shape} vs {gm.shape}")
        labeled, n = ndimage.label(gm, structure=EIGHT_CONNECTED)
        for r in range(1, n + 1):
            vals = pm[labeled == r]
            region_vals.append(vals)
            region_weights.append(np.full(vals.size, 1.0 / vals.size))
        n_regions += n
        neg_vals.append(pm[~gm])
    if n_regions == 0:
        raise ValueError("pro requires at least one anomalous region")
    neg = np.concatenate(neg_vals)
    if neg.size == 0:
        raise ValueError("pro requires at least one normal pixel")
    pos = np.concatenate(region_vals) if region_vals else np.empty(0)
    pos_w = np.concatenate(region_weights) if region_weights else np.empty(0)

    pos_order = np.argsort(pos, kind="stable")
    pos_sorted = pos[pos_order]
    w_prefix = np.concatenate(([0.0], np.cumsum(pos_w[pos_order])))
    w_total = w_prefix[-1]
    neg_sorted = np.sort(neg)

    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    overlap_sum = w_total - w_prefix[np.searchsorted(pos_sorted, thresholds, side="left")]
    fp = neg_sorted.size - np.searchsorted(neg_sorted, thresholds, side="left")
    fprs = np.concatenate(([0.0], fp / neg_sorted.size))
    overlaps = np.concatenate(([0.0], overlap_sum / n_regions))
    return fprs, overlaps


def pro(pixel_maps, gt_masks, fpr_limit: float = 0.3) -> float:
    """Per-region overlap integrated over FPR in [0, fpr_limit], normalized.

    The (FPR, mean overlap) curve is integrated by the trapezoid rule with
    linear interpolation at the integration limit.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fprs, overlaps = pro_curve(pixel_maps, gt_masks)
    # clip the curve at fpr_limit
    idx = int(np.searchsorted(fprs, fpr_limit, side="left"))
    if idx >= len(fprs):
        x, y = fprs, overlaps
    elif fprs[idx] == fpr_limit:
        x, y = fprs[: idx + 1], overlaps[: idx + 1]
    else:
        # fprs[idx-1] < limit < fprs[idx]: interpolate the crossing point
        f0, f1 = fprs[idx - 1], fprs[idx]
        o0, o1 = overlaps[idx - 1], overlaps[idx]
        o_lim = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0)
        x = np.concatenate([fprs[:idx], [fpr_limit]])
        y = np.concatenate([overlaps[:idx], [o_lim]])
    return float(np.trapezoid(y, x) / fpr_limit)


@dataclass
class EvalRecord:
    """Scores and ground truth for one test image."""

    image_score: float
    pixel_map: np.ndarray
    gt_label: int
    gt_mask: np.ndarray
    category: str = ""
    path: str = ""

    def __post_init__(self):
        self.pixel_map = np.asarray(self.pixel_map, dtype=np.float64)
        mask = _validate_binary(self.gt_mask, "gt_mask")
        if mask.shape != self.pixel_map.shape:
            raise ValueError("gt_mask and pixel_map shapes differ")
        self.gt_mask = mask
        if self.gt_label not in (0, 1):
            raise ValueError("gt_label must be 0 or 1")
        if self.gt_label != int(mask.any()):
            raise ValueError("gt_label must be 1 exactly when gt_mask has positive pixels")


@dataclass
class EvalConfig:
    fpr_limit: float = 0.3
    pixel_mode: str = "pooled"  # or "per_image"


@dataclass
class MetricsRow:
    name: str
    n_images: int
    image_auroc: float
    image_ap: float
    image_f1max: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1max: float
    pro: float
    dice: float

    FIELDS = (
        "name", "n_images", "image_auroc", "image_ap", "image_f1max",
        "pixel_auroc", "pixel_ap", "pixel_f1max", "pro", "dice",
    )

    def values(self):
        return [getattr(self, f) for f in self.FIELDS]


def format_triplet(a: float, b: float, c: float) -> str:
    """Render three unit-interval metrics as percentage cells, e.g. 97.2/99.0/96.5."""
    return "/".join(f"{100 * v:.1f}" for v in (a, b, c))


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    metadata: dict = field(default_factory=dict)

    def row(self, name: str) -> MetricsRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in self.metadata.items():
                fh.write(f"# {k}: {v}\n")
            writer = csv.writer(fh)
            writer.writerow(MetricsRow.FIELDS)
            for r in self.rows:
                writer.writerow(r.values())

    def to_markdown(self) -> str:
        lines = [
            "| category | n | image AUROC/AP/F1max | pixel AUROC/AP/F1max | PRO | DICE |",
            "|---|---|---|---|---|---|",
        ]
        for r in self.rows:
            img = format_triplet(r.image_auroc, r.image_ap, r.image_f1max)
            px = format_triplet(r.pixel_auroc, r.pixel_ap, r.pixel_f1max)
            lines.append(
                f"| {r.name} | {r.n_images} | {img} | {px} | "
                f"{100 * r.pro:.1f} | {100 * r.dice:.1f} |"
            )
        return "\n".join(lines)


def read_report_csv(path) -> MetricsReport:
    metadata = {}
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh]
    data_lines = []
    for ln in lines:
        if ln.startswith("# "):
            k, _, v = ln[2:].partition(":")
            metadata[k.strip()] = v.strip()
        else:
            data_lines.append(ln)
    reader = csv.DictReader(data_lines)
    for rec in reader:
        rows.append(MetricsRow(
            name=rec["name"],
            n_images=int(rec["n_images"]),
            **{f: float(rec[f]) for f in MetricsRow.FIELDS[2:]},
        ))
    return MetricsReport(rows=rows, metadata=metadata)


def _pixel_metrics(records: Sequence[EvalRecord], mode: str):
    if mode == "pooled":
        flat_scores = np.concatenate([r.pixel_map.ravel() for r in records])
        flat_labels = np.concatenate([r.gt_mask.ravel().astype(int) for r in records])
        a = auroc(flat_scores, flat_labels)
        ap = average_precision(flat_scores, flat_labels)
        f1, thr = f1max(flat_scores, flat_labels)
        return a, ap, f1, thr
    if mode == "per_image":
        aurocs, aps, f1s, thrs = [], [], [], []
        for r in records:
            if not r.gt_mask.any():
                continue
            s = r.pixel_map.ravel()
            y = r.gt_mask.ravel().astype(int)
            if 0 < y.sum() < len(y):
                aurocs.append(auroc(s, y))
            aps.append(average_precision(s, y))
            f1_i, thr_i = f1max(s, y)
            f1s.append(f1_i)
            thrs.append(thr_i)
        if not aps:
            raise ValueError("per-image pixel metrics require at least one anomalous image")
        return (
            float(np.mean(aurocs)) if aurocs else float("nan"),
            float(np.mean(aps)),
            float(np.mean(f1s)),
            float(np.median(thrs)),
        )
    raise ValueError(f"unknown pixel_mode {mode!r}")


def _metrics_for(records: Sequence[EvalRecord], name: str, config: EvalConfig) -> MetricsRow:
    scores = [r.image_score for r in records]
    labels = [r.gt_label for r in records]
    img_auroc = auroc(scores, labels)
    img_ap = average_precision(scores, labels)
    img_f1, _ = f1max(scores, labels)
    px_auroc, px_ap, px_f1, px_thr = _pixel_metrics(records, config.pixel_mode)
    pro_val = pro([r.pixel_map for r in records], [r.gt_mask for r in records], config.fpr_limit)
    pooled_pred = np.concatenate([(r.pixel_map >= px_thr).ravel() for r in records]).astype(int)
    pooled_mask = np.concatenate([r.gt_mask.ravel() for r in records]).astype(int)
    dice_val = dice(pooled_pred, pooled_mask)
    return MetricsRow(
        name=name,
        n_images=len(records),
        image_auroc=img_auroc,
        image_ap=img_ap,
        image_f1max=img_f1,
        pixel_auroc=px_auroc,
        pixel_ap=px_ap,
        pixel_f1max=px_f1,
        pro=pro_val,
        dice=dice_val,
    )


def evaluate_dataset(records: Sequence[EvalRecord], config: Optional[EvalConfig] = None) -> MetricsReport:
    """Per-category rows plus a category mean and an all-images pooled row.

    Image metrics rank whole-image scores; pixel metrics pool every pixel
    across the selection (or average per image, per config); DICE is taken
    at the pixel-F1max threshold.
    """
    if not records:
        raise ValueError("no records to evaluate")
    config = config or EvalConfig()
    categories = sorted({r.category for r in records})
    rows = []
    for cat in categories:
        cat_records = [r for r in records if r.category == cat]
        rows.append(_metrics_for(cat_records, cat or "default", config))
    if len(rows) > 1:
        mean_row = MetricsRow(
            name="mean",
            n_images=len(records),
            **{
                f: float(np.mean([getattr(r, f) for r in rows]))
                for f in MetricsRow.FIELDS[2:]
            },
        )
        rows.append(mean_row)
    rows.append(_metrics_for(list(records), "all", config))
    return MetricsReport(rows=rows)
