"""Object-level detection metrics with a relaxed IoU criterion.

Detections are matched greedily in descending score order (ties broken by
box x, then y) to the unmatched ground truth of highest IoU, provided that
IoU reaches ``iou_min`` (5 % by default).  AP is the exact step integral of
the monotone precision envelope over recall; AP_s restricts ground truths to
area below 25 px^2 and ignores detections matched to larger objects.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

IOU_MIN = 0.05
SMALL_AREA = 25.0


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class Detection(Box):
    score: float = 1.0

    @property
    def box(self) -> Box:
        return Box(self.x, self.y, self.w, self.h)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def ranking_order(dets: Sequence[Detection]) -> list[int]:
    """Indices of ``dets`` by descending score, then ascending x, then y."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].x, dets[i].y))


@dataclass
class MatchResult:
    det_gt: list[int | None]  # per detection (input order): matched GT index or None
    gt_det: list[int | None]  # per GT: matching detection index or None

    @property
    def tp(self) -> int:
        return sum(m is not None for m in self.det_gt)

    @property
    def fp(self) -> int:
        return sum(m is None for m in self.det_gt)

    @property
    def fn(self) -> int:
        return sum(m is None for m in self.gt_det)


def match_detections(dets: Sequence[Detection], gts: Sequence[Box], iou_min: float = IOU_MIN) -> MatchResult:
    det_gt: list[int | None] = [None] * len(dets)
    gt_det: list[int | None] = [None] * len(gts)
    for i in ranking_order(dets):
        best, best_iou = None, iou_min
        for j, g in enumerate(gts):
            if gt_det[j] is not None:
                continue
            v = iou(dets[i], g)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            det_gt[i] = best
            gt_det[best] = i
    return MatchResult(det_gt, gt_det)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    fa_per_image: float
    n_images: int
    threshold: float
    tp: int
    fp: int
    fn: int
    ap: float | None = None
    ap_small: float | None = None  # None when no small ground truth exists

    def as_row(self) -> dict:
        return {
            "f1": self.f1, "ap": self.ap, "ap_s": self.ap_small, "precision": self.precision,
            "recall": self.recall, "fa_per_image": self.fa_per_image,
        }


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def _check_aligned(preds, gts):
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} ground-truth lists")


def metrics_at_threshold(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]],
                         score_threshold: float = 0.1, iou_min: float = IOU_MIN,
                         with_ap: bool = True) -> MetricsReport:
    """Precision, recall, F1 and false alarms per image at one score threshold.

    Precision is 0 when nothing is detected.  AP and AP_s are computed over
    all detections regardless of the threshold.
    """
    _check_aligned(preds, gts)
    tp = fp = fn = 0
    for dets, boxes in zip(preds, gts):
        kept = [d for d in dets if d.score >= score_threshold]
        m = match_detections(kept, boxes, iou_min)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    p, r, f1 = _prf(tp, fp, fn)
    n = len(preds)
    report = MetricsReport(p, r, f1, fp / n if n else 0.0, n, score_threshold, tp, fp, fn)
    if with_ap and any(len(b) for b in gts):
        report.ap = average_precision(preds, gts, iou_min)
        report.ap_small = ap_small(preds, gts, iou_min)
    return report


def _scored_flags(preds, gts, iou_min, gt_keep=None):
    """(score, 1 for TP / 0 for FP) per detection; TPs on GTs rejected by ``gt_keep`` are dropped."""
    out = []
    for dets, boxes in zip(preds, gts):
        m = match_detections(dets, boxes, iou_min)
        for i, d in enumerate(dets):
            j = m.det_gt[i]
            if j is None:
                out.append((d.score, 0))
            elif gt_keep is None or gt_keep(boxes[j]):
                out.append((d.score, 1))
    return out


def _pr_counts(flags):
    """(threshold, tp, fp) at every distinct score, descending threshold."""
    flags = sorted(flags, key=lambda t: -t[0])
    counts = []
    tp = fp = 0
    i = 0
    while i < len(flags):
        score = flags[i][0]
        while i < len(flags) and flags[i][0] == score:
            tp += flags[i][1]
            fp += 1 - flags[i][1]
            i += 1
        counts.append((score, tp, fp))
    return counts


def _pr_points(flags, n_gt):
    """(threshold, precision, recall) at every distinct score, descending threshold."""
    return [(score, tp / (tp + fp), tp / n_gt) for score, tp, fp in _pr_counts(flags)]


def _exact_ap(flags, n_gt) -> float:
    """Enveloped step integral in rational arithmetic, rounded once."""
    area, best, prev_tp = Fraction(0), Fraction(0), None
    # walk from the lowest threshold up so the running max is the envelope
    for _, tp, fp in reversed(_pr_counts(flags)):
        if prev_tp is not None:
            area += (prev_tp - tp) * best
        best = max(best, Fraction(tp, tp + fp))
        prev_tp = tp
    if prev_tp is not None:
        area += prev_tp * best
    return float(area / n_gt)


def envelope_area(recalls: Sequence[float], precisions: Sequence[float]) -> float:
    """Step integral of the monotone precision envelope, points ordered by increasing recall."""
    r = np.concatenate([[0.0], np.asarray(recalls, dtype=np.float64)])
    p = np.concatenate([[0.0], np.asarray(precisions, dtype=np.float64)])
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * env[1:]))


def average_precision(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]],
                      iou_min: float = IOU_MIN) -> float:
    _check_aligned(preds, gts)
    n_gt = sum(len(b) for b in gts)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    return _exact_ap(_scored_flags(preds, gts, iou_min), n_gt)


def ap_small(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]],
             iou_min: float = IOU_MIN, max_area: float = SMALL_AREA) -> float | None:
    """AP over ground truths with area below ``max_area``; ``None`` when there are none."""
    _check_aligned(preds, gts)
    n_small = sum(1 for boxes in gts for b in boxes if b.area < max_area)
    if n_small == 0:
        return None
    return _exact_ap(_scored_flags(preds, gts, iou_min, gt_keep=lambda b: b.area < max_area), n_small)


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def pr_curve(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]],
             iou_min: float = IOU_MIN, n_points: int | None = None) -> list[PRPoint]:
    """Precision/recall at every distinct score, ordered by increasing threshold.

    With ``n_points`` and more distinct scores than that, thresholds are
    taken at evenly spaced score quantiles instead.
    """
    _check_aligned(preds, gts)
    n_gt = sum(len(b) for b in gts)
    if n_gt == 0:
        raise ValueError("a PR curve needs at least one ground-truth box")
    points = _pr_points(_scored_flags(preds, gts, iou_min), n_gt)
    if n_points is not None and len(points) > n_points:
        scores = np.array([s for s, _, _ in points])
        wanted = set(np.quantile(scores, np.linspace(0, 1, n_points), method="inverted_cdf").tolist())
        points = [pt for pt in points if pt[0] in wanted]
    return [PRPoint(s, p, r) for s, p, r in reversed(points)]


def pr_curve_area(curve: Sequence[PRPoint]) -> float:
    ordered = sorted(curve, key=lambda pt: pt.recall)
    return envelope_area([pt.recall for pt in ordered], [pt.precision for pt in ordered])


def write_pr_csv(curve: Iterable[PRPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for pt in curve:
            writer.writerow([repr(float(pt.threshold)), repr(float(pt.precision)), repr(float(pt.recall))])


def read_pr_csv(path) -> list[PRPoint]:
    with open(path, newline="") as fh:
        return [PRPoint(float(r["threshold"]), float(r["precision"]), float(r["recall"]))
                for r in csv.DictReader(fh)]


def extract_objects_from_map(score_map: np.ndarray, threshold: float, connectivity: int = 8) -> list[Detection]:
    """Threshold a score map and return one box per connected component.

    Each box is the component's pixel bounding box, scored by the
    component's maximum.
    """
    score_map = np.asarray(score_map)
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)
    labels, n = ndimage.label(score_map >= threshold, structure=structure)
    if n == 0:
        return []
    maxima = ndimage.maximum(score_map, labels, index=np.arange(1, n + 1))
    dets = []
    for (sy, sx), peak in zip(ndimage.find_objects(labels), maxima):
        dets.append(Detection(float(sx.start), float(sy.start), float(sx.stop - sx.start),
                              float(sy.stop - sy.start), float(peak)))
    return [dets[i] for i in ranking_order(dets)]


def background_cells(box_lists: Sequence[Sequence[Box]], grid_shape: tuple[int, int], stride: int,
                     margin: int = 2) -> np.ndarray:
    """``(N, h, w)`` mask of grid cells with no ground truth within ``margin`` cells (Chebyshev)."""
    gh, gw = grid_shape
    occupied = np.zeros((len(box_lists), gh, gw), dtype=bool)
    for n, boxes in enumerate(box_lists):
        for b in boxes:
            c0, r0 = int(b.x // stride), int(b.y // stride)
            c1, r1 = int(np.ceil((b.x + b.w) / stride)), int(np.ceil((b.y + b.h) / stride))
            occupied[n, max(r0, 0):max(r1, r0 + 1), max(c0, 0):max(c1, c0 + 1)] = True
    if margin > 0:
        structure = np.ones((1, 3, 3), dtype=bool)
        occupied = ndimage.binary_dilation(occupied, structure=structure, iterations=margin)
    return ~occupied


def background_exceedance(obj_maps: np.ndarray, box_lists: Sequence[Sequence[Box]], stride: int,
                          threshold: float = 0.05, margin: int = 2) -> float:
    """Fraction of background cells whose objectness exceeds ``threshold``."""
    obj_maps = np.asarray(obj_maps)
    bg = background_cells(box_lists, obj_maps.shape[1:], stride, margin)
    if not bg.any():
        raise ValueError("no background cells")
    return float(np.mean(obj_maps[bg] > threshold))
