"""Average precision over 40 recall positions, reports, and size-distribution statistics."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import iou_bev, iou_matrix
from .synthdata import CLASS_NAMES, Box3D, Frame, boxes_to_array

DEFAULT_THRESHOLDS = {0: 0.7, 1: 0.5, 2: 0.5}
RECALL_POSITIONS = 40


@dataclass
class MatchResult:
    tp: np.ndarray
    pairs: list  # (pred index, gt index, iou)


def match_predictions(pred_boxes: Sequence[Box3D], gts: Sequence[Box3D], iou_fn: Callable = iou_bev,
                      thresh: float = 0.7) -> MatchResult:
    """Greedy matching of score-sorted predictions to same-class ground truth.

    Each prediction looks at the highest-IoU GT of its class not yet taken;
    it is a TP when that IoU reaches ``thresh``, which consumes the GT.
    """
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(pred_boxes), dtype=bool)
    pairs = []
    for i, p in enumerate(pred_boxes):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != p.class_id:
                continue
            v = iou_fn(p, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= thresh:
            taken[best_j] = True
            tp[i] = True
            pairs.append((i, best_j, best))
    return MatchResult(tp, pairs)


def _match_fast(pred: np.ndarray, gt: np.ndarray, mode: str, thresh: float) -> np.ndarray:
    """Vectorized-IoU version of :func:`match_predictions` for one class of one frame."""
    tp = np.zeros(len(pred), dtype=bool)
    if len(pred) == 0 or len(gt) == 0:
        return tp
    iou = iou_matrix(pred, gt, mode)
    taken = np.zeros(len(gt), dtype=bool)
    for i in range(len(pred)):
        row = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(row))
        if row[j] >= thresh and not taken[j]:
            taken[j] = True
            tp[i] = True
    return tp


def average_precision_40(tp_flags, num_gt: int):
    """Interpolated AP sampled at recall 1/40 ... 40/40; ``None`` when there is no GT."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if num_gt <= 0:
        return None
    if len(tp_flags) == 0:
        return 0.0
    ctp = np.cumsum(tp_flags)
    rank = np.arange(1, len(tp_flags) + 1)
    prec = ctp / rank
    # max precision at recall >= r, compared exactly: ctp / num_gt >= k / 40
    best_after = np.maximum.accumulate(prec[::-1])[::-1]
    total = 0.0
    for k in range(1, RECALL_POSITIONS + 1):
        idx = np.searchsorted(ctp * RECALL_POSITIONS, k * num_gt, side="left")
        if idx < len(ctp):
            total += best_after[idx]
    return total / RECALL_POSITIONS


@dataclass
class EvalReport:
    """AP per dataset x class x metric, per-dataset mAP, and optional size statistics."""

    ap: dict = field(default_factory=dict)         # (dataset, class, metric) -> AP
    map: dict = field(default_factory=dict)        # (dataset, metric) -> mAP
    size_stats: dict = field(default_factory=dict)  # dataset -> class -> stats
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "ap": [{"dataset": d, "class": CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c), "class_id": c,
                    "metric": m, "value": v} for (d, c, m), v in sorted(self.ap.items())],
            "map": [{"dataset": d, "metric": m, "value": v} for (d, m), v in sorted(self.map.items())],
            "size_stats": self.size_stats,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EvalReport":
        ap = {(e["dataset"], int(e["class_id"]), e["metric"]): e["value"] for e in doc["ap"]}
        mp = {(e["dataset"], e["metric"]): e["value"] for e in doc["map"]}
        return cls(ap, mp, doc.get("size_stats", {}), doc.get("fingerprint", ""))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def rows(self) -> list:
        out = []
        for (d, c, m), v in sorted(self.ap.items()):
            out.append((d, CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c), m, v))
        for (d, m), v in sorted(self.map.items()):
            out.append((d, "mAP", m, v))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "class", "metric", "value"])
            for d, c, m, v in self.rows():
                w.writerow([d, c, m, "" if v is None else f"{v:.10f}"])

    def mean_map(self, dataset: str) -> float:
        """Average of the dataset's BEV and 3D mAP."""
        vals = [self.map[(dataset, m)] for m in ("bev", "3d") if (dataset, m) in self.map]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate(preds: Sequence, frames: Sequence[Frame], thresholds: Mapping[int, float] | None = None,
             dataset_names: Mapping[int, str] | None = None, classes: Sequence[int] | None = None) -> EvalReport:
    """AP_BEV and AP_3D per dataset and class, pooling predictions over frames.

    ``preds[i]`` is the DetectionResult for ``frames[i]``. Predictions of a
    class are ranked by score across frames (ties: false positives first,
    which keeps the result independent of frame order).
    """
    thresholds = dict(DEFAULT_THRESHOLDS if thresholds is None else thresholds)
    classes = sorted(thresholds) if classes is None else list(classes)
    names = dataset_names or {}
    by_ds: dict = {}
    for p, f in zip(preds, frames):
        by_ds.setdefault(f.dataset_id, []).append((p, f))
    report = EvalReport()
    for ds, items in sorted(by_ds.items()):
        dname = names.get(ds, str(ds))
        for metric, mode in (("bev", "bev"), ("3d", "3d")):
            aps = []
            for c in classes:
                scores, flags, n_gt = [], [], 0
                for p, f in items:
                    gt = boxes_to_array(f.boxes)
                    gt = gt[gt[:, 6] == c] if len(gt) else gt
                    n_gt += len(gt)
                    sel = np.flatnonzero(np.asarray(p.class_ids) == c)
                    if len(sel) == 0:
                        continue
                    pb = boxes_to_array([p.boxes[i] for i in sel])
                    order = np.lexsort((np.arange(len(sel)), -np.asarray(p.scores)[sel]))
                    tp = _match_fast(pb[order], gt, mode, thresholds[c])
                    scores.extend(np.asarray(p.scores)[sel][order])
                    flags.extend(tp)
                scores = np.asarray(scores, dtype=np.float64)
                flags = np.asarray(flags, dtype=bool)
                rank = np.lexsort((flags, -scores))
                ap = average_precision_40(flags[rank], n_gt)
                report.ap[(dname, c, metric)] = ap
                if ap is not None:
                    aps.append(ap)
            report.map[(dname, metric)] = float(np.mean(aps)) if aps else None
    return report


# ---------------------------------------------------------------- size statistics

def wasserstein_1d(a, b) -> float:
    """W1 between two empirical samples via the quantile functions.

    With equal sample counts this is the mean absolute difference of the
    sorted samples; otherwise the quantile step functions are integrated
    exactly over their merged breakpoints.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("W1 needs non-empty samples")
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    qa = np.arange(1, len(a) + 1) / len(a)
    qb = np.arange(1, len(b) + 1) / len(b)
    q = np.union1d(qa, qb)
    lo = np.r_[0.0, q[:-1]]
    mid = (lo + q) / 2
    ia = np.minimum(np.searchsorted(qa, mid, side="left"), len(a) - 1)
    ib = np.minimum(np.searchsorted(qb, mid, side="left"), len(b) - 1)
    return float(np.sum((q - lo) * np.abs(a[ia] - b[ib])))


def size_distribution_stats(pred_sizes: Mapping[int, np.ndarray], gt_sizes: Mapping[int, np.ndarray]) -> dict:
    """Per-class mean/std of (l, w, h) for both sides plus per-dimension W1.

    Classes with fewer than two samples on either side are flagged
    ``degenerate`` and carry no W1.
    """
    out = {}
    for c in sorted(set(pred_sizes) | set(gt_sizes)):
        p = np.asarray(pred_sizes.get(c, np.zeros((0, 3))), dtype=np.float64).reshape(-1, 3)
        g = np.asarray(gt_sizes.get(c, np.zeros((0, 3))), dtype=np.float64).reshape(-1, 3)
        entry = {"n_pred": len(p), "n_gt": len(g), "degenerate": len(p) < 2 or len(g) < 2}
        for side, arr in (("pred", p), ("gt", g)):
            entry[f"{side}_mean"] = arr.mean(axis=0).tolist() if len(arr) else None
            entry[f"{side}_std"] = arr.std(axis=0).tolist() if len(arr) else None
        entry["w1"] = None if entry["degenerate"] else [wasserstein_1d(p[:, d], g[:, d]) for d in range(3)]
        out[int(c)] = entry
    return out


def collect_sizes(preds: Sequence, frames: Sequence[Frame], min_score: float = 0.5):
    """Sizes of confident predictions and of all GT boxes, per class."""
    ps, gs = {}, {}
    for p, f in zip(preds, frames):
        for b, s in zip(p.boxes, p.scores):
            if s >= min_score:
                ps.setdefault(b.class_id, []).append(b.size)
        for b in f.boxes:
            gs.setdefault(b.class_id, []).append(b.size)
    return ({k: np.asarray(v) for k, v in ps.items()}, {k: np.asarray(v) for k, v in gs.items()})


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
