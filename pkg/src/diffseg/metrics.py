"""Panoptic quality, COCO-style mask AP and semantic mIoU.

Ground truth is passed in the same :class:`SegmentationResult` shapes the
post-processors emit: panoptic label maps with segment metadata (segment id
0 is void), instance lists (scores ignored), and semantic maps where
``IGNORE`` marks unlabeled pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .sampler import VOID, SegmentationResult

IGNORE = 255
IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0, float("inf")), "s": (0, 32 ** 2), "m": (32 ** 2, 96 ** 2), "l": (96 ** 2, float("inf"))}


@dataclass
class ClassPQ:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom else 0.0

    def __iadd__(self, other: "ClassPQ"):
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


@dataclass
class PQReport:
    pq: float
    pq_thing: float
    pq_stuff: float
    per_class: dict[int, ClassPQ] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_class"] = {str(k): asdict(v) for k, v in self.per_class.items()}
        return out


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _segment_table(res: SegmentationResult) -> dict[int, tuple[int, bool]]:
    return {s.id: (s.category, s.is_thing) for s in res.segments}


def pq_single(pred: SegmentationResult, gt: SegmentationResult) -> dict[int, ClassPQ]:
    """Per-class PQ statistics for one image (IoU > 0.5 matching, void-aware)."""
    if pred.label_map.shape != gt.label_map.shape:
        raise ValueError(f"label map shapes differ: {pred.label_map.shape} vs {gt.label_map.shape}")
    gt_segs = _segment_table(gt)
    pred_segs = _segment_table(pred)
    g = gt.label_map.astype(np.int64).ravel()
    p = pred.label_map.astype(np.int64).ravel()
    offset = int(max(g.max(initial=0), p.max(initial=0))) + 1
    ids, counts = np.unique(g * offset + p, return_counts=True)
    inter = {(int(i // offset), int(i % offset)): int(c) for i, c in zip(ids, counts)}
    gt_area = {sid: int((g == sid).sum()) for sid in gt_segs}
    pred_area = {sid: int((p == sid).sum()) for sid in pred_segs}

    stats: dict[int, ClassPQ] = {}
    matched_gt, matched_pred = set(), set()
    for (gid, pid), n in inter.items():
        if gid not in gt_segs or pid not in pred_segs:
            continue
        if gt_segs[gid][0] != pred_segs[pid][0]:
            continue
        union = pred_area[pid] + gt_area[gid] - n - inter.get((VOID, pid), 0)
        iou = n / union
        if iou > 0.5:
            st = stats.setdefault(gt_segs[gid][0], ClassPQ())
            st.tp += 1
            st.iou_sum += iou
            matched_gt.add(gid)
            matched_pred.add(pid)
    for gid, (cat, _) in gt_segs.items():
        if gid not in matched_gt and gt_area[gid] > 0:
            stats.setdefault(cat, ClassPQ()).fn += 1
    for pid, (cat, _) in pred_segs.items():
        if pid in matched_pred or pred_area[pid] == 0:
            continue
        # predictions lying mostly on void are not penalized
        if inter.get((VOID, pid), 0) / pred_area[pid] > 0.5:
            continue
        stats.setdefault(cat, ClassPQ()).fp += 1
    return stats


def _category_kinds(preds, gts) -> dict[int, bool]:
    kinds: dict[int, bool] = {}
    for res in list(gts) + list(preds):
        for s in res.segments:
            kinds.setdefault(s.category, s.is_thing)
    return kinds


def panoptic_quality(preds: list[SegmentationResult], gts: list[SegmentationResult],
                     thing_classes=None) -> PQReport:
    if len(preds) != len(gts):
        raise ValueError(f"prediction/ground-truth image counts differ: {len(preds)} vs {len(gts)}")
    per_class: dict[int, ClassPQ] = {}
    for p, g in zip(preds, gts):
        for cat, st in pq_single(p, g).items():
            acc = per_class.setdefault(cat, ClassPQ())
            acc += st
    if thing_classes is None:
        kinds = _category_kinds(preds, gts)
        thing_classes = {c for c, t in kinds.items() if t}
    thing_classes = set(thing_classes)

    def average(select) -> float:
        vals = [st.pq() for c, st in per_class.items() if select(c) and st.tp + st.fp + st.fn > 0]
        return float(np.mean(vals)) if vals else 0.0

    return PQReport(
        pq=average(lambda c: True),
        pq_thing=average(lambda c: c in thing_classes),
        pq_stuff=average(lambda c: c not in thing_classes),
        per_class=dict(sorted(per_class.items())),
    )


def _mask_iou(d: np.ndarray, g: np.ndarray) -> np.ndarray:
    """D x G IoU between flattened boolean masks."""
    d = d.reshape(len(d), -1).astype(np.float64)
    g = g.reshape(len(g), -1).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _evaluate_image(dets, gts, area_rng, max_dets):
    """Greedy matching for one image and class at every IoU threshold."""
    lo, hi = area_rng
    dets = sorted(dets, key=lambda d: -d.score)[:max_dets]
    g_area = np.array([int(g.mask.sum()) for g in gts])
    g_ignore = np.array([not (lo <= a < hi) for a in g_area], dtype=bool)
    order = np.argsort(g_ignore, kind="stable")
    gts = [gts[i] for i in order]
    g_ignore = g_ignore[order]
    n_t, n_d, n_g = len(IOU_THRESHOLDS), len(dets), len(gts)
    ious = _mask_iou(np.stack([d.mask for d in dets]), np.stack([g.mask for g in gts])) if n_d and n_g else np.zeros((n_d, n_g))
    gt_matched = np.full((n_t, n_g), -1)
    dt_matched = np.full((n_t, n_d), -1)
    dt_ignore = np.zeros((n_t, n_d), dtype=bool)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        for di in range(n_d):
            best = min(thr, 1 - 1e-10)
            m = -1
            for gi in range(n_g):
                if gt_matched[ti, gi] >= 0:
                    continue
                if m > -1 and not g_ignore[m] and g_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best = ious[di, gi]
                m = gi
            if m == -1:
                continue
            dt_ignore[ti, di] = g_ignore[m]
            dt_matched[ti, di] = m
            gt_matched[ti, m] = di
    d_area = np.array([int(d.mask.sum()) for d in dets])
    out_of_range = np.array([not (lo <= a < hi) for a in d_area], dtype=bool).reshape(1, -1)
    dt_ignore |= (dt_matched == -1) & out_of_range
    return {
        "scores": np.array([d.score for d in dets], dtype=np.float64),
        "matched": dt_matched >= 0,
        "ignore": dt_ignore,
        "num_gt": int((~g_ignore).sum()),
    }


def _precision_at_recall(tp: np.ndarray, fp: np.ndarray, num_gt: int) -> np.ndarray:
    tp_sum = np.cumsum(tp).astype(np.float64)
    fp_sum = np.cumsum(fp).astype(np.float64)
    recall = tp_sum / num_gt
    precision = tp_sum / np.maximum(tp_sum + fp_sum, 1)
    # interpolated precision: max precision at any recall >= r
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    q = np.zeros(len(RECALL_THRESHOLDS))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return q


def _ap_table(preds, gts, classes, area_rng, max_dets) -> np.ndarray:
    """Precision table ``thresholds x recalls x classes``; -1 where a class has no ground truth."""
    table = -np.ones((len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS), len(classes)))
    for ci, c in enumerate(classes):
        evals = []
        for p, g in zip(preds, gts):
            dets = [d for d in p.instances if d.category == c]
            gt_c = [x for x in g.instances if x.category == c]
            if dets or gt_c:
                evals.append(_evaluate_image(dets, gt_c, area_rng, max_dets))
        num_gt = sum(e["num_gt"] for e in evals)
        if num_gt == 0:
            continue
        if not evals:
            continue
        scores = np.concatenate([e["scores"] for e in evals])
        order = np.argsort(-scores, kind="mergesort")
        matched = np.concatenate([e["matched"] for e in evals], axis=1)[:, order]
        ignore = np.concatenate([e["ignore"] for e in evals], axis=1)[:, order]
        for ti in range(len(IOU_THRESHOLDS)):
            keep = ~ignore[ti]
            tp = matched[ti][keep]
            table[ti, :, ci] = _precision_at_recall(tp, ~tp, num_gt)
    return table


def _mean_valid(x: np.ndarray) -> float | None:
    v = x[x > -1]
    return float(v.mean()) if v.size else None


def mask_ap(preds: list[SegmentationResult], gts: list[SegmentationResult], classes=None,
            max_dets: int = 100) -> APReport:
    if len(preds) != len(gts):
        raise ValueError(f"prediction/ground-truth image counts differ: {len(preds)} vs {len(gts)}")
    if classes is None:
        classes = sorted({x.category for r in list(gts) + list(preds) for x in r.instances})
    tables = {name: _ap_table(preds, gts, classes, rng, max_dets) for name, rng in AREA_RANGES.items()}
    full = tables["all"]
    t75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return APReport(
        ap=_mean_valid(full) or 0.0,
        ap50=_mean_valid(full[0]) or 0.0,
        ap75=_mean_valid(full[t75]) or 0.0,
        ap_s=_mean_valid(tables["s"]),
        ap_m=_mean_valid(tables["m"]),
        ap_l=_mean_valid(tables["l"]),
    )


def semantic_confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"semantic map shapes differ: {pred.shape} vs {gt.shape}")
    valid = gt != IGNORE
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def mean_iou(preds, gts, num_classes: int) -> float:
    """Dataset-level per-class IoU averaged over classes present in the ground truth.

    ``preds``/``gts`` are semantic maps or semantic SegmentationResults.
    """
    if len(preds) != len(gts):
        raise ValueError(f"prediction/ground-truth image counts differ: {len(preds)} vs {len(gts)}")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p = p.semantic if isinstance(p, SegmentationResult) else p
        g = g.semantic if isinstance(g, SegmentationResult) else g
        conf += semantic_confusion(np.asarray(p), np.asarray(g), num_classes)
    inter = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(1)
    union = gt_count + conf.sum(0) - inter
    present = gt_count > 0
    if not present.any():
        raise ValueError("no labeled ground-truth pixels")
    return float(np.mean(inter[present] / union[present]))


def format_table(report: dict) -> str:
    lines = [f"{'metric':<12}{'value':>10}", "-" * 22]
    for k, v in report.items():
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            lines.append(f"{k:<12}{100 * v:>10.2f}")
        elif v is None:
            lines.append(f"{k:<12}{'n/a':>10}")
    return "\n".join(lines)
