"""Bipartite matching and the per-layer set-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .decoder import Prediction
from .mask_codec import TooManyObjects

LOSS_WEIGHTS = (2.0, 5.0, 5.0)  # classification, mask BCE, mask dice
NO_OBJECT_WEIGHT = 0.1
DICE_EPS = 1.0


@dataclass
class Target:
    """Ground truth for one image at mask-logit resolution."""

    labels: torch.Tensor  # G, int64
    masks: torch.Tensor  # G x h x w, {0, 1}

    def __len__(self) -> int:
        return int(self.labels.numel())


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index), sorted by ground truth
    unmatched_predictions: list[int]


@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    ce: torch.Tensor
    dice: torch.Tensor
    per_layer: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]] = field(default_factory=list)


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest augmenting paths with dual potentials, O(n^2 m). Requires
    ``n <= m``; returns the column chosen for each row. Among equal-cost
    candidates the lowest column index wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"cannot assign {n} rows to {m} columns")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def _prefer_low_duplicates(cost: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Among columns with identical cost vectors, move the assignments onto the lowest indices."""
    groups: dict[bytes, list[int]] = {}
    for j in range(cost.shape[1]):
        groups.setdefault(np.ascontiguousarray(cost[:, j]).tobytes(), []).append(j)
    owner = {int(c): r for r, c in enumerate(cols)}
    cols = cols.copy()
    for members in groups.values():
        if len(members) < 2:
            continue
        rows = sorted(owner[j] for j in members if j in owner)
        for r, j in zip(rows, members):
            cols[r] = j
    return cols


def assign(cost: np.ndarray) -> MatchResult:
    """Match ``n_pred x n_gt`` costs; every ground truth gets one prediction."""
    cost = np.asarray(cost, dtype=np.float64)
    n_pred, n_gt = cost.shape
    if n_gt > n_pred:
        raise TooManyObjects(f"{n_gt} ground-truth objects exceed {n_pred} predictions")
    cols = _prefer_low_duplicates(cost.T, hungarian(cost.T))
    pairs = [(int(c), g) for g, c in enumerate(cols)]
    taken = set(int(c) for c in cols)
    return MatchResult(pairs, [i for i in range(n_pred) if i not in taken])


def dice_loss(pred_prob: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    p, g = pred_prob.flatten(), gt.flatten().to(pred_prob.dtype)
    return 1 - 2 * (p * g).sum() / (p.sum() + g.sum() + DICE_EPS)


def bce_loss(pred_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(pred_logits, gt.to(pred_logits.dtype), reduction="mean")


@torch.no_grad()
def match_cost(pred: Prediction, target: Target, weights=LOSS_WEIGHTS) -> torch.Tensor:
    """``N x G`` cost: weighted (-class prob) + mean BCE + dice for every pair."""
    w_cls, w_ce, w_dice = weights
    logits = pred.mask_logits.flatten(1)
    gt = target.masks.flatten(1).to(logits.dtype)
    hw = logits.shape[1]
    prob = pred.class_logits.softmax(-1)[:, target.labels]
    pos = F.softplus(-logits)  # -log sigmoid
    neg = F.softplus(logits)  # -log(1 - sigmoid)
    c_ce = (pos @ gt.T + neg @ (1 - gt).T) / hw
    s = logits.sigmoid()
    c_dice = 1 - 2 * (s @ gt.T) / (s.sum(-1)[:, None] + gt.sum(-1)[None, :] + DICE_EPS)
    return w_cls * -prob + w_ce * c_ce + w_dice * c_dice


def match(pred: Prediction, target: Target, weights=LOSS_WEIGHTS) -> MatchResult:
    n = pred.class_logits.shape[0]
    if len(target) > n:
        raise TooManyObjects(f"{len(target)} ground-truth objects exceed N={n}")
    if len(target) == 0:
        return MatchResult([], list(range(n)))
    return assign(match_cost(pred, target, weights).cpu().numpy())


def layer_loss(pred: Prediction, target: Target, matching: MatchResult | None = None):
    """(cls, ce, dice) for one image and one decoder layer.

    ``cls`` is cross-entropy over all N predictions with the no-object class
    weighted by ``NO_OBJECT_WEIGHT`` (weighted mean); ``ce`` and ``dice``
    average over matched pairs only.
    """
    if matching is None:
        matching = match(pred, target)
    n, k1 = pred.class_logits.shape
    no_object = k1 - 1
    cls_target = torch.full((n,), no_object, dtype=torch.long, device=pred.class_logits.device)
    src = [i for i, _ in matching.pairs]
    tgt = [j for _, j in matching.pairs]
    if src:
        cls_target[src] = target.labels[tgt].to(torch.long)
    class_weight = torch.ones(k1, dtype=pred.class_logits.dtype, device=pred.class_logits.device)
    class_weight[no_object] = NO_OBJECT_WEIGHT
    cls = F.cross_entropy(pred.class_logits, cls_target, weight=class_weight)
    if not src:
        zero = pred.mask_logits.sum() * 0
        return cls, zero, zero
    logits = pred.mask_logits[src]
    gt = target.masks[tgt].to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none").flatten(1).mean(1).mean()
    p, g = logits.sigmoid().flatten(1), gt.flatten(1)
    dice = (1 - 2 * (p * g).sum(1) / (p.sum(1) + g.sum(1) + DICE_EPS)).mean()
    return cls, ce, dice


def total_loss(preds: list[Prediction], gt: Target, weights=LOSS_WEIGHTS) -> LossBreakdown:
    """Sum over decoder layers of ``w_cls*cls + w_ce*ce + w_dice*dice``, matching each layer independently."""
    if not preds:
        raise ValueError("total_loss needs at least one layer of predictions")
    w_cls, w_ce, w_dice = weights
    per_layer = []
    for pred in preds:
        cls, ce, dice = layer_loss(pred, gt)
        per_layer.append((w_cls * cls + w_ce * ce + w_dice * dice, cls, ce, dice))
    total = sum(x[0] for x in per_layer)
    return LossBreakdown(
        total=total,
        cls=sum(x[1] for x in per_layer),
        ce=sum(x[2] for x in per_layer),
        dice=sum(x[3] for x in per_layer),
        per_layer=per_layer,
    )


def batch_loss(preds: list[Prediction], targets: list[Target], weights=LOSS_WEIGHTS) -> LossBreakdown:
    """Mean of :func:`total_loss` over the images of a batched prediction list."""
    parts = []
    for i, tgt in enumerate(targets):
        image_preds = [Prediction(p.mask_logits[i], p.class_logits[i]) for p in preds]
        parts.append(total_loss(image_preds, tgt, weights))
    n = len(parts)
    per_layer = [tuple(sum(p.per_layer[l][q] for p in parts) / n for q in range(4)) for l in range(len(preds))]
    return LossBreakdown(
        total=sum(p.total for p in parts) / n,
        cls=sum(p.cls for p in parts) / n,
        ce=sum(p.ce for p in parts) / n,
        dice=sum(p.dice for p in parts) / n,
        per_layer=per_layer,
    )
