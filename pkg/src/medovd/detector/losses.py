"""Region-text contrastive, IoU and distribution focal losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

EPS = 1e-9


def similarity(e, w, alpha: float = 1.0, beta: float = 0.0) -> float:
    """Scaled cosine similarity ``alpha * <e/|e|, w/|w|> + beta`` of two vectors."""
    e = torch.as_tensor(e, dtype=torch.float64).reshape(-1)
    w = torch.as_tensor(w, dtype=torch.float64).reshape(-1)
    ne, nw = torch.linalg.vector_norm(e), torch.linalg.vector_norm(w)
    if ne == 0 or nw == 0:
        raise ValueError("similarity is undefined for zero vectors")
    return float(alpha * torch.dot(e / ne, w / nw) + beta)


def similarity_matrix(embeddings: torch.Tensor, text: torch.Tensor, alpha, beta) -> torch.Tensor:
    """Pairwise scaled cosine similarity.

    ``embeddings`` is (..., K, D) and ``text`` is (..., V, D); the result is
    (..., K, V).
    """
    e = F.normalize(embeddings, dim=-1, eps=EPS)
    w = F.normalize(text, dim=-1, eps=EPS)
    return alpha * e @ w.transpose(-1, -2) + beta


def contrastive_loss(
    similarities: torch.Tensor,
    targets: torch.Tensor,
    objectness_logits: Optional[torch.Tensor] = None,
    objectness_weight: float = 1.0,
    stats: Optional[dict] = None,
) -> torch.Tensor:
    """Cross-entropy of each assigned region's similarity row against its entry.

    ``targets`` holds one vocabulary index per region, or -1 for regions
    without an assignment. Those regions only enter through the optional
    objectness term, a binary cross-entropy over all regions (target 1 for
    assigned ones). With no assigned regions and no objectness term the loss
    is a graph-connected zero and ``stats["no_assigned"]`` is incremented.
    """
    targets = torch.as_tensor(targets, dtype=torch.long, device=similarities.device)
    assigned = targets >= 0
    if assigned.any():
        loss = F.cross_entropy(similarities[assigned], targets[assigned])
    else:
        loss = similarities.sum() * 0.0
        if stats is not None:
            stats["no_assigned"] = stats.get("no_assigned", 0) + 1
    if objectness_logits is not None:
        obj = F.binary_cross_entropy_with_logits(
            objectness_logits, assigned.to(objectness_logits.dtype)
        )
        loss = loss + objectness_weight * obj
    return loss


def box_iou_pairs(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    lt = torch.maximum(pred[..., :2], target[..., :2])
    rb = torch.minimum(pred[..., 2:], target[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_p = (pred[..., 2] - pred[..., 0]) * (pred[..., 3] - pred[..., 1])
    area_t = (target[..., 2] - target[..., 0]) * (target[..., 3] - target[..., 1])
    return inter / (area_p + area_t - inter + EPS)


def iou_loss(pred: torch.Tensor, target: torch.Tensor, kind: str = "ciou") -> torch.Tensor:
    """Mean ``1 - IoU`` (plain) or CIoU loss over matched box pairs; 0 without pairs."""
    if pred.numel() == 0:
        return pred.sum() * 0.0
    iou = box_iou_pairs(pred, target)
    if kind == "iou":
        return (1.0 - iou).mean()
    if kind != "ciou":
        raise ValueError(f"unknown IoU loss {kind!r}")
    # enclosing box diagonal and center distance
    c_lt = torch.minimum(pred[..., :2], target[..., :2])
    c_rb = torch.maximum(pred[..., 2:], target[..., 2:])
    c2 = ((c_rb - c_lt) ** 2).sum(-1) + EPS
    rho2 = (((pred[..., :2] + pred[..., 2:]) - (target[..., :2] + target[..., 2:])) ** 2).sum(-1) / 4
    wp = pred[..., 2] - pred[..., 0]
    hp = pred[..., 3] - pred[..., 1]
    wt = target[..., 2] - target[..., 0]
    ht = target[..., 3] - target[..., 1]
    v = (4 / math.pi**2) * (torch.atan(wt / (ht + EPS)) - torch.atan(wp / (hp + EPS))) ** 2
    # trade-off weight kept in the graph so the gradient is that of the value
    a = v / (v - iou + 1 + EPS)
    return (1.0 - iou + rho2 / c2 + a * v).mean()


def dfl_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    stats: Optional[dict] = None,
) -> torch.Tensor:
    """Distribution focal loss over ``B`` bins.

    ``logits`` is (N, 4, B), ``target`` the continuous per-side offsets (N, 4)
    in bin units. Each offset is split between its two neighbouring bins
    with linear weights. Offsets outside [0, B-1] are clamped and counted
    in ``stats["dfl_clamped"]``.
    """
    if logits.numel() == 0:
        return logits.sum() * 0.0
    n_bins = logits.shape[-1]
    out_of_range = (target < 0) | (target > n_bins - 1)
    if stats is not None:
        stats["dfl_clamped"] = stats.get("dfl_clamped", 0) + int(out_of_range.sum())
    t = target.clamp(0, n_bins - 1)
    left = t.floor().long().clamp(max=n_bins - 2)
    w_right = t - left.to(t.dtype)
    w_left = 1.0 - w_right
    logp = F.log_softmax(logits, dim=-1)
    ce_left = -logp.gather(-1, left.unsqueeze(-1)).squeeze(-1)
    ce_right = -logp.gather(-1, (left + 1).unsqueeze(-1)).squeeze(-1)
    return (w_left * ce_left + w_right * ce_right).mean()


@dataclass
class LossBreakdown:
    contrastive: torch.Tensor
    iou_loss: torch.Tensor
    dfl: torch.Tensor
    lambda_indicator: float
    total: torch.Tensor
    n_assigned: int = 0

    def as_floats(self) -> dict:
        return {
            "contrastive": float(self.contrastive.detach()),
            "iou": float(self.iou_loss.detach()),
            "dfl": float(self.dfl.detach()),
            "lambda": float(self.lambda_indicator),
            "total": float(self.total.detach()),
        }


def total_loss(
    contrastive: torch.Tensor,
    iou: torch.Tensor,
    dfl: torch.Tensor,
    lambda_indicator: float = 1.0,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LossBreakdown:
    """``w_con * L_con + lambda * (w_iou * L_iou + w_dfl * L_dfl)``.

    ``lambda_indicator`` is 1 for samples with reliable boxes and 0 for
    weakly labeled image-text samples.
    """
    if lambda_indicator not in (0, 1):
        raise ValueError("lambda_indicator must be 0 or 1")
    w_con, w_iou, w_dfl = weights
    total = w_con * contrastive + lambda_indicator * (w_iou * iou + w_dfl * dfl)
    return LossBreakdown(contrastive, iou, dfl, lambda_indicator, total)
