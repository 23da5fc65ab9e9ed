"""Center-sampling region assignment."""

from __future__ import annotations

import torch


def assign_regions(
    anchors: torch.Tensor,
    strides: torch.Tensor,
    gt_boxes: torch.Tensor,
    radius: float = 2.5,
) -> torch.Tensor:
    """Ground-truth index for every anchor point, -1 for background.

    An anchor is a candidate for a box when it lies inside the box and within
    ``radius * stride`` of the box center. Among candidates the box with the
    smallest area (lowest cost) wins. A box that captured no anchor takes its
    nearest anchor so every box is trained.
    """
    k = anchors.shape[0]
    out = torch.full((k,), -1, dtype=torch.long, device=anchors.device)
    if gt_boxes.numel() == 0:
        return out
    ax, ay = anchors[:, 0:1], anchors[:, 1:2]
    x0, y0, x1, y1 = (gt_boxes[:, i][None] for i in range(4))
    inside = (ax >= x0) & (ax <= x1) & (ay >= y0) & (ay <= y1)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    r = radius * strides[:, None].to(anchors.dtype)
    near = ((ax - cx).abs() <= r) & ((ay - cy).abs() <= r)
    cand = inside & near
    area = ((x1 - x0) * (y1 - y0)).expand(k, -1)
    cost = torch.where(cand, area, torch.full_like(area, float("inf")))
    best_cost, best = cost.min(dim=1)
    out = torch.where(torch.isfinite(best_cost), best, out)

    claimed = torch.zeros(gt_boxes.shape[0], dtype=torch.bool, device=anchors.device)
    claimed[out[out >= 0]] = True
    for g in torch.nonzero(~claimed).flatten().tolist():
        d2 = (anchors[:, 0] - cx[0, g]) ** 2 + (anchors[:, 1] - cy[0, g]) ** 2
        out[int(torch.argmin(d2))] = g
    return out
