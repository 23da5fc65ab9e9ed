"""Toy text-conditioned anchor-free detector.

Backbone: stem plus three strided conv stages (strides 8 and 16 are used).
Neck: a two-level path aggregation network. Text fusion: every vocabulary
embedding attends over pooled multi-scale image tokens and is updated
residually. Each entry is updated on its own, so swapping one entry leaves
every other similarity column untouched. Head: shared conv tower emitting
objectness, an object embedding and a ``4 x bins`` box distribution per
anchor point.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..geometry import Box, Detection, nms_indices
from .assign import assign_regions
from .losses import LossBreakdown, contrastive_loss, dfl_loss, iou_loss, similarity_matrix


class ConfigurationError(ValueError):
    pass


@dataclass
class DetectorConfig:
    input_size: int = 160
    embed_dim: int = 64
    bins: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 96)
    neck_width: int = 64
    strides: tuple[int, ...] = (8, 16)
    center_radius: float = 2.5
    iou_kind: str = "ciou"
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    objectness_weight: float = 1.0
    alpha_init: float = 1.0 / 0.07
    beta_init: float = 0.0
    pre_nms_topk: int = 300
    max_detections: int = 100
    nms_iou: float = 0.7

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        self.loss_weights = tuple(self.loss_weights)
        if self.alpha_init <= 0:
            raise ConfigurationError("alpha_init must be positive")
        if self.strides != (8, 16) or len(self.widths) != 4:
            raise ConfigurationError("the toy network has four stages and outputs strides (8, 16)")
        if self.input_size % 16:
            raise ConfigurationError("input_size must be a multiple of 16")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _conv(c_in, c_out, stride=1, k=3):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, stride, k // 2, bias=False),
        nn.GroupNorm(min(8, c_out), c_out),
        nn.SiLU(inplace=True),
    )


class ImagePoolingAttention(nn.Module):
    """Residual update of each text embedding from pooled image tokens."""

    def __init__(self, channels: Sequence[int], dim: int, pool: int = 3):
        super().__init__()
        self.pool = pool
        self.proj = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in channels)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.gate = nn.Parameter(torch.zeros(1))

    def forward(self, feats: Sequence[torch.Tensor], text: torch.Tensor) -> torch.Tensor:
        tokens = torch.cat(
            [F.adaptive_avg_pool2d(p(f), self.pool).flatten(2) for p, f in zip(self.proj, feats)], dim=2
        ).transpose(1, 2)
        q, k, v = self.q(text), self.k(tokens), self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        return text + self.gate * self.out(attn @ v)


@dataclass
class ImageSide:
    """Vocabulary-independent part of a forward pass."""

    feats: list
    obj_logits: torch.Tensor  # (N, K)
    embeddings: torch.Tensor  # (N, K, D)
    box_logits: torch.Tensor  # (N, K, 4, B)
    boxes: torch.Tensor  # (N, K, 4) xyxy, input pixels


@dataclass
class HeadOutput:
    image: ImageSide
    text: torch.Tensor  # (N, V, D) fused text embeddings
    similarities: torch.Tensor  # (N, K, V)

    @property
    def obj_logits(self):
        return self.image.obj_logits

    @property
    def boxes(self):
        return self.image.boxes

    def scores(self) -> torch.Tensor:
        """Per-entry confidences: objectness times the softmax over entries."""
        return torch.sigmoid(self.image.obj_logits)[..., None] * torch.softmax(self.similarities, dim=-1)


class ToyDetector(nn.Module):
    def __init__(self, config: Optional[DetectorConfig] = None):
        super().__init__()
        self.config = cfg = config or DetectorConfig()
        w0, w1, w2, w3 = cfg.widths
        self.stem = _conv(3, w0, 2)
        self.stage1 = nn.Sequential(_conv(w0, w1, 2), _conv(w1, w1))
        self.stage2 = nn.Sequential(_conv(w1, w2, 2), _conv(w2, w2))
        self.stage3 = nn.Sequential(_conv(w2, w3, 2), _conv(w3, w3))
        n = cfg.neck_width
        self.lat3 = nn.Conv2d(w2, n, 1)
        self.lat4 = nn.Conv2d(w3, n, 1)
        self.td3 = _conv(n, n)
        self.down = _conv(n, n, 2)
        self.bu4 = _conv(n, n)
        self.fusion = ImagePoolingAttention([n, n], cfg.embed_dim)
        self.tower = nn.Sequential(_conv(n, n), _conv(n, n))
        self.obj_head = nn.Conv2d(n, 1, 1)
        self.emb_head = nn.Conv2d(n, cfg.embed_dim, 1)
        self.box_head = nn.Conv2d(n, 4 * cfg.bins, 1)
        nn.init.constant_(self.obj_head.bias, -math.log(99.0))
        self.log_alpha = nn.Parameter(torch.tensor(math.log(cfg.alpha_init)))
        self.beta = nn.Parameter(torch.tensor(float(cfg.beta_init)))
        anchors, strides = self._make_anchors(cfg.input_size, cfg.strides)
        self.register_buffer("anchors", anchors, persistent=False)
        self.register_buffer("anchor_strides", strides, persistent=False)
        self.register_buffer("bin_values", torch.arange(cfg.bins, dtype=torch.float32), persistent=False)

    @staticmethod
    def _make_anchors(size: int, strides: Sequence[int]):
        pts, st = [], []
        for s in strides:
            g = size // s
            c = (torch.arange(g, dtype=torch.float32) + 0.5) * s
            yy, xx = torch.meshgrid(c, c, indexing="ij")
            pts.append(torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1))
            st.append(torch.full((g * g,), float(s)))
        return torch.cat(pts), torch.cat(st)

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    @property
    def num_regions(self) -> int:
        return self.anchors.shape[0]

    def image_side(self, images: torch.Tensor) -> ImageSide:
        cfg = self.config
        if images.shape[-2:] != (cfg.input_size, cfg.input_size):
            raise ConfigurationError(f"expected {cfg.input_size}px inputs, got {tuple(images.shape[-2:])}")
        x = self.stem(images)
        c3 = self.stage2(self.stage1(x))
        c4 = self.stage3(c3)
        p4 = self.lat4(c4)
        n3 = self.td3(self.lat3(c3) + F.interpolate(p4, scale_factor=2.0, mode="nearest"))
        n4 = self.bu4(p4 + self.down(n3))
        obj, emb, box = [], [], []
        for f in (n3, n4):
            t = self.tower(f)
            obj.append(self.obj_head(t).flatten(2))
            emb.append(self.emb_head(t).flatten(2))
            box.append(self.box_head(t).flatten(2))
        n = images.shape[0]
        obj_logits = torch.cat(obj, 2)[:, 0]
        embeddings = torch.cat(emb, 2).transpose(1, 2)
        box_logits = torch.cat(box, 2).transpose(1, 2).reshape(n, -1, 4, cfg.bins)
        boxes = self.decode(box_logits)
        return ImageSide([n3, n4], obj_logits, embeddings, box_logits, boxes)

    def decode(self, box_logits: torch.Tensor) -> torch.Tensor:
        dist = torch.softmax(box_logits, dim=-1) @ self.bin_values.to(box_logits.dtype)
        dist = dist * self.anchor_strides[:, None].to(dist.dtype)
        a = self.anchors.to(dist.dtype)
        return torch.cat([a - dist[..., :2], a + dist[..., 2:]], dim=-1)

    def score(self, side: ImageSide, text: torch.Tensor) -> HeadOutput:
        if text.shape[-1] != self.config.embed_dim:
            raise ConfigurationError(
                f"vocabulary dimension {text.shape[-1]} != network embedding dimension {self.config.embed_dim}"
            )
        text = text.to(side.embeddings.dtype)
        if text.dim() == 2:
            text = text.unsqueeze(0).expand(side.embeddings.shape[0], -1, -1)
        fused = self.fusion(side.feats, text)
        sims = similarity_matrix(side.embeddings, fused, self.alpha, self.beta)
        return HeadOutput(side, fused, sims)

    def forward(self, images: torch.Tensor, text: torch.Tensor) -> HeadOutput:
        return self.score(self.image_side(images), text)


# --------------------------------------------------------------------------
# loss


@dataclass
class ImageTargets:
    """Targets for one image in input-pixel coordinates."""

    boxes: torch.Tensor  # (G, 4)
    entries: torch.Tensor  # (G,) vocabulary indices
    lambda_indicator: float = 1.0


def detection_loss(model: ToyDetector, out: HeadOutput, targets: Sequence[ImageTargets],
                   stats: Optional[dict] = None) -> LossBreakdown:
    """Batch-averaged ``L_con + lambda * (L_iou + L_dfl)``."""
    cfg = model.config
    w_con, w_iou, w_dfl = cfg.loss_weights
    con_t, iou_t, dfl_t, totals = [], [], [], []
    n_assigned = 0
    for i, tgt in enumerate(targets):
        gt = tgt.boxes.to(out.boxes.dtype)
        assign = assign_regions(model.anchors, model.anchor_strides, gt, cfg.center_radius)
        pos = assign >= 0
        n_assigned += int(pos.sum())
        if gt.shape[0]:
            region_targets = torch.where(pos, tgt.entries.to(assign.device)[assign.clamp(min=0)], assign)
        else:
            region_targets = assign
        l_con = contrastive_loss(out.similarities[i], region_targets, out.obj_logits[i], cfg.objectness_weight)
        if pos.any():
            matched = gt[assign[pos]]
            l_iou = iou_loss(out.boxes[i][pos], matched, cfg.iou_kind)
            a = model.anchors[pos].to(matched.dtype)
            s = model.anchor_strides[pos].to(matched.dtype)[:, None]
            offsets = torch.cat([a - matched[:, :2], matched[:, 2:] - a], dim=1) / s
            l_dfl = dfl_loss(out.image.box_logits[i][pos], offsets, stats)
        else:
            l_iou = out.boxes[i].sum() * 0.0
            l_dfl = out.image.box_logits[i].sum() * 0.0
        lam = float(tgt.lambda_indicator)
        con_t.append(l_con)
        iou_t.append(l_iou)
        dfl_t.append(l_dfl)
        totals.append(w_con * l_con + lam * (w_iou * l_iou + w_dfl * l_dfl))
    lam_mean = float(np.mean([t.lambda_indicator for t in targets])) if targets else 1.0
    return LossBreakdown(
        torch.stack(con_t).mean(),
        torch.stack(iou_t).mean(),
        torch.stack(dfl_t).mean(),
        lam_mean,
        torch.stack(totals).mean(),
        n_assigned,
    )


# --------------------------------------------------------------------------
# inference


def postprocess(out: HeadOutput, index: int, config: DetectorConfig, scale=(1.0, 1.0),
                image_size: Optional[tuple[int, int]] = None) -> list[Detection]:
    """Detections for one image of a batch, boxes rescaled by ``scale`` (sx, sy)."""
    with torch.no_grad():
        probs = out.scores()[index].double()
        conf, cls = probs.max(dim=-1)
        k = min(config.pre_nms_topk, conf.numel())
        top = torch.topk(conf, k).indices
        boxes = out.boxes[index][top].double().cpu().numpy()
        conf_np = conf[top].cpu().numpy()
        cls_np = cls[top].cpu().numpy()
        probs_np = probs[top].cpu().numpy()
        emb_np = out.image.embeddings[index][top].double().cpu().numpy()
    sx, sy = scale
    boxes = boxes * np.array([sx, sy, sx, sy])
    if image_size is not None:
        h, w = image_size
        boxes = np.clip(boxes, 0.0, [w, h, w, h])
    keep = nms_indices(boxes, conf_np, cls_np, config.nms_iou)[: config.max_detections]
    return [
        Detection(
            Box.from_array(boxes[j]),
            int(cls_np[j]),
            float(np.clip(conf_np[j], 0.0, 1.0)),
            embedding=emb_np[j],
            scores=probs_np[j],
        )
        for j in keep
    ]


def prepare_images(images: Sequence[np.ndarray], size: int) -> tuple[torch.Tensor, list]:
    """Resize HxWx3 uint8 images to ``size`` and stack into an (N, 3, S, S) tensor.

    Returns the tensor and per-image ``(sx, sy)`` factors mapping input pixels
    back to the original image.
    """
    from PIL import Image

    arrs, scales = [], []
    for im in images:
        h, w = im.shape[:2]
        if (h, w) != (size, size):
            im = np.asarray(Image.fromarray(np.ascontiguousarray(im, dtype=np.uint8)).resize((size, size), Image.BILINEAR))
        arrs.append(im)
        scales.append((w / size, h / size))
    batch = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).float().div_(255.0)
    return batch, scales


def predict(model: ToyDetector, images: Sequence[np.ndarray], text: np.ndarray) -> list[list[Detection]]:
    """Detections in original image coordinates for a batch of uint8 images."""
    was_training = model.training
    model.eval()
    try:
        batch, scales = prepare_images(images, model.config.input_size)
        with torch.no_grad():
            out = model(batch, torch.as_tensor(text, dtype=torch.float32))
        return [
            postprocess(out, i, model.config, scales[i], images[i].shape[:2]) for i in range(len(images))
        ]
    finally:
        model.train(was_training)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ToyDetector, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "config": asdict(model.config),
            "fingerprint": model.config.fingerprint(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[ToyDetector, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = DetectorConfig(**blob["config"])
    if cfg.fingerprint() != blob["fingerprint"]:
        raise ConfigurationError(f"{path}: config fingerprint mismatch")
    model = ToyDetector(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})
