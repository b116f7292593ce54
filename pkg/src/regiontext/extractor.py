"""Class-agnostic foreground localization.

A center-heatmap proposal generator runs on every pyramid level; the top-k
peaks across levels become proposal boxes.  A 3-stage cascade then crops
region features, refines box coordinates with delta regression, and scores
foreground vs. background with a binary classifier per stage.  The final
objectness of a region is the mean of the three stage foreground
probabilities.  Overlapping boxes are pruned with hard or Gaussian soft
NMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .encoder import PYRAMID_LEVELS, FeaturePyramid
from .errors import ConfigError, ContractError
from .layers import Linear, Module, gather_rows
from .tensor import Tensor

CASCADE_IOU_THRESHOLDS = (0.5, 0.6, 0.7)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in image pixels, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ContractError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N, 4] and [M, 4] box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def clip_boxes(boxes: np.ndarray, width: float, height: float, min_side: float = 1.0) -> np.ndarray:
    """Clip to image bounds; collapsed boxes are re-opened to `min_side`."""
    out = boxes.copy()
    out[:, 0] = np.clip(out[:, 0], 0.0, width - min_side)
    out[:, 1] = np.clip(out[:, 1], 0.0, height - min_side)
    out[:, 2] = np.clip(out[:, 2], min_side, width)
    out[:, 3] = np.clip(out[:, 3], min_side, height)
    out[:, 2] = np.maximum(out[:, 2], out[:, 0] + min_side)
    out[:, 3] = np.maximum(out[:, 3], out[:, 1] + min_side)
    return out


def encode_deltas(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """(dx/w, dy/h, log scale) regression targets taking `src` onto `dst`."""
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    scx = src[:, 0] + 0.5 * sw
    scy = src[:, 1] + 0.5 * sh
    dw = dst[:, 2] - dst[:, 0]
    dh = dst[:, 3] - dst[:, 1]
    dcx = dst[:, 0] + 0.5 * dw
    dcy = dst[:, 1] + 0.5 * dh
    return np.stack(
        [(dcx - scx) / sw, (dcy - scy) / sh, np.log(dw / sw), np.log(dh / sh)], axis=1
    )


def decode_deltas(src: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    scx = src[:, 0] + 0.5 * sw
    scy = src[:, 1] + 0.5 * sh
    # clamp the log-scale terms so a wild early prediction cannot overflow
    dw = sw * np.exp(np.clip(deltas[:, 2], -4.0, 4.0))
    dh = sh * np.exp(np.clip(deltas[:, 3], -4.0, 4.0))
    cx = scx + np.clip(deltas[:, 0], -4.0, 4.0) * sw
    cy = scy + np.clip(deltas[:, 1], -4.0, 4.0) * sh
    return np.stack([cx - 0.5 * dw, cy - 0.5 * dh, cx + 0.5 * dw, cy + 0.5 * dh], axis=1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy hard NMS; returns kept indices in descending-score order."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep: list[int] = []
    while order:
        i = order.pop(0)
        keep.append(i)
        if not order:
            break
        ious = iou_matrix(boxes[[i]], boxes[order])[0]
        order = [j for j, v in zip(order, ious) if v <= iou_thresh]
    return keep


def soft_nms(
    boxes: np.ndarray,
    scores: np.ndarray,
    sigma: float = 0.5,
    score_floor: float = 1e-3,
) -> tuple[list[int], np.ndarray]:
    """Gaussian soft NMS: rescale competitors by exp(-IoU^2 / sigma).

    Returns (kept indices in selection order, rescored values for them);
    boxes decayed below `score_floor` are dropped.
    """
    scores = np.asarray(scores, dtype=np.float64).copy()
    alive = list(range(len(scores)))
    keep: list[int] = []
    kept_scores: list[float] = []
    while alive:
        local = int(np.argmax(scores[alive]))
        i = alive.pop(local)
        if scores[i] < score_floor:
            break
        keep.append(i)
        kept_scores.append(float(scores[i]))
        if not alive:
            break
        ious = iou_matrix(boxes[[i]], boxes[alive])[0]
        scores[alive] = scores[alive] * np.exp(-(ious * ious) / sigma)
        alive = [j for j in alive if scores[j] >= score_floor]
    return keep, np.asarray(kept_scores)


def assign_targets(
    boxes: np.ndarray, gt_boxes: np.ndarray, stage: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stage-wise foreground/background assignment.

    A box is foreground iff its best IoU with any ground-truth box reaches
    the stage threshold (0.5 / 0.6 / 0.7); the match is the argmax-IoU
    ground truth, ties broken toward the lowest index.  Returns
    (labels [N] with 1=fg 0=bg, matched ground-truth index [N], -1 for bg).
    """
    if stage not in (0, 1, 2):
        raise ContractError(f"assign_targets: stage must be 0, 1 or 2, got {stage}")
    n = len(boxes)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0 or n == 0:
        return labels, matched
    ious = iou_matrix(boxes, gt_boxes)
    best = ious.argmax(axis=1)  # argmax takes the first maximum: lowest gt index
    best_iou = ious[np.arange(n), best]
    fg = best_iou >= CASCADE_IOU_THRESHOLDS[stage]
    labels[fg] = 1
    matched[fg] = best[fg]
    return labels, matched


@dataclass(frozen=True)
class ExtractorConfig:
    proposals_train: int = 128
    proposals_test: int = 64
    roi_side: int = 5
    roi_hidden: int = 128
    level_base: float = 8.0  # sqrt(area) mapped to P_hi below this

    def __post_init__(self):
        if self.proposals_train <= 0 or self.proposals_test <= 0:
            raise ConfigError("proposal counts must be positive")
        if self.roi_side < 1:
            raise ConfigError("roi_side must be >= 1")


@dataclass
class Proposal:
    box: Box
    score: float
    level: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"proposal score {self.score} outside [0, 1]")


@dataclass
class ForegroundObject:
    box: Box
    stage_scores: tuple[float, float, float]

    @property
    def objectness(self) -> float:
        return float(sum(self.stage_scores)) / len(self.stage_scores)


def level_for_areas(areas: np.ndarray, base: float = 8.0) -> np.ndarray:
    """Pyramid level index per box: small boxes crop from finer maps."""
    scale = np.sqrt(np.maximum(areas, 1.0)) / base
    idx = np.floor(np.log2(np.maximum(scale, 1e-9)))
    return np.clip(idx, 0, len(PYRAMID_LEVELS) - 1).astype(np.intp)


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Splat radius keeping every shifted box above `min_overlap` IoU."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * a1 * c1)) / 2

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(b2 * b2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return max(0.0, min(r1, r2, r3))


def splat_heatmap(gt_boxes: np.ndarray, side_h: int, side_w: int, stride: float) -> np.ndarray:
    """Gaussian center-heatmap target on one level; exact 1.0 at centers."""
    heat = np.zeros((side_h, side_w), dtype=np.float64)
    ys, xs = np.mgrid[0:side_h, 0:side_w]
    for box in gt_boxes:
        w = (box[2] - box[0]) / stride
        h = (box[3] - box[1]) / stride
        cx = (box[0] + box[2]) / 2.0 / stride - 0.5
        cy = (box[1] + box[3]) / 2.0 / stride - 0.5
        px = int(np.clip(round(cx), 0, side_w - 1))
        py = int(np.clip(round(cy), 0, side_h - 1))
        radius = max(gaussian_radius(h, w), 0.0)
        sig = max(radius / 3.0, 1e-6)
        g = np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2.0 * sig * sig))
        heat = np.maximum(heat, g)
        heat[py, px] = 1.0
    return heat


def local_peaks(heat: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3 local maxima (ties count as peaks)."""
    h, w = heat.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = heat
    best = heat.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            best = np.maximum(best, padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w])
    return heat >= best


class ProposalHead(Module):
    """Shared per-level head: center heatmap logit + size regression."""

    def __init__(self, rng, channels: int):
        self.trunk = Linear(rng, channels, channels)
        self.heat = Linear(rng, channels, 1)
        self.size = Linear(rng, channels, 2)

    def __call__(self, level_feat: Tensor) -> tuple[Tensor, Tensor]:
        c, h, w = level_feat.shape
        tokens = T.reshape(T.transpose(level_feat, (1, 2, 0)), (h * w, c))
        hidden = T.gelu(self.trunk(tokens))
        heat = T.reshape(self.heat(hidden), (h, w))
        size = T.reshape(self.size(hidden), (h, w, 2))
        return heat, size


class StageHead(Module):
    """One cascade stage: crop features to (class logits, box deltas)."""

    def __init__(self, rng, channels: int, side: int, hidden: int):
        self.fc = Linear(rng, channels * side * side, hidden)
        self.cls = Linear(rng, hidden, 2)
        self.reg = Linear(rng, hidden, 4)

    def __call__(self, crops: Tensor) -> tuple[Tensor, Tensor]:
        r = crops.shape[0]
        flat = T.reshape(crops, (r, int(np.prod(crops.shape[1:]))))
        hidden = T.gelu(self.fc(flat))
        return self.cls(hidden), self.reg(hidden)


class RegionExtractor(Module):
    """Proposal generator plus 3-stage cascade refinement."""

    def __init__(self, cfg: ExtractorConfig, channels: int, rng: np.random.Generator):
        self.cfg = cfg
        self.channels = channels
        self.proposal_head = ProposalHead(rng, channels)
        self.stages = [
            StageHead(rng, channels, cfg.roi_side, cfg.roi_hidden) for _ in CASCADE_IOU_THRESHOLDS
        ]

    # -- proposals ---------------------------------------------------------

    def proposal_maps(self, pyr: FeaturePyramid) -> dict[str, tuple[Tensor, Tensor]]:
        return {name: self.proposal_head(pyr.level(name)) for name in PYRAMID_LEVELS}

    def proposal_arrays(
        self,
        level_maps: list[tuple[np.ndarray, np.ndarray, float]],
        k: int,
        image_hw: tuple[float, float],
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Decode top-k peak boxes from raw per-level (heat logit, size, stride).

        Returns (boxes [k', 4], scores [k'], level indices [k']) sorted by
        descending score, ties broken by level-then-position order.
        """
        if k <= 0:
            raise ConfigError(f"generate_proposals: k must be positive, got {k}")
        img_h, img_w = image_hw
        all_boxes = []
        all_scores = []
        all_levels = []
        for li, (heat_logit, size, stride) in enumerate(level_maps):
            heat = expit(heat_logit)
            peaks = local_peaks(heat)
            py, px = np.nonzero(peaks)
            if py.size == 0:
                continue
            scores = heat[py, px]
            # size head regresses log-pixels; clamp to [1, max(img side)] px
            max_log = np.log(max(img_h, img_w))
            wh = np.exp(np.clip(size[py, px, :], 0.0, max_log))
            cx = (px + 0.5) * stride
            cy = (py + 0.5) * stride
            boxes = np.stack(
                [cx - wh[:, 0] / 2, cy - wh[:, 1] / 2, cx + wh[:, 0] / 2, cy + wh[:, 1] / 2],
                axis=1,
            )
            all_boxes.append(clip_boxes(boxes, img_w, img_h))
            all_scores.append(scores)
            all_levels.append(np.full(py.size, li, dtype=np.intp))
        if not all_boxes:
            return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.intp)
        boxes = np.concatenate(all_boxes)
        scores = np.concatenate(all_scores)
        levels = np.concatenate(all_levels)
        order = np.argsort(-scores, kind="stable")[:k]
        return boxes[order], scores[order], levels[order]

    def generate_proposals(
        self,
        pyr: FeaturePyramid,
        k: int,
        maps: dict[str, tuple[Tensor, Tensor]] | None = None,
        image_hw: tuple[float, float] | None = None,
    ) -> list[Proposal]:
        """Top-k heatmap peaks across levels, each with a decoded size box."""
        if maps is None:
            with T.no_grad():
                maps = self.proposal_maps(pyr)
        if image_hw is None:
            base = pyr.level("P_base")
            image_hw = (
                base.shape[1] * pyr.stride("P_base"),
                base.shape[2] * pyr.stride("P_base"),
            )
        level_maps = [
            (maps[name][0].data, maps[name][1].data, pyr.stride(name))
            for name in PYRAMID_LEVELS
        ]
        boxes, scores, levels = self.proposal_arrays(level_maps, k, image_hw)
        return [
            Proposal(box=Box(*map(float, b)), score=float(s), level=PYRAMID_LEVELS[li])
            for b, s, li in zip(boxes, scores, levels)
        ]

    # -- region features ---------------------------------------------------

    def crop_regions(self, pyr: FeaturePyramid, boxes: np.ndarray, side: int) -> Tensor:
        """Crop each box from its area-assigned pyramid level to [R, C, side, side]."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        if np.any(areas < 1.0 - 1e-9):  # tolerance: clipped 1-px sides can round below 1.0
            raise ContractError("crop_regions: degenerate box (area < 1 px^2); skip it upstream")
        levels = level_for_areas(areas, self.cfg.level_base)
        pieces = []
        owners = []
        for li, name in enumerate(PYRAMID_LEVELS):
            sel = np.flatnonzero(levels == li)
            if sel.size == 0:
                continue
            pieces.append(T.roi_align(pyr.level(name), boxes[sel], side, pyr.stride(name)))
            owners.append(sel)
        stacked = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
        order = np.concatenate(owners)
        if np.array_equal(order, np.arange(len(order))):
            return stacked
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return gather_rows(stacked, inverse)

    def crop_regions_batch(
        self,
        level_feats: dict[str, Tensor],
        strides: dict[str, float],
        boxes: np.ndarray,
        image_idx: np.ndarray,
        side: int,
    ) -> Tensor:
        """Batched crop_regions: levels are [B, C, H, W], boxes carry image indices."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        image_idx = np.asarray(image_idx, dtype=np.float64).reshape(-1, 1)
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        if np.any(areas < 1.0 - 1e-9):
            raise ContractError("crop_regions: degenerate box (area < 1 px^2); skip it upstream")
        levels = level_for_areas(areas, self.cfg.level_base)
        boxes5 = np.concatenate([image_idx, boxes], axis=1)
        pieces = []
        owners = []
        for li, name in enumerate(PYRAMID_LEVELS):
            sel = np.flatnonzero(levels == li)
            if sel.size == 0:
                continue
            pieces.append(T.roi_align(level_feats[name], boxes5[sel], side, strides[name]))
            owners.append(sel)
        stacked = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
        order = np.concatenate(owners)
        if np.array_equal(order, np.arange(len(order))):
            return stacked
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return gather_rows(stacked, inverse)

    # -- cascade -----------------------------------------------------------

    def run_cascade(
        self, pyr: FeaturePyramid, boxes: np.ndarray, image_hw: tuple[float, float]
    ) -> tuple[np.ndarray, np.ndarray, list[Tensor], list[Tensor], list[np.ndarray]]:
        """Refine boxes through all stages.

        Returns (final boxes, stage fg-probabilities [R, 3], per-stage class
        logits, per-stage delta tensors, per-stage input boxes).
        """
        img_h, img_w = image_hw
        current = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        fg_probs = np.zeros((len(current), len(self.stages)))
        cls_list: list[Tensor] = []
        reg_list: list[Tensor] = []
        input_boxes: list[np.ndarray] = []
        for s, head in enumerate(self.stages):
            input_boxes.append(current)
            crops = self.crop_regions(pyr, current, self.cfg.roi_side)
            cls_logits, deltas = head(crops)
            cls_list.append(cls_logits)
            reg_list.append(deltas)
            z = cls_logits.data
            zmax = z.max(axis=1, keepdims=True)
            e = np.exp(z - zmax)
            fg_probs[:, s] = e[:, 1] / e.sum(axis=1)
            current = clip_boxes(decode_deltas(current, deltas.data), img_w, img_h)
        return current, fg_probs, cls_list, reg_list, input_boxes

    def detect(
        self, pyr: FeaturePyramid, k: int, image_hw: tuple[float, float]
    ) -> list[ForegroundObject]:
        """Inference path: proposals, cascade, mean-of-stages objectness."""
        with T.no_grad():
            proposals = self.generate_proposals(pyr, k, image_hw=image_hw)
            if not proposals:
                return []
            boxes = np.stack([p.box.as_array() for p in proposals])
            final, fg_probs, _, _, _ = self.run_cascade(pyr, boxes, image_hw)
        return [
            ForegroundObject(box=Box(*map(float, b)), stage_scores=tuple(map(float, sc)))
            for b, sc in zip(final, fg_probs)
        ]
