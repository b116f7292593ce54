"""Evaluation stack: detection AP/AR, METEOR, dense-captioning mAP.

Detection follows the usual protocol: per class, predictions are sorted by
score and greedily matched to the unmatched ground truth of highest IoU at
each threshold in 0.50:0.05:0.95; AP uses 101-point interpolation and is
averaged over thresholds and classes.  Since descriptions are free-form,
predictions whose text is not in the configured class list are dropped
before scoring.  Classes without ground truth are excluded from the means.

METEOR here is the exact-match variant (no stemming or synonymy): unigram
alignment maximizing matches and then minimizing chunks, F-mean
P*R / (0.9*P + 0.1*R), fragmentation penalty 0.5 * (chunks / matches)^3.

Dense captioning averages class-agnostic APs over the 5 x 6 grid of IoU
thresholds {.3,.4,.5,.6,.7} and METEOR thresholds {0,.05,.1,.15,.2,.25};
a prediction matches an unmatched region only if both thresholds pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .extractor import Box, iou_matrix
from .tokenizer import normalize_text

DETECTION_IOU_THRESHOLDS = tuple(np.arange(0.5, 0.96, 0.05).round(2))


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    box: tuple[float, float, float, float]
    text: str
    score: float
    task_id: int = 1

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"prediction score {self.score} outside [0, 1]")
        Box(*self.box)  # validates geometry


@dataclass(frozen=True)
class GroundTruthRegion:
    image_id: str
    box: tuple[float, float, float, float]
    text: str


@dataclass(frozen=True)
class ThresholdGrid:
    iou_thresholds: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    meteor_thresholds: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)

    def __post_init__(self):
        if len(self.iou_thresholds) * len(self.meteor_thresholds) != 30:
            raise ConfigError(
                f"threshold grid must have 5 x 6 = 30 cells, got "
                f"{len(self.iou_thresholds)} x {len(self.meteor_thresholds)}"
            )


# ---------------------------------------------------------------------------
# shared AP machinery
# ---------------------------------------------------------------------------


def interpolated_ap(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered true-positive flags."""
    if n_gt <= 0:
        raise ContractError("interpolated_ap: needs at least one ground truth")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags.astype(np.float64))
    fp = np.cumsum((~tp_flags).astype(np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.sum() / 101.0)


def _greedy_match_flags(
    order: list[int],
    pred_image: list[str],
    ious_by_pred: list[dict[int, float]],
    gt_by_image: dict[str, list[int]],
    accept,
) -> np.ndarray:
    """Greedy matching in score order; `accept(pred_idx, gt_idx, iou)` gates a pair.

    Among acceptable unmatched ground truths the one with highest IoU wins,
    ties toward the lowest ground-truth index.
    """
    matched_gt: set[int] = set()
    flags = np.zeros(len(order), dtype=bool)
    for rank, pi in enumerate(order):
        best_gt = -1
        best_iou = -1.0
        for gi in gt_by_image.get(pred_image[pi], []):
            if gi in matched_gt:
                continue
            v = ious_by_pred[pi].get(gi, 0.0)
            if v > best_iou and accept(pi, gi, v):
                best_iou = v
                best_gt = gi
        if best_gt >= 0:
            matched_gt.add(best_gt)
            flags[rank] = True
    return flags


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def detection_ap(
    preds: list[PredictionRecord],
    gts: list[GroundTruthRegion],
    classes: list[str],
    iou_thresholds: tuple[float, ...] = DETECTION_IOU_THRESHOLDS,
    recall_dets: tuple[int, ...] = (1, 10),
) -> dict:
    """Class-aware COCO-style AP and AR over the given IoU thresholds.

    Returns {"ap", "ap50", "ap75", "ar1", "ar10", "per_class"}.  Predicted
    texts are normalized and must equal a class name to count; other
    predictions are dropped (open-set filtering).  Classes with no ground
    truth are excluded from every mean; with no valid class at all the
    metrics are 0.
    """
    classes = [normalize_text(c) for c in classes]
    if len(set(classes)) != len(classes):
        raise ConfigError("duplicate class names")
    preds = [p for p in preds if normalize_text(p.text) in set(classes)]

    per_class_ap: dict[str, float] = {}
    ap_at: dict[float, list[float]] = {round(t, 2): [] for t in iou_thresholds}
    recalls: dict[int, list[float]] = {n: [] for n in recall_dets}

    for cls in classes:
        cls_preds = [p for p in preds if normalize_text(p.text) == cls]
        cls_gts = [g for g in gts if normalize_text(g.text) == cls]
        if not cls_gts:
            continue  # AP undefined for this class
        order = sorted(
            range(len(cls_preds)), key=lambda i: (-cls_preds[i].score, i)
        )
        pred_image = [p.image_id for p in cls_preds]
        gt_by_image: dict[str, list[int]] = {}
        for gi, g in enumerate(cls_gts):
            gt_by_image.setdefault(g.image_id, []).append(gi)
        ious_by_pred: list[dict[int, float]] = []
        for p in cls_preds:
            row: dict[int, float] = {}
            for gi in gt_by_image.get(p.image_id, []):
                row[gi] = float(
                    iou_matrix(
                        np.asarray([p.box]), np.asarray([cls_gts[gi].box])
                    )[0, 0]
                )
            ious_by_pred.append(row)

        taus = []
        for tau in iou_thresholds:
            flags = _greedy_match_flags(
                order, pred_image, ious_by_pred, gt_by_image,
                lambda pi, gi, v, tau=tau: v >= tau,
            )
            ap = interpolated_ap(flags, len(cls_gts))
            taus.append(ap)
            ap_at[round(tau, 2)].append(ap)
            for n in recall_dets:
                capped = _cap_per_image(order, pred_image, n)
                cflags = _greedy_match_flags(
                    capped, pred_image, ious_by_pred, gt_by_image,
                    lambda pi, gi, v, tau=tau: v >= tau,
                )
                recalls[n].append(float(cflags.sum()) / len(cls_gts))
        per_class_ap[cls] = float(np.mean(taus))

    if not per_class_ap:
        zero = {f"ar{n}": 0.0 for n in recall_dets}
        return {"ap": 0.0, "ap50": 0.0, "ap75": 0.0, "per_class": {}, **zero}
    result = {
        "ap": float(np.mean(list(per_class_ap.values()))),
        "ap50": float(np.mean(ap_at[0.5])) if ap_at.get(0.5) else 0.0,
        "ap75": float(np.mean(ap_at[0.75])) if ap_at.get(0.75) else 0.0,
        "per_class": per_class_ap,
    }
    for n in recall_dets:
        result[f"ar{n}"] = float(np.mean(recalls[n])) if recalls[n] else 0.0
    return result


def _cap_per_image(order: list[int], pred_image: list[str], n: int) -> list[int]:
    """Keep at most the n best-scored predictions per image (order is by score)."""
    seen: dict[str, int] = {}
    capped = []
    for pi in order:
        img = pred_image[pi]
        if seen.get(img, 0) < n:
            capped.append(pi)
            seen[img] = seen.get(img, 0) + 1
    return capped


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------

_METEOR_CACHE: dict[tuple[tuple[str, ...], tuple[str, ...]], float] = {}
_METEOR_ALPHA = 0.9  # recall weight in the F-mean
_METEOR_GAMMA = 0.5  # fragmentation penalty weight
_METEOR_BETA = 3.0  # fragmentation penalty exponent


def _max_matches(cand: list[str], ref: list[str]) -> int:
    words = set(cand) | set(ref)
    return sum(min(cand.count(w), ref.count(w)) for w in words)


def _min_chunks(cand: list[str], ref: list[str], m: int) -> int:
    """Minimum chunk count over all maximum exact-unigram alignments.

    A chunk is a maximal run of matched pairs adjacent in both sentences.
    Exhaustive DFS over alignment choices with branch-and-bound; sentence
    lengths here are bounded (descriptions are <= 15 words).
    """
    if m == 0:
        return 0
    n_c = len(cand)
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        ref_positions.setdefault(w, []).append(j)

    # how many matches are still achievable from candidate position i
    remaining = [0] * (n_c + 1)
    for i in range(n_c - 1, -1, -1):
        tail = cand[i:]
        remaining[i] = sum(min(tail.count(w), ref.count(w)) for w in set(tail))

    best = [m + 1]

    def dfs(i: int, used: int, prev_j: int, matches: int, chunks: int) -> None:
        if chunks >= best[0]:
            return
        if matches + remaining[i] < m:
            return
        if i == n_c:
            if matches == m:
                best[0] = min(best[0], chunks)
            return
        word = cand[i]
        for j in ref_positions.get(word, ()):  # try matching i -> j
            if used & (1 << j):
                continue
            cont = prev_j >= 0 and j == prev_j + 1
            dfs(i + 1, used | (1 << j), j, matches + 1, chunks + (0 if cont else 1))
        dfs(i + 1, used, -1, matches, chunks)  # leave i unmatched

    dfs(0, 0, -2, 0, 0)
    return best[0]


def meteor(candidate: str, reference: str) -> float:
    """Exact-match METEOR score of a candidate against one reference."""
    cand = normalize_text(candidate).split()
    ref = normalize_text(reference).split()
    if not ref:
        raise ContractError("meteor: reference is empty after normalization")
    if not cand:
        return 0.0
    key = (tuple(cand), tuple(ref))
    hit = _METEOR_CACHE.get(key)
    if hit is not None:
        return hit
    m = _max_matches(cand, ref)
    if m == 0:
        _METEOR_CACHE[key] = 0.0
        return 0.0
    chunks = _min_chunks(cand, ref, m)
    p = m / len(cand)
    r = m / len(ref)
    f = p * r / (_METEOR_ALPHA * p + (1.0 - _METEOR_ALPHA) * r)
    penalty = _METEOR_GAMMA * (chunks / m) ** _METEOR_BETA
    score = f * (1.0 - penalty)
    _METEOR_CACHE[key] = score
    return score


# ---------------------------------------------------------------------------
# dense captioning
# ---------------------------------------------------------------------------


def densecap_map(
    preds: list[PredictionRecord],
    gts: list[GroundTruthRegion],
    grid: ThresholdGrid = ThresholdGrid(),
) -> dict:
    """Mean AP over the joint IoU x METEOR threshold grid (class-agnostic).

    For each cell, a prediction (taken in global score order) matches the
    unmatched ground-truth region of highest IoU among those with
    IoU >= tau_iou and METEOR >= tau_met.  Returns {"map", "cells"} where
    cells maps (tau_iou, tau_met) to the cell AP.
    """
    if not gts:
        return {"map": 0.0, "cells": {}}
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    pred_image = [p.image_id for p in preds]
    gt_by_image: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        gt_by_image.setdefault(g.image_id, []).append(gi)

    min_iou = min(grid.iou_thresholds)
    ious_by_pred: list[dict[int, float]] = []
    meteors_by_pred: list[dict[int, float]] = []
    for p in preds:
        iou_row: dict[int, float] = {}
        met_row: dict[int, float] = {}
        for gi in gt_by_image.get(p.image_id, []):
            v = float(iou_matrix(np.asarray([p.box]), np.asarray([gts[gi].box]))[0, 0])
            iou_row[gi] = v
            if v >= min_iou:
                met_row[gi] = meteor(p.text, gts[gi].text)
        ious_by_pred.append(iou_row)
        meteors_by_pred.append(met_row)

    cells: dict[tuple[float, float], float] = {}
    for tau_iou in grid.iou_thresholds:
        for tau_met in grid.meteor_thresholds:
            def accept(pi, gi, v, ti=tau_iou, tm=tau_met):
                return v >= ti and meteors_by_pred[pi].get(gi, 0.0) >= tm

            flags = _greedy_match_flags(order, pred_image, ious_by_pred, gt_by_image, accept)
            cells[(tau_iou, tau_met)] = interpolated_ap(flags, len(gts))
    return {"map": float(np.mean(list(cells.values()))), "cells": cells}
