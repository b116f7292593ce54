"""Full pipeline: encoder -> foreground extractor -> text decoder.

Training combines the detector losses (center-heatmap focal + size L1 on
every pyramid level, plus per-stage binary cross-entropy and smooth-L1 box
regression in the cascade) with the language-modeling loss on region
descriptions.  The text loss covers predicted boxes that match a ground
truth at the final cascade stage; the ground-truth boxes themselves are
appended as extra regions by default (`include_gt_regions`).  The whole
training step is batched across images: one backbone pass, one head pass
per cascade stage, one decoder pass.

Inference: proposals -> cascade -> objectness floor -> Gaussian soft NMS ->
feature crops -> branch-first generation -> composite scoring.  After soft
NMS the decayed score replaces a box's objectness in the composite score;
the raw stage scores are kept alongside for provenance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, DetectedObject, TextDecoder
from .encoder import PYRAMID_LEVELS, EncoderConfig, VisualEncoder
from .errors import ContractError
from .extractor import (
    Box,
    ExtractorConfig,
    RegionExtractor,
    assign_targets,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    soft_nms,
    splat_heatmap,
)
from .layers import Module, gather_rows
from .tensor import Tensor
from .tokenizer import Vocabulary
from .tokenizer import encode as tok_encode


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(layers=2))

    def to_dict(self) -> dict:
        doc = {
            "encoder": asdict(self.encoder),
            "extractor": asdict(self.extractor),
            "decoder": asdict(self.decoder),
        }
        doc["encoder"]["global_block_indices"] = list(self.encoder.global_block_indices)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        enc = dict(doc.get("encoder", {}))
        if "global_block_indices" in enc:
            enc["global_block_indices"] = tuple(enc["global_block_indices"])
        return cls(
            encoder=EncoderConfig(**enc),
            extractor=ExtractorConfig(**doc.get("extractor", {})),
            decoder=DecoderConfig(**doc.get("decoder", {})),
        )


@dataclass
class ImageExample:
    """One training image: float pixels plus its visible regions."""

    image: np.ndarray  # float64 [3, H, W]
    gt_boxes: np.ndarray  # [G, 4] unique boxes
    texts_by_task: list[dict[int, str]]  # per gt box: task_id -> text


def build_example(image: np.ndarray, regions) -> ImageExample:
    """Group per-task annotations by their (shared) boxes."""
    boxes: list[tuple] = []
    texts: list[dict[int, str]] = []
    index: dict[tuple, int] = {}
    for r in regions:
        key = (r.box.x1, r.box.y1, r.box.x2, r.box.y2)
        if key not in index:
            index[key] = len(boxes)
            boxes.append(key)
            texts.append({})
        texts[index[key]][r.task_id] = r.text
    gt = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return ImageExample(image=image, gt_boxes=gt, texts_by_task=texts)


class Pipeline(Module):
    def __init__(self, cfg: PipelineConfig, vocab: Vocabulary, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = VisualEncoder(cfg.encoder, rng)
        self.extractor = RegionExtractor(cfg.extractor, cfg.encoder.embed_dim, rng)
        self.decoder = TextDecoder(cfg.decoder, vocab, cfg.encoder.embed_dim, rng)

    # ------------------------------------------------------------------
    # training losses (batched across the images of a step)
    # ------------------------------------------------------------------

    def _proposal_maps_batch(self, levels: dict[str, Tensor]) -> dict[str, tuple[Tensor, Tensor]]:
        maps = {}
        head = self.extractor.proposal_head
        for name, feat in levels.items():
            b, c, h, w = feat.shape
            tokens = T.reshape(T.transpose(feat, (0, 2, 3, 1)), (b * h * w, c))
            hidden = T.gelu(head.trunk(tokens))
            heat = T.reshape(head.heat(hidden), (b, h, w))
            size = T.reshape(head.size(hidden), (b, h, w, 2))
            maps[name] = (heat, size)
        return maps

    def _proposal_losses(
        self,
        maps: dict[str, tuple[Tensor, Tensor]],
        strides: dict[str, float],
        gt_list: list[np.ndarray],
    ) -> tuple[Tensor, Tensor]:
        n_pos_total = sum(len(g) for g in gt_list)
        heat_terms: list[Tensor] = []
        size_terms: list[Tensor] = []
        for name in PYRAMID_LEVELS:
            heat_logit, size_pred = maps[name]
            stride = strides[name]
            b, side_h, side_w = heat_logit.shape
            target = np.stack(
                [splat_heatmap(g, side_h, side_w, stride) for g in gt_list]
            )
            heat_terms.append(T.focal_heatmap_loss(heat_logit, target, n_pos=n_pos_total))
            ids = []
            whs = []
            for bi, g in enumerate(gt_list):
                if not len(g):
                    continue
                cx = (g[:, 0] + g[:, 2]) / 2.0 / stride - 0.5
                cy = (g[:, 1] + g[:, 3]) / 2.0 / stride - 0.5
                px = np.clip(np.round(cx), 0, side_w - 1).astype(np.intp)
                py = np.clip(np.round(cy), 0, side_h - 1).astype(np.intp)
                ids.append(bi * side_h * side_w + py * side_w + px)
                whs.append(
                    np.log(np.stack([g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]], axis=1))
                )
            if ids:
                flat = T.reshape(size_pred, (b * side_h * side_w, 2))
                picked = T.embedding(flat, np.concatenate(ids))
                size_terms.append(
                    T.tmean(T.absval(T.sub(picked, Tensor(np.concatenate(whs)))))
                )
        n = len(PYRAMID_LEVELS)
        heat = T.scale(_sum_tensors(heat_terms), 1.0 / n)
        size = (
            T.scale(_sum_tensors(size_terms), 1.0 / len(size_terms))
            if size_terms
            else Tensor(0.0)
        )
        return heat, size

    def _sample_rois(
        self,
        boxes_list: list[np.ndarray],
        gt_list: list[np.ndarray],
        rng: np.random.Generator,
        roi_samples: int,
        fg_quota: int,
    ) -> list[np.ndarray]:
        sampled = []
        for boxes, gt in zip(boxes_list, gt_list):
            if len(boxes) == 0:
                sampled.append(boxes)
                continue
            labels0, _ = assign_targets(boxes, gt, 0)
            fg_idx = np.flatnonzero(labels0 == 1)
            bg_idx = np.flatnonzero(labels0 == 0)
            if len(fg_idx) > fg_quota:
                fg_idx = fg_idx[rng.permutation(len(fg_idx))[:fg_quota]]
            n_bg = min(len(bg_idx), max(roi_samples - len(fg_idx), 4))
            if len(bg_idx) > n_bg:
                bg_idx = bg_idx[rng.permutation(len(bg_idx))[:n_bg]]
            sampled.append(boxes[np.sort(np.concatenate([fg_idx, bg_idx]))])
        return sampled

    def _cascade_losses(
        self,
        levels: dict[str, Tensor],
        strides: dict[str, float],
        boxes_list: list[np.ndarray],
        gt_list: list[np.ndarray],
        image_hw: tuple[float, float],
        rng: np.random.Generator,
        roi_samples: int = 24,
        fg_quota: int = 10,
    ) -> tuple[Tensor, Tensor, list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
        """Per-stage losses over sampled RoIs of the whole batch.

        Returns (cls loss, box loss, final boxes per image, final-stage
        labels per image, final-stage matched gt per image).
        """
        img_h, img_w = image_hw
        current_list = self._sample_rois(boxes_list, gt_list, rng, roi_samples, fg_quota)
        counts = [len(b) for b in current_list]
        if sum(counts) == 0:
            zero = Tensor(0.0)
            empty = [np.zeros((0, 4)) for _ in boxes_list]
            zs = [np.zeros(0, np.int64) for _ in boxes_list]
            return zero, zero, empty, zs, zs

        cls_terms: list[Tensor] = []
        box_terms: list[Tensor] = []
        for s, head in enumerate(self.extractor.stages):
            labels_list = []
            matched_list = []
            for boxes, gt in zip(current_list, gt_list):
                labels, matched = assign_targets(boxes, gt, s)
                labels_list.append(labels)
                matched_list.append(matched)
            all_boxes = np.concatenate(current_list)
            all_bidx = np.concatenate(
                [np.full(len(b), bi) for bi, b in enumerate(current_list)]
            )
            crops = self.extractor.crop_regions_batch(
                levels, strides, all_boxes, all_bidx, self.cfg.extractor.roi_side
            )
            cls_logits, deltas = head(crops)
            all_labels = np.concatenate(labels_list)
            cls_terms.append(T.tmean(T.sequence_cross_entropy(cls_logits, all_labels, 0.0)))
            fg = np.flatnonzero(all_labels == 1)
            if fg.size:
                all_gt_targets = []
                offset = 0
                for boxes, gt, labels, matched in zip(
                    current_list, gt_list, labels_list, matched_list
                ):
                    sel = np.flatnonzero(labels == 1)
                    if sel.size:
                        all_gt_targets.append(encode_deltas(boxes[sel], gt[matched[sel]]))
                    offset += len(boxes)
                tgt = np.concatenate(all_gt_targets)
                box_terms.append(T.tmean(T.smooth_l1(gather_rows(deltas, fg), Tensor(tgt))))
            decoded = clip_boxes(decode_deltas(all_boxes, deltas.data), img_w, img_h)
            current_list = list(np.split(decoded, np.cumsum(counts)[:-1]))
        final_labels = []
        final_matched = []
        for boxes, gt in zip(current_list, gt_list):
            labels, matched = assign_targets(boxes, gt, 2)
            final_labels.append(labels)
            final_matched.append(matched)
        cls = T.scale(_sum_tensors(cls_terms), 1.0 / len(cls_terms))
        box = (
            T.scale(_sum_tensors(box_terms), 1.0 / len(box_terms))
            if box_terms
            else Tensor(0.0)
        )
        return cls, box, current_list, final_labels, final_matched

    def _text_loss(
        self,
        levels: dict[str, Tensor],
        strides: dict[str, float],
        examples: list[ImageExample],
        task_choices: list[int],
        begin_tasks: list[int],
        final_boxes: list[np.ndarray],
        final_labels: list[np.ndarray],
        final_matched: list[np.ndarray],
        rng: np.random.Generator,
        include_gt_regions: bool = True,
        max_regions: int = 8,
        epsilon: float = 0.1,
    ) -> Tensor:
        boxes: list[np.ndarray] = []
        bidx: list[int] = []
        texts: list[str] = []
        begins: list[int] = []
        for bi, (example, task, begin) in enumerate(
            zip(examples, task_choices, begin_tasks)
        ):
            img_boxes: list[np.ndarray] = []
            img_texts: list[str] = []
            if include_gt_regions:
                for gi in range(len(example.gt_boxes)):
                    text = example.texts_by_task[gi].get(task)
                    if text:
                        img_boxes.append(example.gt_boxes[gi])
                        img_texts.append(text)
            fg = np.flatnonzero(final_labels[bi] == 1)
            for i in fg:
                text = example.texts_by_task[final_matched[bi][i]].get(task)
                if text:
                    img_boxes.append(final_boxes[bi][i])
                    img_texts.append(text)
            if len(img_boxes) > max_regions:
                sel = np.sort(rng.permutation(len(img_boxes))[:max_regions])
                img_boxes = [img_boxes[i] for i in sel]
                img_texts = [img_texts[i] for i in sel]
            boxes.extend(img_boxes)
            texts.extend(img_texts)
            bidx.extend([bi] * len(img_boxes))
            begins.extend([begin] * len(img_boxes))
        if not boxes:
            return Tensor(0.0)
        crops = self.extractor.crop_regions_batch(
            levels, strides, np.stack(boxes), np.asarray(bidx), self.cfg.decoder.crop_side
        )
        region_tokens = self.decoder.project_regions(crops)
        cap = self.cfg.decoder.max_tokens - 2  # room for begin token and [EOS]
        target_ids = [tok_encode(t, self.vocab)[:cap] for t in texts]
        return self.decoder.sequence_loss(region_tokens, target_ids, begins, epsilon)

    def training_losses(
        self,
        examples: list[ImageExample],
        task_choices: list[int],
        rng: np.random.Generator,
        loss_weights: dict[str, float] | None = None,
        include_gt_regions: bool = True,
        single_begin_token: bool = False,
        epsilon: float = 0.1,
    ) -> dict[str, Tensor]:
        """Batch losses; "total" combines the parts with the given weights."""
        if len(examples) != len(task_choices):
            raise ContractError("training_losses: one task choice per example required")
        w = {"heatmap": 1.0, "size": 1.0, "stage_cls": 1.0, "stage_box": 1.0, "text": 1.0}
        if loss_weights:
            w.update(loss_weights)
        image_hw = (float(examples[0].image.shape[1]), float(examples[0].image.shape[2]))
        gt_list = [ex.gt_boxes for ex in examples]

        tokens, hb, wb = self.encoder.backbone_tokens_batch(
            [Tensor(ex.image) for ex in examples]
        )
        levels = self.encoder.pyramid_batch(tokens, hb, wb)
        strides = self.encoder.strides()
        maps = self._proposal_maps_batch(levels)
        heat, size = self._proposal_losses(maps, strides, gt_list)

        boxes_list = []
        for bi, example in enumerate(examples):
            level_maps = [
                (maps[name][0].data[bi], maps[name][1].data[bi], strides[name])
                for name in PYRAMID_LEVELS
            ]
            prop_boxes, _, _ = self.extractor.proposal_arrays(
                level_maps, self.cfg.extractor.proposals_train, image_hw
            )
            if len(example.gt_boxes):
                prop_boxes = (
                    np.concatenate([prop_boxes, example.gt_boxes])
                    if len(prop_boxes)
                    else example.gt_boxes
                )
            boxes_list.append(clip_boxes(prop_boxes, image_hw[1], image_hw[0]))

        cls, box, final_boxes, final_labels, final_matched = self._cascade_losses(
            levels, strides, boxes_list, gt_list, image_hw, rng
        )
        begin_tasks = [1 if single_begin_token else t for t in task_choices]
        text = self._text_loss(
            levels,
            strides,
            examples,
            task_choices,
            begin_tasks,
            final_boxes,
            final_labels,
            final_matched,
            rng,
            include_gt_regions=include_gt_regions,
            epsilon=epsilon,
        )
        losses = {
            "heatmap": heat,
            "size": size,
            "stage_cls": cls,
            "stage_box": box,
            "text": text,
        }
        total = _sum_tensors([T.scale(losses[k], w[k]) for k in losses])
        losses["total"] = total
        losses["detector"] = _sum_tensors(
            [T.scale(losses[k], w[k]) for k in ("heatmap", "size", "stage_cls", "stage_box")]
        )
        return losses

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def run_image(
        self,
        image: np.ndarray,
        task_id: int,
        beam: int = 1,
        proposals: int | None = None,
        objectness_floor: float = 0.05,
        nms_sigma: float = 0.5,
        nms_floor: float = 1e-3,
        max_detections: int = 12,
    ) -> list[DetectedObject]:
        """Full pipeline on one image; returns scored described detections."""
        image_hw = (float(image.shape[1]), float(image.shape[2]))
        k = proposals if proposals is not None else self.cfg.extractor.proposals_test
        with T.no_grad():
            pyr = self.encoder.encode(Tensor(image))
            objects = self.extractor.detect(pyr, k, image_hw)
            objects = [o for o in objects if o.objectness >= objectness_floor]
            if not objects:
                return []
            boxes = np.stack([o.box.as_array() for o in objects])
            scores = np.asarray([o.objectness for o in objects])
            keep, rescored = soft_nms(boxes, scores, sigma=nms_sigma, score_floor=nms_floor)
            keep = keep[:max_detections]
            rescored = rescored[: len(keep)]
            if not keep:
                return []
            kept_boxes = boxes[keep]
            crops = self.extractor.crop_regions(pyr, kept_boxes, self.cfg.decoder.crop_side)
            region_tokens = self.decoder.project_regions(crops)
            all_candidates = self.decoder.generate(
                region_tokens, [task_id] * len(keep), beam=beam
            )
        detections = []
        for pos, idx in enumerate(keep):
            detections.append(
                DetectedObject(
                    box=Box(*map(float, kept_boxes[pos])),
                    objectness=float(rescored[pos]),
                    stage_scores=objects[idx].stage_scores,
                    candidates=all_candidates[pos],
                    task_id=task_id,
                )
            )
        return detections


def _sum_tensors(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out
