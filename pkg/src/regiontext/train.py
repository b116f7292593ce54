"""Training loop: AdamW with cosine learning-rate decay over both losses.

Each step samples a batch of images, picks one description style per image
from the task mixture, runs the detector and text losses, and applies one
optimizer update.  An optional incremental schedule hides some object
classes until a given iteration, simulating classes being added mid-run.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .data import Dataset, build_vocab_corpus, scale_jitter
from .errors import ConfigError, NumericError
from .model import ImageExample, Pipeline, PipelineConfig, build_example
from .tensor import Tensor
from .tokenizer import (
    DEFAULT_TASK_TOKENS,
    Vocabulary,
    build_vocab,
    normalize_text,
    save_vocab,
    vocab_sha256,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch_size: int = 4
    lr: float = 3e-3
    cosine_decay: bool = True
    weight_decay: float = 1e-4
    loss_weights: dict = field(
        default_factory=lambda: {
            "heatmap": 1.0, "size": 1.0, "stage_cls": 1.0, "stage_box": 1.0, "text": 1.0,
        }
    )
    task_mixture: tuple[float, ...] = (0.5, 0.5)
    incremental_schedule: tuple[tuple[int, tuple[str, ...]], ...] = ()
    init_seed: int = 1
    batch_seed: int = 2
    vocab_size: int = 512
    include_gt_regions: bool = True
    single_begin_token: bool = False
    jitter: bool = True
    label_smoothing: float = 0.1
    log_every: int = 10
    checkpoint_every: int = 250

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if abs(sum(self.task_mixture) - 1.0) > 1e-9:
            raise ConfigError(f"task mixture {self.task_mixture} must sum to 1")
        for it, classes in self.incremental_schedule:
            if not 0 <= it <= self.iterations:
                raise ConfigError(f"schedule iteration {it} outside [0, {self.iterations}]")
            if not classes:
                raise ConfigError("schedule entry unlocks no classes")


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-d parameters."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        lr = self.lr * lr_scale
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def cosine_scale(step: int, total: int) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * step / max(1, total)))


def visible_classes(
    schedule: tuple[tuple[int, tuple[str, ...]], ...],
    all_classes: tuple[str, ...],
    step: int,
) -> set[str]:
    """Classes trainable at `step`: everything not scheduled, plus unlocked."""
    scheduled: set[str] = set()
    for _, classes in schedule:
        scheduled.update(classes)
    visible = set(all_classes) - scheduled
    for it, classes in schedule:
        if step >= it:
            visible.update(classes)
    return visible


def _region_class(text: str, class_names: set[str]) -> str | None:
    words = set(normalize_text(text).split())
    hits = words & class_names
    # captions may mention a neighbor class; the subject comes first
    for w in normalize_text(text).split():
        if w in class_names:
            return w
    return next(iter(hits)) if hits else None


def filter_visible_regions(regions, visible: set[str], class_names: set[str]):
    """Drop regions whose subject class is currently locked."""
    kept = []
    for r in regions:
        cls = _region_class(r.text, class_names)
        if cls is None or cls in visible:
            kept.append(r)
    return kept


@dataclass
class TrainResult:
    checkpoint_path: Path
    vocab_path: Path
    loss_log: list[dict]
    initial_total: float
    final_total: float


def train(
    cfg: TrainConfig,
    pipeline_cfg: PipelineConfig,
    dataset: Dataset,
    out_dir,
    class_names: tuple[str, ...] = (),
) -> TrainResult:
    """Train from scratch on `dataset`; writes checkpoint + vocab to `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    task_tokens = DEFAULT_TASK_TOKENS[:1] if cfg.single_begin_token else DEFAULT_TASK_TOKENS
    corpus = build_vocab_corpus(dataset)
    vocab = build_vocab(corpus, max_size=cfg.vocab_size, task_tokens=task_tokens)
    vocab_path = out_dir / "vocab.txt"
    save_vocab(vocab, vocab_path)

    rng_init = np.random.default_rng(cfg.init_seed)
    pipeline = Pipeline(pipeline_cfg, vocab, rng_init)
    params = pipeline.params()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng_batch = np.random.default_rng(cfg.batch_seed)

    if not class_names:
        class_names = tuple(
            sorted(
                {
                    normalize_text(r.text)
                    for regions in dataset.annotations.values()
                    for r in regions
                    if r.task_id == 1
                }
            )
        )
    class_set = set(class_names)
    n_tasks = len(cfg.task_mixture)
    ckpt_path = out_dir / "checkpoint.bin"
    loss_log: list[dict] = []
    initial_total = None
    last_good = None

    for step in range(cfg.iterations):
        T.reset_tape()
        visible = visible_classes(cfg.incremental_schedule, class_names, step)
        idx = rng_batch.integers(0, len(dataset.images), size=cfg.batch_size)
        examples: list[ImageExample] = []
        tasks: list[int] = []
        for i in idx:
            img_rec = dataset.images[int(i)]
            image = img_rec.tensor_data
            regions = dataset.regions_of(img_rec.image_id)
            if len(visible) != len(class_set):
                regions = filter_visible_regions(regions, visible, class_set)
            if cfg.jitter:
                image, regions = scale_jitter(image, regions, rng_batch)
            examples.append(build_example(image, regions))
            tasks.append(1 + int(rng_batch.choice(n_tasks, p=np.asarray(cfg.task_mixture))))
        losses = pipeline.training_losses(
            examples,
            tasks,
            rng_batch,
            loss_weights=cfg.loss_weights,
            include_gt_regions=cfg.include_gt_regions,
            single_begin_token=cfg.single_begin_token,
            epsilon=cfg.label_smoothing,
        )
        total = losses["total"]
        if not np.isfinite(total.data):
            raise NumericError(
                f"non-finite loss at step {step}; last good checkpoint: {last_good}"
            )
        if initial_total is None:
            initial_total = total.item()
        T.backward(total)
        lr_scale = cosine_scale(step, cfg.iterations) if cfg.cosine_decay else 1.0
        opt.step(lr_scale)
        opt.zero_grad()

        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            entry = {"step": step, **{k: v.item() for k, v in losses.items()}}
            loss_log.append(entry)
            log.info(
                "step %d: total %.4f (det %.4f, text %.4f)",
                step, entry["total"], entry["detector"], entry["text"],
            )
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_path, params, pipeline_cfg.to_dict(), vocab_sha256(vocab))
            last_good = str(ckpt_path)

    save_checkpoint(ckpt_path, params, pipeline_cfg.to_dict(), vocab_sha256(vocab))
    final_total = loss_log[-1]["total"] if loss_log else float("nan")
    with open(out_dir / "loss_log.json", "w", encoding="utf-8") as fh:
        json.dump(loss_log, fh, indent=1)
    return TrainResult(
        checkpoint_path=ckpt_path,
        vocab_path=vocab_path,
        loss_log=loss_log,
        initial_total=float(initial_total),
        final_total=float(final_total),
    )


def load_pipeline(checkpoint_path, vocab: Vocabulary | None = None) -> Pipeline:
    """Rebuild a pipeline from a checkpoint; vocab defaults to the sibling file."""
    checkpoint_path = Path(checkpoint_path)
    if vocab is None:
        from .tokenizer import load_vocab

        vocab = load_vocab(checkpoint_path.parent / "vocab.txt")
    header, arrays = load_checkpoint(checkpoint_path)
    cfg = PipelineConfig.from_dict(header["config"])
    pipeline = Pipeline(cfg, vocab, np.random.default_rng(0))
    restore_params(
        pipeline.params(), header, arrays, cfg.to_dict(), vocab_sha256(vocab)
    )
    return pipeline
