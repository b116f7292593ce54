"""Batch inference: run the pipeline over a dataset, emit prediction records."""

from __future__ import annotations

import json
from pathlib import Path

from .data import Dataset
from .errors import IntegrityError
from .metrics import GroundTruthRegion, PredictionRecord
from .model import Pipeline
from .tokenizer import decode as tok_decode


def run_inference(
    pipeline: Pipeline,
    dataset: Dataset,
    task_id: int,
    beam: int = 1,
    **run_kwargs,
) -> list[PredictionRecord]:
    """One record per (box, candidate) over every image of the dataset."""
    records: list[PredictionRecord] = []
    for img in dataset.images:
        detections = pipeline.run_image(img.tensor_data, task_id, beam=beam, **run_kwargs)
        for det in detections:
            for cand, score in zip(det.candidates, det.final_scores):
                records.append(
                    PredictionRecord(
                        image_id=img.image_id,
                        box=(det.box.x1, det.box.y1, det.box.x2, det.box.y2),
                        text=tok_decode(cand.token_ids, pipeline.vocab),
                        score=float(score),
                        task_id=task_id,
                    )
                )
    return records


def write_predictions(records: list[PredictionRecord], path) -> None:
    """Newline-delimited JSON: {image_id, x1, y1, x2, y2, score, text, task}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "image_id": r.image_id,
                        "x1": r.box[0],
                        "y1": r.box[1],
                        "x2": r.box[2],
                        "y2": r.box[3],
                        "score": r.score,
                        "text": r.text,
                        "task": r.task_id,
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_predictions(path) -> list[PredictionRecord]:
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                records.append(
                    PredictionRecord(
                        image_id=str(doc["image_id"]),
                        box=(doc["x1"], doc["y1"], doc["x2"], doc["y2"]),
                        text=str(doc["text"]),
                        score=float(doc["score"]),
                        task_id=int(doc.get("task", 1)),
                    )
                )
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IntegrityError(f"cannot read predictions {path}: {exc}") from exc
    return records


def dataset_ground_truth(dataset: Dataset, task_id: int) -> list[GroundTruthRegion]:
    """Ground-truth regions of one task style, as metric inputs."""
    out = []
    for img in dataset.images:
        for r in dataset.regions_of(img.image_id):
            if r.task_id == task_id:
                out.append(
                    GroundTruthRegion(
                        image_id=img.image_id,
                        box=(r.box.x1, r.box.y1, r.box.x2, r.box.y2),
                        text=r.text,
                    )
                )
    return out
