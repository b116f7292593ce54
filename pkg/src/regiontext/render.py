"""SVG visualization: raster scene background plus labeled prediction boxes."""

from __future__ import annotations

import base64
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from .data import Dataset
from .metrics import PredictionRecord

_PALETTE = ("#00e05a", "#ff4d6d", "#3fa7ff", "#ffd23f", "#c77dff", "#2dd4bf")


def _png_data_uri(pixels: np.ndarray) -> str:
    img = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def render_svg(pixels: np.ndarray, records: list[PredictionRecord], scale: int = 6) -> str:
    """One annotated SVG document for an image and its prediction records."""
    _, h, w = pixels.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale}" height="{h * scale}" '
        f'viewBox="0 0 {w} {h}">',
        f'<image href="{_png_data_uri(pixels)}" x="0" y="0" width="{w}" height="{h}" '
        'image-rendering="pixelated"/>',
    ]
    for i, r in enumerate(records):
        color = _PALETTE[i % len(_PALETTE)]
        x1, y1, x2, y2 = r.box
        label = escape(f"{r.text} {r.score:.2f}")
        parts.append(
            f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" height="{y2 - y1:.2f}" '
            f'fill="none" stroke="{color}" stroke-width="0.6"/>'
        )
        ty = y1 - 1.0 if y1 >= 4.0 else y2 + 3.5
        parts.append(
            f'<text x="{x1:.2f}" y="{ty:.2f}" font-size="3.2" font-family="monospace" '
            f'fill="{color}" stroke="black" stroke-width="0.12">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def render_predictions(
    records: list[PredictionRecord],
    dataset: Dataset,
    out_dir,
    min_score: float = 0.5,
) -> dict:
    """One SVG per referenced image; unknown image ids go to a skip report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list[PredictionRecord]] = {img.image_id: [] for img in dataset.images}
    skipped: list[str] = []
    for r in records:
        if r.image_id in by_image:
            if r.score >= min_score:
                by_image[r.image_id].append(r)
        elif r.image_id not in skipped:
            skipped.append(r.image_id)
    written = []
    for img in dataset.images:
        svg = render_svg(img.pixels, by_image[img.image_id])
        path = out_dir / f"{img.image_id}.svg"
        path.write_text(svg, encoding="utf-8")
        written.append(str(path))
    return {"written": written, "skipped_image_ids": skipped}
