"""Gaze overlay and curve rendering.

Overlays draw a ground-truth arrow and a predicted arrow anchored at the face
center, plus a per-sample angular-error caption.  The 3D gaze vector is
projected onto the image plane through its (x, y) components scaled by a
fixed pixel length (y flipped: image rows grow downward).  Rendering is pure
PIL, so output bytes are deterministic for fixed inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import angles_to_vector, angular_error

GT_COLOR = (40, 200, 60)
PRED_COLOR = (230, 60, 40)
ARROW_FRACTION = 0.42  # arrow length as a fraction of the short image side


def arrow_endpoint(center: tuple[float, float], angles, length: float) -> tuple[float, float]:
    """Pixel endpoint of the gaze arrow for (pitch, yaw) radians.

    Positive yaw points toward the right half of the image; positive pitch
    points up (negative pixel-row direction).
    """
    v = angles_to_vector(np.asarray(angles, dtype=np.float64))
    return (center[0] + float(v[0]) * length, center[1] - float(v[1]) * length)


def _draw_arrow(draw: ImageDraw.ImageDraw, start, end, color, width=2):
    draw.line([start, end], fill=color, width=width)
    # Arrowhead: two short flanks at the tip.
    vec = np.array([end[0] - start[0], end[1] - start[1]])
    norm = np.linalg.norm(vec)
    if norm < 1e-6:
        draw.ellipse([end[0] - 2, end[1] - 2, end[0] + 2, end[1] + 2], fill=color)
        return
    direction = vec / norm
    perp = np.array([-direction[1], direction[0]])
    head = 6.0
    for side in (1.0, -1.0):
        flank = np.array(end) - direction * head + perp * (head * 0.6 * side)
        draw.line([tuple(flank), end], fill=color, width=width)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def render_gaze_overlay(face: np.ndarray, label, prediction) -> Image.Image:
    """One overlay image: ground-truth and predicted arrows plus the error."""
    h, w = face.shape[1], face.shape[2]
    im = Image.fromarray(to_uint8(face).transpose(1, 2, 0))
    draw = ImageDraw.Draw(im)
    center = (w / 2.0, h / 2.0)
    length = ARROW_FRACTION * min(h, w)
    _draw_arrow(draw, center, arrow_endpoint(center, label, length), GT_COLOR)
    _draw_arrow(draw, center, arrow_endpoint(center, prediction, length), PRED_COLOR)
    err = float(
        angular_error(
            angles_to_vector(np.asarray(label, dtype=np.float64)),
            angles_to_vector(np.asarray(prediction, dtype=np.float64)),
        )
    )
    draw.text((3, 1), f"err {err:.2f} deg", fill=(255, 255, 255))
    return im


def save_gaze_overlays(samples, predictions, out_dir: Path | str) -> list[Path]:
    """Write one overlay PNG per sample; returns the file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (sample, pred) in enumerate(zip(samples, predictions)):
        im = render_gaze_overlay(sample.face, sample.label, pred)
        path = out_dir / f"overlay_{i:06d}.png"
        im.save(path, format="PNG")
        paths.append(path)
    return paths


def render_equivariance_chart(
    points: list[tuple[float, float | None]], size: tuple[int, int] = (480, 320)
) -> Image.Image:
    """Line chart of mean angular error over rotation angle (degrees)."""
    w, h = size
    margin = 44
    im = Image.new("RGB", (w, h), (255, 255, 255))
    draw = ImageDraw.Draw(im)
    draw.line([(margin, h - margin), (w - 10, h - margin)], fill=(0, 0, 0))
    draw.line([(margin, h - margin), (margin, 10)], fill=(0, 0, 0))
    valid = [(t, e) for t, e in points if e is not None]
    if not valid:
        draw.text((margin + 10, h // 2), "no data", fill=(0, 0, 0))
        return im
    ts = [t for t, _ in valid]
    es = [e for _, e in valid]
    t_lo, t_hi = min(ts), max(ts)
    e_lo, e_hi = 0.0, max(es) * 1.1 or 1.0
    span_t = (t_hi - t_lo) or 1.0
    span_e = (e_hi - e_lo) or 1.0

    def xy(t, e):
        x = margin + (t - t_lo) / span_t * (w - margin - 20)
        y = (h - margin) - (e - e_lo) / span_e * (h - margin - 20)
        return (x, y)

    coords = [xy(t, e) for t, e in valid]
    if len(coords) > 1:
        draw.line(coords, fill=(30, 80, 200), width=2)
    for (x, y), (t, e) in zip(coords, valid):
        draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=(30, 80, 200))
        draw.text((x - 8, h - margin + 6), f"{t:g}", fill=(0, 0, 0))
    draw.text((4, 10), "err (deg)", fill=(0, 0, 0))
    draw.text((w - 90, h - 24), "rotation (deg)", fill=(0, 0, 0))
    for e_tick in (e_lo, max(es)):
        _, y = xy(t_lo, e_tick)
        draw.text((4, y - 6), f"{e_tick:.1f}", fill=(0, 0, 0))
    return im
