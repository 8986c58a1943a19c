"""Vector sketches: ordered strokes, rasterization, partial rendering, corruption."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Stroke",
    "VectorSketch",
    "SketchFormatError",
    "rasterize",
    "partial_schedule",
    "add_noise_strokes",
    "round_half_up",
    "sketch_to_json",
    "sketch_from_json",
    "total_arclength",
]

# Antialiasing ramp width in pixels; a pixel counts as inked when coverage >= 0.5,
# i.e. when its centre lies strictly inside the stroke radius.
_AA_WIDTH = 1.0


class SketchFormatError(ValueError):
    """Raised for malformed stroke data (file or in-memory)."""


@dataclass(frozen=True)
class Stroke:
    """Open polyline in normalized canvas coordinates, with a width as a canvas fraction."""

    points: np.ndarray  # (n, 2) float64, x/y in [0, 1]
    width: float = 0.02

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise SketchFormatError(f"stroke needs >=2 (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise SketchFormatError("stroke points must be finite")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise SketchFormatError("stroke coordinates must lie in [0, 1]")
        if self.width <= 0:
            raise SketchFormatError("stroke width must be positive")
        object.__setattr__(self, "points", pts)

    def arclength(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass(frozen=True)
class VectorSketch:
    """Ordered strokes; order is the drawing order and is preserved by all transforms."""

    strokes: tuple[Stroke, ...]
    canvas_size: int = 64

    def __post_init__(self):
        strokes = tuple(self.strokes)
        if len(strokes) == 0:
            raise SketchFormatError("a sketch needs at least one stroke")
        object.__setattr__(self, "strokes", strokes)

    def __len__(self) -> int:
        return len(self.strokes)


def total_arclength(sketch: VectorSketch) -> float:
    return sum(s.arclength() for s in sketch.strokes)


def round_half_up(x: float) -> int:
    """round() with ties going up, so 3.5 -> 4 regardless of parity."""
    return int(math.floor(x + 0.5))


def partial_schedule(completion: float, m_max: int) -> int:
    """Number of leading latent rows a sketch at `completion` should determine.

    clamp(round(completion * m_max), 1, m_max); reproduces the 30..100% -> 3..10
    grid at m_max=10.
    """
    if not 0.0 <= completion <= 1.0:
        raise ValueError(f"completion must be in [0, 1], got {completion}")
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    return max(1, min(m_max, round_half_up(completion * m_max)))


def _clip_strokes_to_length(sketch: VectorSketch, target_len: float) -> list[np.ndarray]:
    """Polyline prefixes (point arrays) covering the first `target_len` of arclength."""
    out: list[np.ndarray] = []
    remaining = target_len
    for stroke in sketch.strokes:
        if remaining <= 0:
            break
        pts = stroke.points
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        length = float(seg.sum())
        if length <= remaining:
            out.append(pts)
            remaining -= length
            continue
        # walk segments and cut the last one at the fractional point
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        idx = int(np.searchsorted(cum, remaining, side="right") - 1)
        idx = min(idx, len(seg) - 1)
        frac = (remaining - cum[idx]) / seg[idx] if seg[idx] > 0 else 0.0
        cut = pts[idx] + frac * (pts[idx + 1] - pts[idx])
        prefix = np.vstack([pts[: idx + 1], cut])
        if len(prefix) >= 2 and not np.allclose(prefix[-1], prefix[-2]):
            out.append(prefix)
        elif len(prefix) > 2:
            out.append(prefix[:-1])
        break
    return out


def _render_polyline(canvas: np.ndarray, pts_px: np.ndarray, radius_px: float) -> None:
    """Max-composite antialiased coverage of one polyline into `canvas` (in place)."""
    res = canvas.shape[0]
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    # pixel centres; canvas row i is y, column j is x
    px = jj + 0.5
    py = ii + 0.5
    a = pts_px[:-1]
    b = pts_px[1:]
    for k in range(len(a)):
        ax, ay = a[k]
        bx, by = b[k]
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        lo_x = max(0, int(min(ax, bx) - radius_px - 2))
        hi_x = min(res, int(max(ax, bx) + radius_px + 3))
        lo_y = max(0, int(min(ay, by) - radius_px - 2))
        hi_y = min(res, int(max(ay, by) + radius_px + 3))
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        sx = px[lo_y:hi_y, lo_x:hi_x]
        sy = py[lo_y:hi_y, lo_x:hi_x]
        if L2 == 0.0:
            dist = np.hypot(sx - ax, sy - ay)
        else:
            t = np.clip(((sx - ax) * dx + (sy - ay) * dy) / L2, 0.0, 1.0)
            dist = np.hypot(sx - (ax + t * dx), sy - (ay + t * dy))
        cov = np.clip(0.5 + (radius_px - dist) / _AA_WIDTH, 0.0, 1.0)
        region = canvas[lo_y:hi_y, lo_x:hi_x]
        np.maximum(region, cov, out=region)


def rasterize(sketch: VectorSketch, resolution: int, completion: float = 1.0) -> np.ndarray:
    """Render the first `completion` fraction of cumulative stroke arclength.

    Returns a (resolution, resolution) float32 image in [0, 1] (ink = 1).
    The cut point is the exact arclength fraction, so two equal-length strokes at
    completion 0.5 render exactly the first stroke.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    if not 0.0 <= completion <= 1.0:
        raise ValueError(f"completion must be in [0, 1], got {completion}")
    canvas = np.zeros((resolution, resolution), dtype=np.float64)
    if completion == 0.0:
        return canvas.astype(np.float32)
    total = total_arclength(sketch)
    if completion >= 1.0:
        prefixes = [s.points for s in sketch.strokes]
        widths = [s.width for s in sketch.strokes]
    else:
        prefixes = _clip_strokes_to_length(sketch, completion * total)
        widths = [s.width for s in sketch.strokes[: len(prefixes)]]
    for pts, width in zip(prefixes, widths):
        radius_px = max(width * resolution / 2.0, 0.35)
        _render_polyline(canvas, pts * resolution, radius_px)
    return canvas.astype(np.float32)


def _quadratic_arc(start: np.ndarray, end: np.ndarray, bulge: np.ndarray, n: int = 9) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    ctrl = 0.5 * (start + end) + bulge
    pts = (1 - t) ** 2 * start + 2 * t * (1 - t) * ctrl + t**2 * end
    return np.clip(pts, 0.0, 1.0)


def add_noise_strokes(sketch: VectorSketch, noise_fraction: float, seed: int) -> VectorSketch:
    """Append ceil(noise_fraction * |strokes|) random short arcs after the real strokes.

    The added strokes are quadratic arcs with uniform random placement and random
    curvature. Original strokes are kept, in order, as an exact prefix.
    """
    if not 0.0 <= noise_fraction <= 1.0:
        raise ValueError(f"noise_fraction must be in [0, 1], got {noise_fraction}")
    n_new = math.ceil(noise_fraction * len(sketch.strokes))
    if n_new == 0:
        return sketch
    rng = np.random.default_rng(seed)
    width = float(np.median([s.width for s in sketch.strokes]))
    noise = []
    for _ in range(n_new):
        start = rng.uniform(0.08, 0.92, size=2)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        length = rng.uniform(0.05, 0.18)
        end = np.clip(start + length * np.array([math.cos(angle), math.sin(angle)]), 0.02, 0.98)
        perp = np.array([-math.sin(angle), math.cos(angle)])
        bulge = perp * rng.uniform(-0.35, 0.35) * length
        noise.append(Stroke(points=_quadratic_arc(start, end, bulge), width=width))
    return VectorSketch(strokes=sketch.strokes + tuple(noise), canvas_size=sketch.canvas_size)


# --- stroke JSON wire format -------------------------------------------------
# {"canvas": int, "strokes": [[[x, y], ...], ...], "widths": [w, ...]}


def sketch_to_json(sketch: VectorSketch) -> dict:
    return {
        "canvas": int(sketch.canvas_size),
        "strokes": [[[float(x), float(y)] for x, y in s.points] for s in sketch.strokes],
        "widths": [float(s.width) for s in sketch.strokes],
    }


def sketch_from_json(obj) -> VectorSketch:
    if isinstance(obj, (str, bytes)):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError as e:
            raise SketchFormatError(f"invalid sketch JSON: {e}") from e
    if isinstance(obj, Path):
        obj = json.loads(obj.read_text())
    if not isinstance(obj, dict):
        raise SketchFormatError(f"sketch JSON must be an object, got {type(obj).__name__}")
    try:
        canvas = int(obj["canvas"])
        raw_strokes = obj["strokes"]
        widths = obj.get("widths")
    except (KeyError, TypeError, ValueError) as e:
        raise SketchFormatError(f"sketch JSON missing/invalid field: {e}") from e
    if not isinstance(raw_strokes, list) or not raw_strokes:
        raise SketchFormatError("sketch JSON needs a non-empty 'strokes' list")
    if widths is None:
        widths = [0.02] * len(raw_strokes)
    if len(widths) != len(raw_strokes):
        raise SketchFormatError("'widths' length must match 'strokes' length")
    strokes = []
    for pts, w in zip(raw_strokes, widths):
        try:
            arr = np.asarray(pts, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise SketchFormatError(f"invalid stroke points: {e}") from e
        strokes.append(Stroke(points=arr, width=float(w)))
    return VectorSketch(strokes=tuple(strokes), canvas_size=canvas)
