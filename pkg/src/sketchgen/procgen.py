"""Procedural sketch-photo pairs: lobed radial objects with fine-grained attributes.

Objects are star-shaped (radially parameterized) silhouettes so the photo fill,
the outline strokes, and inside/boundary oracles all derive from one analytic
radius function. Each object varies independently in shape class (lobe count),
body aspect, lobe amplitude, base size, pose, fill color, and texture, which
keeps retrieval-style metrics non-degenerate.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .sketches import Stroke, VectorSketch, SketchFormatError, sketch_from_json, sketch_to_json

__all__ = [
    "ObjectParams",
    "ParamRanges",
    "DatasetSpec",
    "PhotoSample",
    "PairedExample",
    "ConfigurationError",
    "IngestionError",
    "synthesize_pair",
    "make_dataset",
    "save_dataset",
    "load_dataset",
    "load_external_pairs",
    "pair_to_bytes",
    "photo_to_png_bytes",
    "png_bytes_to_photo",
]

_BACKGROUND = 0.92  # flat light background in [0, 1] space
_SUPERSAMPLE = 4
_STROKE_WIDTH = 0.018
_LOBE_COUNTS = (3, 4, 5)  # shape-class id indexes into this


class ConfigurationError(ValueError):
    """Invalid dataset specification."""


class IngestionError(ValueError):
    """A single external pair failed to load; carries the offending item id."""

    def __init__(self, item_id: str, reason: str):
        super().__init__(f"pair '{item_id}': {reason}")
        self.item_id = item_id


@dataclass(frozen=True)
class ParamRanges:
    aspect: tuple[float, float] = (0.70, 1.40)
    lobe_amp: tuple[float, float] = (0.10, 0.30)
    base_radius: tuple[float, float] = (0.24, 0.30)
    color: tuple[float, float] = (0.15, 0.90)
    shape_classes: tuple[int, ...] = (0, 1, 2)
    textures: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class ObjectParams:
    shape_class: int  # index into the lobe-count table
    aspect: float  # x/y elongation of the body
    lobe_amp: float  # appendage protrusion as a fraction of base radius
    base_radius: float
    color: tuple[float, float, float]
    texture: int
    pose: float  # radians

    def validate(self, ranges: ParamRanges) -> None:
        def in_range(v, lohi, name):
            if not lohi[0] <= v <= lohi[1]:
                raise ConfigurationError(f"{name}={v} outside range {lohi}")

        if self.shape_class not in ranges.shape_classes:
            raise ConfigurationError(f"shape_class {self.shape_class} not in {ranges.shape_classes}")
        if self.texture not in ranges.textures:
            raise ConfigurationError(f"texture {self.texture} not in {ranges.textures}")
        in_range(self.aspect, ranges.aspect, "aspect")
        in_range(self.lobe_amp, ranges.lobe_amp, "lobe_amp")
        in_range(self.base_radius, ranges.base_radius, "base_radius")
        for c in self.color:
            in_range(c, ranges.color, "color")

    @property
    def lobes(self) -> int:
        return _LOBE_COUNTS[self.shape_class]


@dataclass(frozen=True)
class DatasetSpec:
    resolution: int = 64
    train_count: int = 400
    test_count: int = 100
    seed: int = 0
    deformation: float = 0.02  # stroke jitter std in canvas fractions
    ranges: ParamRanges = field(default_factory=ParamRanges)

    def __post_init__(self):
        m = self.resolution
        if m < 8 or (m & (m - 1)) != 0:
            raise ConfigurationError(f"resolution must be a power of two >= 8, got {m}")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigurationError("train/test counts must be >= 1")
        if self.deformation < 0:
            raise ConfigurationError("deformation must be >= 0")


@dataclass(frozen=True)
class PhotoSample:
    pixels: np.ndarray  # (M, M, 3) float32 in [-1, 1]
    params: ObjectParams | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[0] != px.shape[1] or px.shape[2] != 3:
            raise ValueError(f"photo must be square HxWx3, got {px.shape}")
        object.__setattr__(self, "pixels", np.clip(px, -1.0, 1.0))

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PairedExample:
    sketch: VectorSketch
    photo: PhotoSample
    id: str


# --- silhouette geometry ------------------------------------------------------


def _unit_radius(theta: np.ndarray, params: ObjectParams) -> np.ndarray:
    return params.base_radius * (1.0 + params.lobe_amp * np.cos(params.lobes * theta))


def _boundary_points(params: ObjectParams, n: int) -> np.ndarray:
    """n points along the closed silhouette, in canvas coordinates (closed: last != first)."""
    theta = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    r = _unit_radius(theta, params)
    ax = math.sqrt(params.aspect)
    ay = 1.0 / ax
    x = ax * r * np.cos(theta)
    y = ay * r * np.sin(theta)
    c, s = math.cos(params.pose), math.sin(params.pose)
    pts = np.stack([c * x - s * y, s * x + c * y], axis=1)
    return pts + 0.5


def _object_frame(points: np.ndarray, params: ObjectParams) -> tuple[np.ndarray, np.ndarray]:
    """Map canvas points to the unrotated, unsquashed object frame; returns (rho, theta)."""
    p = points - 0.5
    c, s = math.cos(-params.pose), math.sin(-params.pose)
    x = c * p[..., 0] - s * p[..., 1]
    y = s * p[..., 0] + c * p[..., 1]
    ax = math.sqrt(params.aspect)
    ay = 1.0 / ax
    x = x / ax
    y = y / ay
    return np.hypot(x, y), np.arctan2(y, x)


def render_photo(params: ObjectParams, resolution: int) -> np.ndarray:
    """Antialiased (supersampled) render of the object, (M, M, 3) float32 in [-1, 1]."""
    n = resolution * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(coords, coords)  # gy is the row/vertical axis
    pts = np.stack([gx, gy], axis=-1)
    rho, theta = _object_frame(pts, params)
    r_edge = _unit_radius(theta, params)
    inside = rho <= r_edge

    base = np.array(params.color, dtype=np.float64)
    shade = 1.0 - 0.25 * np.clip(rho / np.maximum(r_edge, 1e-9), 0.0, 1.0) ** 2
    factor = shade
    if params.texture == 1:  # stripes along the object-frame x coordinate
        c, s = math.cos(-params.pose), math.sin(-params.pose)
        ux = (c * (gx - 0.5) - s * (gy - 0.5)) / math.sqrt(params.aspect)
        factor = shade * (0.62 + 0.38 * (np.sin(2.0 * math.pi * 7.0 * ux) >= 0))
    elif params.texture == 2:  # concentric rings
        bands = 0.62 + 0.38 * (np.sin(2.0 * math.pi * 3.0 * rho / np.maximum(r_edge, 1e-9)) >= 0)
        factor = shade * bands

    img = np.empty((n, n, 3), dtype=np.float64)
    img[..., :] = _BACKGROUND
    for ch in range(3):
        img[..., ch] = np.where(inside, base[ch] * factor, _BACKGROUND)
    img = img.reshape(resolution, _SUPERSAMPLE, resolution, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    return (img * 2.0 - 1.0).astype(np.float32)


def _outline_strokes(params: ObjectParams, rng: np.random.Generator, deformation: float) -> list[Stroke]:
    lobes = params.lobes
    pts_per_stroke = 22
    strokes = []
    # pen lifts at the concave notches between lobes
    notches = (math.pi + 2.0 * math.pi * np.arange(lobes + 1)) / lobes
    for b in range(lobes):
        theta = np.linspace(notches[b], notches[b + 1], pts_per_stroke)
        r = _unit_radius(theta, params)
        ax = math.sqrt(params.aspect)
        ay = 1.0 / ax
        x = ax * r * np.cos(theta)
        y = ay * r * np.sin(theta)
        c, s = math.cos(params.pose), math.sin(params.pose)
        pts = np.stack([c * x - s * y, s * x + c * y], axis=1) + 0.5
        if deformation > 0:
            pts = pts + _smooth_jitter(rng, pts_per_stroke, deformation)
        strokes.append(Stroke(points=np.clip(pts, 0.0, 1.0), width=_STROKE_WIDTH))
    return strokes


def _smooth_jitter(rng: np.random.Generator, n: int, std: float) -> np.ndarray:
    """Low-frequency 2-D jitter: offsets drawn at a few knots, linearly interpolated."""
    knots = max(3, n // 6 + 1)
    knot_offsets = rng.normal(0.0, std, size=(knots, 2))
    xs = np.linspace(0.0, 1.0, knots)
    t = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(t, xs, knot_offsets[:, k]) for k in range(2)], axis=1)


def sample_params(ranges: ParamRanges, rng: np.random.Generator) -> ObjectParams:
    return ObjectParams(
        shape_class=int(rng.choice(len(ranges.shape_classes))),
        aspect=float(rng.uniform(*ranges.aspect)),
        lobe_amp=float(rng.uniform(*ranges.lobe_amp)),
        base_radius=float(rng.uniform(*ranges.base_radius)),
        color=tuple(float(v) for v in rng.uniform(ranges.color[0], ranges.color[1], size=3)),
        texture=int(rng.choice(len(ranges.textures))),
        pose=float(rng.uniform(0.0, 2.0 * math.pi)),
    )


def synthesize_pair(spec: DatasetSpec, seed: int) -> PairedExample:
    """Deterministic sketch-photo pair for (spec, seed).

    The photo is an antialiased render; the sketch traces the same silhouette
    with smooth jitter of std `spec.deformation`, so at deformation 0 the strokes
    lie on the photo boundary and at larger values they drift off it the way
    free-hand sketches do.
    """
    if not isinstance(spec, DatasetSpec):
        raise ConfigurationError(f"expected DatasetSpec, got {type(spec).__name__}")
    rng = np.random.default_rng([abs(spec.seed), abs(seed) + 1])
    params = sample_params(spec.ranges, rng)
    params.validate(spec.ranges)
    photo = PhotoSample(pixels=render_photo(params, spec.resolution), params=params)
    strokes = _outline_strokes(params, rng, spec.deformation)
    sketch = VectorSketch(strokes=tuple(strokes), canvas_size=spec.resolution)
    return PairedExample(sketch=sketch, photo=photo, id=f"pair{seed:06d}")


def make_dataset(spec: DatasetSpec) -> tuple[list[PairedExample], list[PairedExample]]:
    """(train, test) pair lists; example i always uses seed i so splits never overlap."""
    train = [synthesize_pair(spec, i) for i in range(spec.train_count)]
    test = [synthesize_pair(spec, spec.train_count + i) for i in range(spec.test_count)]
    return train, test


# --- serialization ------------------------------------------------------------


def photo_to_png_bytes(photo: PhotoSample) -> bytes:
    arr = np.clip((photo.pixels.astype(np.float64) + 1.0) * 0.5, 0.0, 1.0)
    arr8 = np.round(arr * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_photo(data: bytes, resolution: int | None = None,
                       params: ObjectParams | None = None) -> PhotoSample:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    if img.width != img.height:
        raise ValueError(f"photo must be square, got {img.width}x{img.height}")
    if resolution is not None and img.width != resolution:
        img = img.resize((resolution, resolution), Image.LANCZOS)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return PhotoSample(pixels=arr * 2.0 - 1.0, params=params)


def pair_to_bytes(pair: PairedExample) -> bytes:
    """Canonical byte serialization (sketch JSON + photo PNG + params JSON)."""
    sketch_js = json.dumps(sketch_to_json(pair.sketch), sort_keys=True)
    params_js = json.dumps(asdict(pair.photo.params), sort_keys=True) if pair.photo.params else "null"
    head = json.dumps({"id": pair.id, "sketch": sketch_js, "params": params_js}, sort_keys=True)
    return head.encode() + b"\x00" + photo_to_png_bytes(pair.photo)


def save_dataset(pairs: list[PairedExample], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "sketches").mkdir(parents=True, exist_ok=True)
    (out / "photos").mkdir(parents=True, exist_ok=True)
    manifest = []
    for p in pairs:
        s_rel = f"sketches/{p.id}.json"
        ph_rel = f"photos/{p.id}.png"
        (out / s_rel).write_text(json.dumps(sketch_to_json(p.sketch)))
        (out / ph_rel).write_bytes(photo_to_png_bytes(p.photo))
        manifest.append({"id": p.id, "sketch": s_rel, "photo": ph_rel})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out / "manifest.json"


def load_dataset(manifest_path: str | Path, resolution: int | None = None) -> list[PairedExample]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    return load_external_pairs(root, root, manifest, resolution=resolution)


def load_external_pairs(sketch_dir: str | Path, photo_dir: str | Path, manifest,
                        resolution: int | None = None) -> list[PairedExample]:
    """Ingest pre-exported sketch-JSON / photo-PNG pairs listed in a manifest.

    `manifest` is a list of {"id", "sketch", "photo"} dicts or a path to one.
    Any per-item failure raises IngestionError naming the item.
    """
    if isinstance(manifest, (str, Path)):
        manifest = json.loads(Path(manifest).read_text())
    sketch_dir, photo_dir = Path(sketch_dir), Path(photo_dir)
    pairs = []
    for item in manifest:
        item_id = str(item.get("id", "<missing id>"))
        try:
            sketch_path = sketch_dir / item["sketch"]
            photo_path = photo_dir / item["photo"]
            if not sketch_path.exists():
                raise FileNotFoundError(f"missing sketch file {sketch_path}")
            if not photo_path.exists():
                raise FileNotFoundError(f"missing photo file {photo_path}")
            sketch = sketch_from_json(sketch_path.read_text())
            photo = png_bytes_to_photo(photo_path.read_bytes(), resolution=resolution)
        except (KeyError, ValueError, OSError, SketchFormatError) as e:
            raise IngestionError(item_id, str(e)) from e
        pairs.append(PairedExample(sketch=sketch, photo=photo, id=item_id))
    return pairs
