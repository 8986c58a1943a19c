"""Evaluation metrics and machine-readable reports.

The Fréchet distance runs on a pluggable feature function; at desk scale the
trained sketch/photo embedder's photo branch supplies the features, so absolute
values are only comparable between runs that share the same `feature_id`.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ActivationStats",
    "EvalReport",
    "compute_stats",
    "fid",
    "diversity_lpips",
    "fgm_eval",
    "retrieval_acc",
    "robustness_sweep",
    "write_reports_jsonl",
    "write_sweep_csv",
    "embedder_feature_fn",
]

_EIG_CLIP = -1e-8  # eigenvalues in [clip, 0) are zeroed; below it the matrix is rejected


@dataclass(frozen=True)
class ActivationStats:
    mean: np.ndarray  # (e,)
    cov: np.ndarray  # (e, e), symmetric PSD
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if self.n < 2:
            raise ValueError("need at least 2 samples for covariance statistics")
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        if np.abs(cov - cov.T).max() > 1e-10:
            raise ValueError("covariance must be symmetric within 1e-10")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class EvalReport:
    metric: str
    value: float
    config_hash: str
    n: int
    seed: int
    condition: str = ""
    feature_id: str = ""

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def compute_stats(images: Sequence[np.ndarray], feature_fn: Callable[[np.ndarray], np.ndarray]
                  ) -> ActivationStats:
    """Gaussian fit (mean, unbiased covariance) of feature_fn activations."""
    feats = np.stack([np.asarray(feature_fn(img), dtype=np.float64).ravel() for img in images])
    if feats.shape[0] < 2:
        raise ValueError("need at least 2 images")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    return ActivationStats(mean=mean, cov=cov, n=feats.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < _EIG_CLIP * max(1.0, abs(vals.max())):
        raise ValueError(f"matrix is not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: ActivationStats, b: ActivationStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross-term trace is computed through the symmetric form
    Tr((A^{1/2} B A^{1/2})^{1/2}) with eigendecompositions, clipping eigenvalues
    above -1e-8 to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("statistics dimensionality mismatch")
    half_a = _psd_sqrt(a.cov)
    inner = half_a @ b.cov @ half_a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < _EIG_CLIP * max(1.0, abs(vals.max())):
        raise ValueError(f"cross-covariance is not PSD within tolerance ({vals.min():.3e})")
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)


def diversity_lpips(generations_per_sketch: Sequence[Sequence[np.ndarray]], phi) -> float:
    """Mean pairwise perceptual feature distance within each sketch's generation set."""
    import torch

    from .imageops import photo_to_input

    per_sketch = []
    for gens in generations_per_sketch:
        if len(gens) < 2:
            raise ValueError("diversity needs >= 2 generations per sketch")
        with torch.no_grad():
            taps = phi.taps(torch.cat([photo_to_input(g) for g in gens]))
        n = len(gens)
        dists = []
        for i in range(n):
            for j in range(i + 1, n):
                d = 0.0
                for w, t in zip(phi.layer_weights, taps):
                    d += w * float((t[i] - t[j]).flatten().norm())
                dists.append(d)
        per_sketch.append(float(np.mean(dists)))
    return float(np.mean(per_sketch))


def fgm_eval(test_pairs, generate_fn, embedder, sketch_raster_fn) -> float:
    """Mean fine-grained similarity between each test sketch and its generation."""
    from .embedder import fgm

    vals = []
    for pair in test_pairs:
        generated = generate_fn(pair)
        vals.append(fgm(sketch_raster_fn(pair.sketch), generated, embedder))
    return float(np.mean(vals))


def retrieval_acc(sketches, gallery: Sequence[np.ndarray], q: int, generate_fn,
                  feature_fn, true_indices: Sequence[int] | None = None) -> float:
    """Generate-then-retrieve accuracy: fraction of sketches whose true pair ranks <= q.

    By default sketch i's true pair is gallery[i]. Distances are L2 in feature
    space; ties resolve toward the lower gallery index (stable sort).
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if true_indices is None:
        true_indices = list(range(len(sketches)))
    gallery_feats = np.stack([np.asarray(feature_fn(p), dtype=np.float64).ravel() for p in gallery])
    hits = 0
    for sketch, true_idx in zip(sketches, true_indices):
        generated = generate_fn(sketch)
        f = np.asarray(feature_fn(generated), dtype=np.float64).ravel()
        dists = np.linalg.norm(gallery_feats - f[None, :], axis=1)
        order = np.argsort(dists, kind="stable")
        rank = int(np.nonzero(order == true_idx)[0][0]) + 1
        if rank <= q:
            hits += 1
    return hits / len(list(sketches))


def robustness_sweep(test_pairs, noise_fractions: Sequence[float], completions: Sequence[float],
                     generate_fn, embedder, reference_stats: ActivationStats,
                     feature_fn, config_hash: str = "", seed: int = 0,
                     feature_id: str = "embedder-photo-branch") -> list[EvalReport]:
    """FID and FGM per corruption condition.

    `generate_fn(pair, noise_fraction, completion, seed)` produces the photo for a
    corrupted input; FGM is measured against the clean full sketch (the drawn
    intent), FID against the reference photo statistics.
    """
    from .embedder import fgm
    from .sketches import rasterize

    reports = []
    conditions = [("noise", f) for f in noise_fractions] + [("completion", c) for c in completions]
    for kind, level in conditions:
        noise = level if kind == "noise" else 0.0
        completion = level if kind == "completion" else 1.0
        label = f"{kind}={level:g}"
        gens = []
        fgms = []
        for i, pair in enumerate(test_pairs):
            img = generate_fn(pair, noise, completion, seed + i)
            gens.append(img)
            clean_raster = rasterize(pair.sketch, embedder.config.resolution)
            fgms.append(fgm(clean_raster, img, embedder))
        stats = compute_stats(gens, feature_fn)
        reports.append(EvalReport(metric="fid", value=fid(stats, reference_stats),
                                  config_hash=config_hash, n=len(test_pairs), seed=seed,
                                  condition=label, feature_id=feature_id))
        reports.append(EvalReport(metric="fgm", value=float(np.mean(fgms)),
                                  config_hash=config_hash, n=len(test_pairs), seed=seed,
                                  condition=label, feature_id=feature_id))
    return reports


def embedder_feature_fn(embedder) -> Callable[[np.ndarray], np.ndarray]:
    """Photo-branch features of the trained embedder, the desk-scale FID feature space."""
    import torch

    def fn(photo: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return embedder.embed_photo(photo)[0].numpy()

    return fn


def write_reports_jsonl(reports: Sequence[EvalReport], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_json()) + "\n")


def write_sweep_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["condition", "metric", "value", "seed"])
        for r in reports:
            writer.writerow([r.condition, r.metric, f"{r.value:.6f}", r.seed])
