"""Frozen model bundle and the user-facing generation/editing/mixing operations."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoints import CheckpointError, load_checkpoint, load_module_arrays, save_module
from .embedder import EmbedderConfig, EmbeddingModel
from .gan import Generator, GeneratorConfig, LatentCode
from .imageops import photo_to_input, raster_to_input
from .mapper import AutoregressiveMapper, MapperConfig, TeacherMapper
from .procgen import PhotoSample
from .sketches import VectorSketch, rasterize

__all__ = [
    "PipelineBundle",
    "GenerateRequest",
    "GenerateResult",
    "generate",
    "mix_with_reference",
    "multimodal_variants",
    "interpolate_codes",
    "edit_session",
    "synthesize_from_code",
    "image_to_png_bytes",
]

BUNDLE_VERSION = 1
_NOISE_SEED_OFFSET = 0x5EED  # noise stream decorrelated from the latent-row stream


def image_to_png_bytes(image: np.ndarray) -> bytes:
    arr = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class PipelineBundle:
    """All frozen components needed for inference, loadable as a unit."""

    generator: Generator
    mapper: AutoregressiveMapper
    teacher: TeacherMapper
    embedder: EmbeddingModel
    config_hash: str = ""

    def __post_init__(self):
        self.generator.freeze()
        self.mapper.freeze()
        self.teacher.freeze()
        self.embedder.freeze()
        self.mapper.latent_sampler = self.generator.sample_w_rows
        if not self.config_hash:
            self.config_hash = self._compute_hash()

    def _compute_hash(self) -> str:
        h = hashlib.sha256()
        for part in (self.generator, self.mapper, self.teacher, self.embedder):
            from .gan import weights_checksum

            h.update(weights_checksum(part).encode())
        return h.hexdigest()[:16]

    @property
    def resolution(self) -> int:
        return self.generator.config.resolution

    @property
    def k(self) -> int:
        return self.generator.k

    @property
    def m_max(self) -> int:
        return self.mapper.config.m_max

    def save(self, bundle_dir: str | Path) -> Path:
        out = Path(bundle_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_module(out / "generator.ckpt", "generator",
                    dataclasses.asdict(self.generator.config), self.generator)
        save_module(out / "mapper.ckpt", "mapper",
                    dataclasses.asdict(self.mapper.config), self.mapper)
        save_module(out / "teacher.ckpt", "teacher",
                    dataclasses.asdict(self.teacher.config), self.teacher)
        save_module(out / "embedder.ckpt", "embedder",
                    dataclasses.asdict(self.embedder.config), self.embedder,
                    extra={"trained": self.embedder.trained})
        (out / "bundle.json").write_text(json.dumps({
            "version": BUNDLE_VERSION,
            "config_hash": self.config_hash,
        }, indent=1))
        return out

    @classmethod
    def load(cls, bundle_dir: str | Path) -> "PipelineBundle":
        root = Path(bundle_dir)
        meta_path = root / "bundle.json"
        if not meta_path.exists():
            raise CheckpointError(f"no bundle at {root}")
        meta = json.loads(meta_path.read_text())
        if meta.get("version") != BUNDLE_VERSION:
            raise CheckpointError(f"unsupported bundle version {meta.get('version')}")

        _, g_cfg, g_arr, _ = load_checkpoint(root / "generator.ckpt", "generator")
        generator = Generator(GeneratorConfig(**g_cfg))
        load_module_arrays(generator, g_arr)

        _, m_cfg, m_arr, _ = load_checkpoint(root / "mapper.ckpt", "mapper")
        mapper = AutoregressiveMapper(MapperConfig(**m_cfg))
        load_module_arrays(mapper, m_arr)

        _, t_cfg, t_arr, _ = load_checkpoint(root / "teacher.ckpt", "teacher")
        teacher = TeacherMapper(MapperConfig(**t_cfg))
        load_module_arrays(teacher, t_arr)

        _, e_cfg, e_arr, extra = load_checkpoint(root / "embedder.ckpt", "embedder")
        embedder = EmbeddingModel(EmbedderConfig(**e_cfg))
        load_module_arrays(embedder, e_arr)
        embedder.trained = bool(extra.get("trained", False))

        bundle = cls(generator=generator, mapper=mapper, teacher=teacher, embedder=embedder,
                     config_hash=meta.get("config_hash", ""))
        return bundle


@dataclass(frozen=True)
class GenerateRequest:
    sketch: VectorSketch
    seed: int = 0
    m: int | None = None  # unroll depth; defaults to the mapper's m_max
    reference_photo: PhotoSample | None = None
    split_index: int | None = None


@dataclass
class GenerateResult:
    image: np.ndarray  # (M, M, 3) float32 in [-1, 1]
    latent: LatentCode
    seed: int

    def png_bytes(self) -> bytes:
        return image_to_png_bytes(self.image)


def _noise_seed(seed: int) -> int:
    return (int(seed) + _NOISE_SEED_OFFSET) & 0x7FFFFFFF


def synthesize_from_code(bundle: PipelineBundle, code: LatentCode, seed: int) -> GenerateResult:
    image = bundle.generator.synthesize(code, noise_seed=_noise_seed(seed))
    return GenerateResult(image=image, latent=code, seed=int(seed))


def generate(bundle: PipelineBundle, req: GenerateRequest) -> GenerateResult:
    """rasterize -> predict latents -> synthesize; deterministic per (request, bundle)."""
    m = req.m if req.m is not None else bundle.m_max
    if not 1 <= m <= bundle.m_max:
        raise ValueError(f"m must be in [1, {bundle.m_max}], got {m}")
    raster = rasterize(req.sketch, bundle.resolution)
    code = bundle.mapper.predict_latents(raster_to_input(raster), m, rand_seed=req.seed)
    if req.reference_photo is not None:
        split = req.split_index if req.split_index is not None else (2 * bundle.k) // 3
        code = mix_with_reference(bundle, code, req.reference_photo, split)
    return synthesize_from_code(bundle, code, req.seed)


def mix_with_reference(bundle: PipelineBundle, sketch_code: LatentCode,
                       ref_photo: PhotoSample, split_index: int) -> LatentCode:
    """Coarse/mid rows from the sketch, fine rows from the photo-inverted reference."""
    if not 0 <= split_index <= bundle.k:
        raise ValueError(f"split_index must be in [0, {bundle.k}]")
    ref_code = bundle.teacher.teacher_predict(photo_to_input(ref_photo.pixels))
    codes = torch.cat([sketch_code.codes[:split_index], ref_code.codes[split_index:]], dim=0)
    return LatentCode(codes=codes, mask=np.ones(bundle.k, dtype=bool))


def multimodal_variants(bundle: PipelineBundle, sketch_code: LatentCode, split_index: int,
                        n: int, seed: int) -> list[LatentCode]:
    """Keep rows below the split, resample the rest independently per variant."""
    if not 0 <= split_index <= bundle.k:
        raise ValueError(f"split_index must be in [0, {bundle.k}]")
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    out = []
    for _ in range(n):
        fresh = bundle.mapper.sample_random_rows(bundle.k - split_index, gen)
        codes = torch.cat([sketch_code.codes[:split_index], fresh.to(sketch_code.codes.dtype)], dim=0)
        mask = sketch_code.mask.copy()
        mask[split_index:] = False
        out.append(LatentCode(codes=codes, mask=mask))
    return out


def interpolate_codes(code_a: LatentCode, code_b: LatentCode, t: float) -> LatentCode:
    """Rowwise (1-t) A + t B; endpoint values reproduce the endpoints exactly."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if code_a.codes.shape != code_b.codes.shape:
        raise ValueError("latent codes must share (k, d)")
    if t == 0.0:
        return code_a.clone()
    if t == 1.0:
        return code_b.clone()
    codes = (1.0 - t) * code_a.codes + t * code_b.codes
    return LatentCode(codes=codes, mask=code_a.mask & code_b.mask)


def edit_session(bundle: PipelineBundle, previous: GenerateRequest,
                 modified_sketch: VectorSketch, seed: int | None = None,
                 m: int | None = None) -> tuple[GenerateRequest, GenerateResult]:
    """Re-generate with the previous seed and unroll depth unless overridden,
    so output changes are attributable to the stroke edits alone."""
    req = GenerateRequest(
        sketch=modified_sketch,
        seed=previous.seed if seed is None else seed,
        m=previous.m if m is None else m,
        reference_photo=previous.reference_photo,
        split_index=previous.split_index,
    )
    return req, generate(bundle, req)
