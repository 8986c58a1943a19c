"""HTTP inference service over a frozen pipeline bundle.

Stateless apart from a small content-addressed LRU of uploaded reference photos;
the bundle is swapped atomically by replacing `app.state.bundle`.
"""

from __future__ import annotations

import base64
import hashlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel

from .gan import LatentCode
from .pipeline import (
    GenerateRequest,
    GenerateResult,
    PipelineBundle,
    generate,
    interpolate_codes,
    mix_with_reference,
    multimodal_variants,
    synthesize_from_code,
)
from .procgen import PhotoSample, png_bytes_to_photo
from .sketches import SketchFormatError, sketch_from_json

__all__ = ["create_app", "REFERENCE_LRU_SIZE"]

REFERENCE_LRU_SIZE = 32


class GenerateBody(BaseModel):
    sketch: dict
    seed: int = 0
    m: int | None = None
    reference_photo_id: str | None = None
    split_index: int | None = None


class MixBody(BaseModel):
    latent: dict
    reference_id: str
    split: int
    seed: int = 0


class InterpolateBody(BaseModel):
    latentA: dict
    latentB: dict
    t: float
    seed: int = 0


class VariantsBody(BaseModel):
    latent: dict
    split: int
    n: int
    seed: int = 0


def _result_payload(result: GenerateResult) -> dict:
    latent_json = result.latent.to_json()
    return {
        "png_base64": base64.b64encode(result.png_bytes()).decode("ascii"),
        "latent": latent_json,
        "mask": latent_json["mask"],
        "seed": result.seed,
    }


def _parse_latent(obj: dict) -> LatentCode:
    try:
        return LatentCode.from_json(obj)
    except (KeyError, ValueError, TypeError) as e:
        raise HTTPException(status_code=400, detail=f"malformed latent: {e}") from e


def create_app(bundle: PipelineBundle | None = None, bundle_path: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="sketchgen inference service")
    if bundle is None and bundle_path is not None:
        try:
            bundle = PipelineBundle.load(bundle_path)
        except Exception:
            bundle = None
    app.state.bundle = bundle
    app.state.references = OrderedDict()

    def need_bundle() -> PipelineBundle:
        if app.state.bundle is None:
            raise HTTPException(status_code=503, detail="no pipeline bundle loaded")
        return app.state.bundle

    def get_reference(ref_id: str) -> PhotoSample:
        refs = app.state.references
        if ref_id not in refs:
            raise HTTPException(status_code=404, detail=f"unknown reference id {ref_id!r}")
        refs.move_to_end(ref_id)
        return refs[ref_id]

    @app.get("/api/health")
    def health():
        b = need_bundle()
        return {"bundle_hash": b.config_hash}

    @app.post("/api/generate")
    def api_generate(body: GenerateBody):
        b = need_bundle()
        try:
            sketch = sketch_from_json(body.sketch)
        except SketchFormatError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        reference = None
        if body.reference_photo_id is not None:
            reference = get_reference(body.reference_photo_id)
        req = GenerateRequest(sketch=sketch, seed=body.seed, m=body.m,
                              reference_photo=reference, split_index=body.split_index)
        try:
            result = generate(b, req)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        return _result_payload(result)

    @app.post("/api/reference")
    async def api_reference(request: Request):
        b = need_bundle()
        data = await request.body()
        if not data:
            raise HTTPException(status_code=400, detail="empty reference upload")
        try:
            photo = png_bytes_to_photo(data, resolution=b.resolution)
        except Exception as e:
            raise HTTPException(status_code=400, detail=f"invalid PNG upload: {e}") from e
        ref_id = hashlib.sha256(data).hexdigest()[:16]
        refs = app.state.references
        refs[ref_id] = photo
        refs.move_to_end(ref_id)
        while len(refs) > REFERENCE_LRU_SIZE:
            refs.popitem(last=False)
        return {"id": ref_id}

    @app.post("/api/mix")
    def api_mix(body: MixBody):
        b = need_bundle()
        code = _parse_latent(body.latent)
        reference = get_reference(body.reference_id)
        try:
            mixed = mix_with_reference(b, code, reference, body.split)
            result = synthesize_from_code(b, mixed, body.seed)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        return _result_payload(result)

    @app.post("/api/interpolate")
    def api_interpolate(body: InterpolateBody):
        b = need_bundle()
        code_a = _parse_latent(body.latentA)
        code_b = _parse_latent(body.latentB)
        try:
            code = interpolate_codes(code_a, code_b, body.t)
            result = synthesize_from_code(b, code, body.seed)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        return _result_payload(result)

    @app.post("/api/variants")
    def api_variants(body: VariantsBody):
        b = need_bundle()
        code = _parse_latent(body.latent)
        try:
            codes = multimodal_variants(b, code, body.split, body.n, body.seed)
            results = [synthesize_from_code(b, c, body.seed + i) for i, c in enumerate(codes)]
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        return {"variants": [_result_payload(r) for r in results]}

    return app
