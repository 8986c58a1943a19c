"""Command line entry points.

Every command reads an optional JSON config file plus `--set section.field=value`
overrides (flags beat SKETCHGEN_* environment variables, which beat the file)
and logs the resolved config hash. Exit code 0 on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .configs import resolve_config

logger = logging.getLogger("sketchgen")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.FIELD=VALUE", help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchgen",
                                     description="sketch-to-photo generation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("make-dataset", "synthesize and save the procedural paired dataset"),
        ("train-gan", "adversarially pre-train the photo generator"),
        ("train-embedder", "train the sketch/photo retrieval embedder"),
        ("train-teacher", "train the photo-to-photo inversion teacher"),
        ("train-mapper", "train the autoregressive sketch mapper and build the bundle"),
        ("evaluate", "compute FID/FGM/retrieval metrics on the held-out split"),
        ("sweep", "robustness sweep over noise fractions and completion levels"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name.startswith("train"):
            p.add_argument("--progress-every", type=int, default=100)

    g = sub.add_parser("generate", help="generate a photo from a sketch JSON file")
    _add_common(g)
    g.add_argument("--bundle", type=str, default=None, help="bundle directory (default: workdir/bundle)")
    g.add_argument("--sketch", type=str, required=True)
    g.add_argument("--out", type=str, required=True, help="output PNG path")
    g.add_argument("--latent-out", type=str, default=None, help="optional latent JSON path")
    g.add_argument("--m", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("interpolate", help="interpolate between two sketches' latent codes")
    _add_common(i)
    i.add_argument("--bundle", type=str, default=None)
    i.add_argument("--sketch-a", type=str, required=True)
    i.add_argument("--sketch-b", type=str, required=True)
    i.add_argument("--t", type=float, required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", type=str, required=True)

    s = sub.add_parser("serve", help="run the HTTP inference service")
    _add_common(s)
    s.add_argument("--bundle", type=str, default=None,
                   help="bundle directory (default: $SKETCHGEN_BUNDLE or workdir/bundle)")
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--host", type=str, default="127.0.0.1")

    return parser


def _bundle_dir(args, cfg: dict) -> Path:
    import os

    if getattr(args, "bundle", None):
        return Path(args.bundle)
    env = os.environ.get("SKETCHGEN_BUNDLE")
    if env:
        return Path(env)
    return Path(cfg["workdir"]) / "bundle"


def _load_bundle(args, cfg: dict):
    from .pipeline import PipelineBundle

    return PipelineBundle.load(_bundle_dir(args, cfg))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args.config, args.overrides)

    from . import workflow

    if args.command == "make-dataset":
        workflow.run_make_dataset(cfg)
    elif args.command == "train-gan":
        workflow.run_train_gan(cfg, progress_every=args.progress_every)
    elif args.command == "train-embedder":
        workflow.run_train_embedder(cfg)
    elif args.command == "train-teacher":
        workflow.run_train_teacher(cfg)
    elif args.command == "train-mapper":
        workflow.run_train_mapper(cfg, progress_every=args.progress_every)
    elif args.command == "evaluate":
        for report in workflow.run_evaluate(cfg):
            print(f"{report.metric}: {report.value:.4f}")
    elif args.command == "sweep":
        for report in workflow.run_sweep(cfg):
            print(f"{report.condition} {report.metric}: {report.value:.4f}")
    elif args.command == "generate":
        from .pipeline import GenerateRequest, generate
        from .sketches import sketch_from_json

        bundle = _load_bundle(args, cfg)
        sketch = sketch_from_json(Path(args.sketch).read_text())
        result = generate(bundle, GenerateRequest(sketch=sketch, seed=args.seed, m=args.m))
        Path(args.out).write_bytes(result.png_bytes())
        if args.latent_out:
            Path(args.latent_out).write_text(json.dumps(result.latent.to_json()))
        logger.info("wrote %s", args.out)
    elif args.command == "interpolate":
        from .imageops import raster_to_input
        from .pipeline import interpolate_codes, synthesize_from_code
        from .sketches import rasterize, sketch_from_json

        bundle = _load_bundle(args, cfg)
        codes = []
        for path in (args.sketch_a, args.sketch_b):
            sketch = sketch_from_json(Path(path).read_text())
            raster = rasterize(sketch, bundle.resolution)
            codes.append(bundle.mapper.predict_latents(raster_to_input(raster),
                                                       bundle.m_max, rand_seed=args.seed))
        mixed = interpolate_codes(codes[0], codes[1], args.t)
        result = synthesize_from_code(bundle, mixed, args.seed)
        Path(args.out).write_bytes(result.png_bytes())
        logger.info("wrote %s", args.out)
    elif args.command == "serve":
        import uvicorn

        from .service import create_app

        app = create_app(bundle_path=_bundle_dir(args, cfg))
        port = args.port if args.port is not None else cfg["service"]["port"]
        uvicorn.run(app, host=args.host, port=port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
