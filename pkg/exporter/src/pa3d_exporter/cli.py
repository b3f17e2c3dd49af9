"""pa3d-export: features | text."""

from __future__ import annotations

import argparse
import sys

from .encoders import MissingWeightsError, UnknownEncoderError
from .export import DEFAULT_TEMPLATES, ExportJob, export_2d_features, \
    export_text_embeddings
from .formats import ExportFormatError
from .render import RigSpec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pa3d-export",
        description="Render shapes and export dense 2D feature caches and "
                    "text tables in the core pa3d formats.")
    sub = p.add_subparsers(dest="cmd", required=True)

    fe = sub.add_parser("features", help="export per-shape feature caches")
    fe.add_argument("--cloud", required=True, help="dataset root or shape dir")
    fe.add_argument("--out", required=True)
    fe.add_argument("--encoder", default="toy-spectral-v1")
    fe.add_argument("--dim", type=int, default=16)
    fe.add_argument("--views", type=int, default=10)
    fe.add_argument("--resolution", type=int, default=128)
    fe.add_argument("--radius", type=float, default=2.2)
    fe.add_argument("--fov", type=float, default=50.0)
    fe.add_argument("--elevations", default="0,35", help="degrees, comma-separated")
    fe.add_argument("--num-patches", type=int, default=32)
    fe.add_argument("--patch-size", type=int, default=16)
    fe.add_argument("--seed", type=int, default=0)
    fe.add_argument("--shading", default="depth", choices=["depth", "flat"])
    fe.add_argument("--pa3d-bin", default="pa3d")

    te = sub.add_parser("text", help="export a text table for part names")
    te.add_argument("--parts", required=True, help="comma-separated names")
    te.add_argument("--out", required=True)
    te.add_argument("--encoder", default="hashed-ngrams-v1")
    te.add_argument("--dim", type=int, default=16)
    te.add_argument("--templates", default=None,
                    help="'|'-separated templates with {part} placeholders")
    return p


def run_cli(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.cmd == "features":
            rig = RigSpec(views=args.views, radius=args.radius,
                          elevations_deg=tuple(
                              float(e) for e in args.elevations.split(",")
                              if e.strip()),
                          fov_deg=args.fov, resolution=args.resolution)
            job = ExportJob(cloud_dir=args.cloud, out_dir=args.out,
                            encoder_id=args.encoder, feature_dim=args.dim,
                            rig=rig, num_patches=args.num_patches,
                            patch_size=args.patch_size, seed=args.seed,
                            shading=args.shading, pa3d_bin=args.pa3d_bin)
            summary = export_2d_features(job)
            print(f"exported {summary['shapes']} shapes "
                  f"({summary['provenance']}) -> {summary['caches']}",
                  file=sys.stderr)
        else:
            templates = tuple(args.templates.split("|")) if args.templates \
                else DEFAULT_TEMPLATES
            summary = export_text_embeddings(
                [s.strip() for s in args.parts.split(",") if s.strip()],
                args.out, encoder_id=args.encoder, dim=args.dim,
                templates=templates)
            print(f"exported {summary['parts']} part embeddings "
                  f"({summary['provenance']}) -> {summary['table']}",
                  file=sys.stderr)
        return 0
    except MissingWeightsError as e:
        print(f"error: missing weights: {e}", file=sys.stderr)
        return 1
    except (UnknownEncoderError, ExportFormatError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
