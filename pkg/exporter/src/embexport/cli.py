"""Command line for the embedding exporter.

Exit codes: 0 success, 1 usage or manifest/encoder error, 2 export failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .encoders import get_encoder
from .errors import EncoderError, ExportError, ManifestError
from .export import export_embeddings
from .manifest import read_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embexport",
        description="Encode images and captions into binary embedding files.")
    parser.add_argument("manifest", help="tab-separated post_id, image path, caption")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--dim", type=int, required=True,
                        help="embedding width d_origin")
    parser.add_argument("--model", default="color-proj-v1",
                        help="registered encoder identifier")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        manifest = read_manifest(args.manifest, args.dim, args.model)
        encoder = get_encoder(args.model, args.dim)
        summary = export_embeddings(manifest, args.out, encoder)
    except (ManifestError, EncoderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 2
    print(f"exported {summary['rows']} rows "
          f"({summary['skipped']} skipped) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
