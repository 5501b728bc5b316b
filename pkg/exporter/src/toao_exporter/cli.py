"""toao-export: run feature export from a manifest file."""

from __future__ import annotations

import argparse
import sys

from .encoders import ModelUnavailable
from .export import export_features, export_text_embeddings
from .manifest import ExportManifest, LayoutError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="toao-export", description=__doc__)
    parser.add_argument("--manifest", required=True, help="export manifest JSON")
    parser.add_argument(
        "--stub", action="store_true",
        help="use the deterministic offline encoder instead of pretrained models",
    )
    args = parser.parse_args(argv)

    try:
        manifest = ExportManifest.from_file(args.manifest)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: invalid manifest: {err}", file=sys.stderr)
        return 2
    try:
        gff = export_features(manifest, stub=args.stub)
        print(f"wrote {gff}")
        if manifest.text_queries:
            text = export_text_embeddings(list(manifest.text_queries), manifest, stub=args.stub)
            print(f"wrote {text}")
    except LayoutError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ModelUnavailable as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
