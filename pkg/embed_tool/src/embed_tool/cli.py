"""embed-tool command line: encode a manifest, verify a cache."""

from __future__ import annotations

import argparse
import sys

from .cachefile import SchemaViolation, verify_cache
from .encode import encode_manifest
from .encoders import EncoderLoadFailure, make_encoder
from .manifest import ManifestError, load_manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-tool",
        description="Encode surface images and friction-table texts into an "
                    "embedding cache file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a source manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", default="hash-projection-512",
                   help="hash-projection[-D] or clip:<model-id>")
    p.add_argument("--out", required=True)
    p.add_argument("--created", help="override the provenance timestamp")

    p = sub.add_parser("verify", help="re-validate a cache file")
    p.add_argument("--cache", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "encode":
            manifest = load_manifest(args.manifest)
            encoder = make_encoder(args.encoder)
            stats = encode_manifest(manifest, encoder, args.out, created=args.created)
            print(f"wrote {args.out}: {stats['images']} image / {stats['texts']} text "
                  f"records, dimension {stats['dimension']} ({stats['encoder']})")
            return 0
        report = verify_cache(args.cache)
        print(report)
        return 0 if report.ok else 1
    except (ManifestError, EncoderLoadFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SchemaViolation as e:
        print(f"schema violation: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
