"""Command line: fakevid-extract --manifest PATH --out DIR."""

from __future__ import annotations

import argparse
import sys

from .manifest import ManifestError
from .media import MediaError
from .pipeline import extract_all


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fakevid-extract", description=__doc__)
    parser.add_argument("--manifest", required=True, help="extraction manifest JSON")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--float-mode", choices=("jsonl", "f32bin"), default="jsonl")
    args = parser.parse_args(argv)
    try:
        report = extract_all(args.manifest, args.out, float_mode=args.float_mode)
    except ManifestError as e:
        print(f"manifest error: {e}", file=sys.stderr)
        return 2
    except MediaError as e:
        print(f"media error: {e}", file=sys.stderr)
        return 3
    for warning in report["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    for err in report["errors"]:
        print(f"error: {err['video_id']}: {err['error']}", file=sys.stderr)
    print(f"wrote {report['written']} records to {args.out} ({len(report['errors'])} errors)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
