"""CLI: ogff-extract --images '<glob>' --out <dir> [--max-kp 1024]."""

from __future__ import annotations

import argparse
import glob
import logging
import sys

from .backends import make_backend
from .extract import ExtractionJob, extract


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="ogff-extract",
                                     description="extract OGFF features from images")
    parser.add_argument("--images", required=True, help="glob pattern of input images")
    parser.add_argument("--out", required=True)
    parser.add_argument("--max-kp", type=int, default=1024)
    parser.add_argument("--max-side", type=int, default=630,
                        help="long-side bound for guidance extraction")
    parser.add_argument("--backend", choices=["classical", "pretrained"],
                        default="classical")
    parser.add_argument("--superpoint", help="local SuperPoint checkpoint dir")
    parser.add_argument("--dinov2", help="local DINOv2 checkpoint dir")
    args = parser.parse_args(argv)

    paths = sorted(glob.glob(args.images))
    if not paths:
        print(f"error: no images match {args.images!r}", file=sys.stderr)
        return 1
    try:
        backend = make_backend(args.backend, args.max_kp, args.max_side,
                               args.superpoint, args.dinov2)
        job = ExtractionJob(image_paths=paths, out_dir=args.out,
                            max_side=args.max_side, max_keypoints=args.max_kp)
        result = extract(job, backend)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(result.written)} feature files to {args.out}"
          + (f", {len(result.failed)} failed" if result.failed else ""))
    return 0 if not result.failed or result.written else 1


if __name__ == "__main__":
    sys.exit(main())
