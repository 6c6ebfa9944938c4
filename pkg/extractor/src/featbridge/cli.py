"""Command-line front end: one flag per ExtractorConfig field."""

import argparse
import sys

from .errors import ConfigError, DataError
from .extract import ExtractorConfig, extract

EXIT_CONFIG = 2
EXIT_DATA = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="featbridge",
        description="Embed manifest images with a frozen CNN backbone and "
                    "write a multi-scale embedding file.")
    p.add_argument("manifest", help="CSV (path,label header) or JSON manifest")
    p.add_argument("--out", default="embeddings.bin", help="output embedding file")
    p.add_argument("--backbone", default="resnet50", help="torchvision model name")
    p.add_argument("--taps", default="layer2,layer3",
                   help="comma-separated module names whose outputs become scales")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--weights", default="default", choices=("default", "random"),
                   help="'default' loads pretrained weights; 'random' is a seeded init")
    p.add_argument("--init-seed", type=int, default=0,
                   help="seed for --weights random")
    p.add_argument("--skip-log", default=None,
                   help="where to record unreadable images (default: OUT.skipped)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExtractorConfig(
            backbone=args.backbone,
            taps=tuple(t.strip() for t in args.taps.split(",") if t.strip()),
            image_size=args.image_size,
            out_path=args.out,
            batch_size=args.batch_size,
            weights=args.weights,
            init_seed=args.init_seed,
            skip_log=args.skip_log,
        )
        result = extract(args.manifest, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(result.written_ids)} records "
          f"({len(result.skipped)} skipped) -> {result.out_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
