"""Command-line front end for folder and single-image extraction."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .adapter import ExtractorConfig, extract_folder, extract_one
from .errors import ExtractorError, IoError


def _size(text: str) -> tuple[int, int]:
    # "40" or "40x56" (width x height)
    if "x" in text:
        w, h = text.split("x", 1)
        return (int(w), int(h))
    return (int(text), int(text))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="resnet18")
    p.add_argument("--layer", default=None,
                   help="module whose input is the embedding (default: last linear)")
    p.add_argument("--resize", type=_size, default=(40, 40), metavar="WxH")
    p.add_argument("--crop", type=_size, default=(32, 32), metavar="WxH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", default=None,
                   help="local state_dict; omitted means seeded initialization")
    p.add_argument("--batch-size", type=int, default=16)


def _config(args: argparse.Namespace) -> ExtractorConfig:
    return ExtractorConfig(
        model=args.model,
        layer=args.layer,
        resize=args.resize,
        crop=args.crop,
        seed=args.seed,
        weights_path=args.weights,
        batch_size=args.batch_size,
    )


def cmd_folder(args: argparse.Namespace) -> int:
    report = extract_folder(args.images, _config(args), args.out, args.manifest)
    print(
        f"wrote {report.records} records ({len(report.classes)} classes, "
        f"dim {report.dim}) to {args.out}"
        + (f", skipped {report.skipped} undecodable" if report.skipped else "")
    )
    return 0


def cmd_one(args: argparse.Namespace) -> int:
    line = extract_one(args.image, _config(args), args.id)
    if args.out:
        try:
            Path(args.out).write_text(line + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {args.out}: {exc}") from exc
    else:
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntd-extract",
        description="embed labeled images into validated-store files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("folder", help="embed a class-labeled directory tree")
    p.add_argument("--images", required=True, help="root with class subdirectories")
    p.add_argument("--out", required=True, help="store file to write")
    p.add_argument("--manifest", default=None, help="class-name manifest to write")
    _add_common(p)
    p.set_defaults(func=cmd_folder)

    p = sub.add_parser("one", help="embed a single image as a text line")
    p.add_argument("--image", required=True)
    p.add_argument("--id", default=None, help="input id (default: file stem)")
    p.add_argument("--out", default=None, help="write the line here instead of stdout")
    _add_common(p)
    p.set_defaults(func=cmd_one)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
