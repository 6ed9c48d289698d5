"""Command line entry points.

    hfmextract extract --arch resnet101 --images DIR --out DIR
    hfmextract convert --spair DIR --out FILE
    hfmextract info --arch resnet50

Exit codes: 0 success, 2 unreadable or malformed input data, 3 bad
flags or configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .backbone import ARCHITECTURES, WeightsUnavailableError, load_backbone
from .export import DEFAULT_MAX_SIDE, export_dir
from .spair import AnnotationSchemaError, convert_annotations


class CliInputError(Exception):
    pass


class CliConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliConfigError(message)


def _parse_ids(text: str) -> tuple[int, ...]:
    ids = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            raise CliConfigError(f"bad layer list {text!r}")
        try:
            ids.append(int(part))
        except ValueError:
            raise CliConfigError(f"bad layer id {part!r}") from None
    return tuple(ids)


def cmd_extract(args) -> int:
    layer_ids = None if args.layers is None else _parse_ids(args.layers)
    if args.max_side < 1:
        raise CliConfigError(f"--max-side must be positive, got {args.max_side}")
    try:
        backbone = load_backbone(args.arch, weights=args.weights, seed=args.seed)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    except WeightsUnavailableError as e:
        raise CliInputError(str(e)) from None
    try:
        count = export_dir(
            backbone, args.images, args.out,
            layer_ids=layer_ids, max_side=args.max_side,
        )
    except ValueError as e:
        # Unknown layer ids are a configuration problem, bad image data
        # is an input problem; ValueError from forward_collect mentions
        # the architecture name.
        if "has no layer" in str(e):
            raise CliConfigError(str(e)) from None
        raise CliInputError(str(e)) from None
    except OSError as e:
        raise CliInputError(str(e)) from None
    print(f"exported {count} image(s) to {args.out}")
    return 0


def cmd_convert(args) -> int:
    try:
        stats = convert_annotations(args.spair, args.out, split=args.split)
    except (AnnotationSchemaError, OSError) as e:
        raise CliInputError(str(e)) from None
    msg = f"wrote {stats.pairs} pair(s) to {args.out}"
    if stats.flagged:
        msg += f", {len(stats.flagged)} flagged for keypoint count"
    print(msg)
    return 0


def cmd_info(args) -> int:
    try:
        backbone = load_backbone(args.arch, weights="random", seed=0)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    print(f"{backbone.architecture}: {len(backbone.layers)} exportable layers")
    print("id  channels  stride  offset  rf")
    for info in backbone.layers:
        t = info.trace
        print(f"{info.layer_id:<3d} {info.channels:<9d} {t.jump:<7d} "
              f"{t.offset:<7g} {t.rf}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="hfmextract", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("extract", help="export CNN feature stacks for a directory")
    p.add_argument("--arch", choices=ARCHITECTURES, default="resnet101")
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--out", required=True, help="output directory for .hfm files")
    p.add_argument("--layers", default=None,
                   help="comma-separated layer ids (default: all)")
    p.add_argument("--weights", choices=("auto", "pretrained", "random"),
                   default="auto")
    p.add_argument("--seed", type=int, default=0,
                   help="init seed when weights are random")
    p.add_argument("--max-side", type=int, default=DEFAULT_MAX_SIDE,
                   help="downscale so the longer image side is at most this")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("convert", help="convert native pair annotations to JSONL")
    p.add_argument("--spair", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("info", help="print a backbone's layer geometry table")
    p.add_argument("--arch", choices=ARCHITECTURES, default="resnet50")
    p.set_defaults(fn=cmd_info)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "fn"):
            parser.print_help(sys.stderr)
            return 3
        return args.fn(args)
    except CliInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CliConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
