"""Command line front end.

Subcommands: ``synth`` writes deterministic feature stacks, ``match``
prints a dense flow table, ``eval`` scores keypoint transfer over an
annotation file, ``search`` runs the layer-subset beam search, and
``bench`` times the matching kernel.

Exit codes: 0 on success, 2 for input problems (missing or unreadable
files, malformed annotations), 3 for configuration problems (bad flag
values, absent layer ids, empty datasets).  Worker count comes from
``--threads``, then the HYPERFLOW_THREADS environment variable, then
the CPU count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import (
    PckConfig,
    bench_match,
    correspondence_pipeline,
    evaluate_dataset,
    load_annotations,
)
from .feature_io import (
    LayerGeometry,
    StackCorruptionError,
    StackFormatError,
    StackValidationError,
    load_stack,
    planted_pair,
    save_stack,
    synth_stack,
)
from .flow import flow_table_lines, form_flow
from .hyperimage import LayerSet, assemble
from .layersearch import SearchConfig, make_pck_evaluator, search
from .parallel import resolve_threads
from .rhm import RhmConfig, match

SCHEMA_VERSION = 1


class CliInputError(Exception):
    """Problem with an input file: exit code 2."""


class CliConfigError(Exception):
    """Problem with requested configuration: exit code 3."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliConfigError(message)


# ------------------------------------------------------------- flag parsing


def _parse_ids(text: str) -> tuple[int, ...]:
    """Layer id list: comma-separated ints, ``a-b`` expands inclusively."""
    out: list[int] = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if "-" in token[1:]:  # allow leading minus to fail int() below
            lo_s, hi_s = token.split("-", 1) if not token.startswith("-") else (token, "")
            try:
                lo, hi = int(lo_s), int(hi_s)
            except ValueError:
                raise CliConfigError(f"bad layer range {token!r}") from None
            if hi < lo:
                raise CliConfigError(f"empty layer range {token!r}")
            out.extend(range(lo, hi + 1))
        else:
            try:
                out.append(int(token))
            except ValueError:
                raise CliConfigError(f"bad layer id {token!r}") from None
    if not out:
        raise CliConfigError(f"no layer ids in {text!r}")
    return tuple(out)


def _parse_bins(text: str) -> tuple[int, int]:
    try:
        if "x" in text:
            a, b = text.split("x", 1)
            return int(a), int(b)
        n = int(text)
        return n, n
    except ValueError:
        raise CliConfigError(f"bad bins {text!r}, expected N or NYxNX") from None


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.split("x", 1)
        return int(h), int(w)
    except ValueError:
        raise CliConfigError(f"bad dims {text!r}, expected HxW") from None


def _rhm_config(args) -> RhmConfig:
    by, bx = _parse_bins(args.bins)
    try:
        return RhmConfig(
            exponent=args.exponent, bins_y=by, bins_x=bx, fixed_range=args.fixed_range
        )
    except ValueError as e:
        raise CliConfigError(str(e)) from None


def _threads(args) -> int:
    try:
        return resolve_threads(args.threads)
    except ValueError as e:
        raise CliConfigError(str(e)) from None


def _load_stack(path):
    try:
        return load_stack(path)
    except FileNotFoundError:
        raise CliInputError(f"no such file: {path}") from None
    except IsADirectoryError:
        raise CliInputError(f"not a file: {path}") from None
    except (StackFormatError, StackCorruptionError, StackValidationError) as e:
        raise CliInputError(str(e)) from None


def _load_annotations(path):
    try:
        pairs = load_annotations(path)
    except FileNotFoundError:
        raise CliInputError(f"no such file: {path}") from None
    except ValueError as e:
        raise CliInputError(str(e)) from None
    if not pairs:
        raise CliConfigError(f"{path}: annotation file is empty")
    return pairs


def _assemble(stack, layers: LayerSet):
    try:
        return assemble(stack, layers)
    except ValueError as e:
        raise CliConfigError(str(e)) from None


def _load_stack_dir(stack_dir, pairs) -> dict:
    image_ids = sorted({p.src_image for p in pairs} | {p.tgt_image for p in pairs})
    root = Path(stack_dir)
    missing = [i for i in image_ids if not (root / f"{i}.hfm").is_file()]
    if missing:
        raise CliInputError(
            f"missing stack files under {stack_dir}: "
            + ", ".join(f"{i}.hfm" for i in missing)
        )
    return {i: _load_stack(root / f"{i}.hfm") for i in image_ids}


def _emit(text: str, out_path) -> None:
    if out_path:
        Path(out_path).write_text(text + ("" if text.endswith("\n") else "\n"))
    else:
        print(text)


# -------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    g_args = args.layer or []
    layer_specs = []
    for spec in g_args:
        parts = spec.split(",")
        if len(parts) != 7:
            raise CliConfigError(
                f"bad --layer {spec!r}, expected id,channels,h,w,stride,offset,rf"
            )
        try:
            lid, c, h, w = (int(v) for v in parts[:4])
            stride, offset, rf = (float(v) for v in parts[4:])
            geometry = LayerGeometry(
                stride_y=stride, stride_x=stride,
                offset_y=offset, offset_x=offset, rf_size=rf,
            )
        except (ValueError, StackValidationError) as e:
            raise CliConfigError(f"bad --layer {spec!r}: {e}") from None
        layer_specs.append((lid, c, h, w, geometry))
    if not layer_specs:
        raise CliConfigError("at least one --layer is required")
    dims = _parse_dims(args.dims)
    try:
        if args.shift is not None:
            if not args.tgt_out:
                raise CliConfigError("--shift requires --tgt-out")
            dy_s, dx_s = args.shift.split(",")
            src, tgt = planted_pair(
                args.seed, tuple(layer_specs), (int(dy_s), int(dx_s)), dims
            )
            save_stack(src, args.out)
            save_stack(tgt, args.tgt_out)
        else:
            save_stack(
                synth_stack(args.seed, tuple(layer_specs), dims, image_id=args.image_id),
                args.out,
            )
    except (ValueError, StackValidationError) as e:
        raise CliConfigError(str(e)) from None
    except OSError as e:
        raise CliInputError(f"cannot write stack: {e}") from None
    return 0


def cmd_match(args) -> int:
    layers = LayerSet.from_ids(_parse_ids(args.layers))
    cfg = _rhm_config(args)
    threads = _threads(args)
    src = _assemble(_load_stack(args.src), layers)
    tgt = _assemble(_load_stack(args.tgt), layers)
    conf = match(src, tgt, cfg, threads)
    flow = form_flow(conf, src, tgt)
    if args.conf_out:
        np.save(args.conf_out, conf.values)
    if args.format == "json":
        rows = [
            [int(q // flow.grid[1]), int(q % flow.grid[1])]
            + [float(v) for v in flow.src_coords[q]]
            + [float(v) for v in flow.tgt_coords[q]]
            + [float(flow.confidence[q])]
            for q in range(flow.src_coords.shape[0])
        ]
        payload = {
            "schema_version": SCHEMA_VERSION,
            "grid": list(flow.grid),
            "columns": ["i", "j", "y_src", "x_src", "y_tgt", "x_tgt", "conf"],
            "flow": rows,
        }
        _emit(json.dumps(payload, indent=2), args.out)
    else:
        _emit("\n".join(flow_table_lines(flow)), args.out)
    return 0


def cmd_eval(args) -> int:
    pairs = _load_annotations(args.annotations)
    layers = LayerSet.from_ids(_parse_ids(args.layers))
    rhm_cfg = _rhm_config(args)
    threads = _threads(args)
    try:
        pck_cfg = PckConfig(alpha=args.alpha, reference=args.ref)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    stacks = _load_stack_dir(args.stack_dir, pairs)
    for stack in stacks.values():  # surface absent layers as config errors
        _assemble(stack, layers)
    pipeline = correspondence_pipeline(stacks, layers, rhm_cfg, threads)
    report = evaluate_dataset(pairs, pipeline, pck_cfg, threads)
    if args.format == "json":
        _emit(json.dumps(report.to_json_dict(), indent=2), args.out)
    else:
        _emit(report.to_text(), args.out)
    if report.pair_count == 0:
        print("error: every pair failed to evaluate", file=sys.stderr)
        return 2
    return 0


def cmd_search(args) -> int:
    pairs = _load_annotations(args.annotations)
    rhm_cfg = _rhm_config(args)
    threads = _threads(args)
    try:
        pck_cfg = PckConfig(alpha=args.alpha, reference=args.ref)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    stacks = _load_stack_dir(args.stack_dir, pairs)

    if args.candidates:
        candidates = _parse_ids(args.candidates)
    else:
        first = stacks[sorted(stacks)[0]]
        candidates = first.layer_ids()
    base = _parse_ids(args.base) if args.base else candidates
    try:
        cfg = SearchConfig(
            candidates=candidates,
            base_candidates=base,
            beam_size=args.beam,
            max_layers=args.max_layers,
        )
    except ValueError as e:
        raise CliConfigError(str(e)) from None

    evaluator = make_pck_evaluator(pairs, stacks, rhm_cfg, pck_cfg, threads)
    trace_rows: list[tuple[int, tuple[int, ...], float]] = []

    def trace(iteration, layers, score):
        trace_rows.append((iteration, layers, score))

    try:
        best, score = search(cfg, evaluator, trace)
    except ValueError as e:
        raise CliConfigError(str(e)) from None

    if args.trace_out:
        with open(args.trace_out, "w", encoding="utf-8") as f:
            for it, layers, s in trace_rows:
                f.write(f"{it} {','.join(str(l) for l in layers)} {s:.6f}\n")
    if args.plot_data:
        with open(args.plot_data, "w", encoding="utf-8") as f:
            f.write("iteration,best_score\n")
            best_so_far = None
            for it in sorted({r[0] for r in trace_rows}):
                here = max(s for i, _, s in trace_rows if i == it)
                best_so_far = here if best_so_far is None else max(best_so_far, here)
                f.write(f"{it},{best_so_far:.6f}\n")

    if args.format == "json":
        payload = {
            "schema_version": SCHEMA_VERSION,
            "layers": list(best.all_ids()),
            "base": best.base,
            "score": score,
            "evaluations": len(trace_rows),
        }
        _emit(json.dumps(payload, indent=2), args.out)
    else:
        _emit(
            f"layers: {','.join(str(l) for l in best.all_ids())}\n"
            f"score: {score:.6f}\n"
            f"evaluations: {len(trace_rows)}",
            args.out,
        )
    return 0


def cmd_bench(args) -> int:
    layers = LayerSet.from_ids(_parse_ids(args.layers))
    cfg = _rhm_config(args)
    threads = _threads(args)
    src = _assemble(_load_stack(args.src), layers)
    tgt = _assemble(_load_stack(args.tgt), layers)
    try:
        stats = bench_match(src, tgt, cfg, repeats=args.repeats, threads=threads)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    if args.format == "json":
        payload = {
            "schema_version": SCHEMA_VERSION,
            "repeats": args.repeats,
            "threads": threads,
            "samples_ms": [round(s, 3) for s in stats.samples_ms],
            "min_ms": round(stats.min_ms, 3),
            "median_ms": round(stats.median_ms, 3),
            "mean_ms": round(stats.mean_ms, 3),
            "deterministic": False,  # wall-clock timings vary run to run
        }
        _emit(json.dumps(payload, indent=2), args.out)
    else:
        _emit(
            f"median {stats.median_ms:.1f} ms (min {stats.min_ms:.1f}, "
            f"mean {stats.mean_ms:.1f}) over {args.repeats} runs",
            args.out,
        )
    return 0


# ------------------------------------------------------------------- parser


def _add_rhm_flags(p):
    p.add_argument("--exponent", "-d", type=int, default=3,
                   help="similarity exponent (default 3)")
    p.add_argument("--bins", default="10",
                   help="vote grid, N or NYxNX (default 10)")
    p.add_argument("--fixed-range", type=float, default=None,
                   help="normalize offsets by this range instead of image dims")


def _add_common_flags(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: HYPERFLOW_THREADS or CPU count)")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", default=None, help="write output here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hyperflow", description=__doc__.split("\n\n")[1])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="write a deterministic synthetic stack")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dims", required=True, help="image size HxW")
    p.add_argument("--layer", action="append",
                   help="id,channels,h,w,stride,offset,rf (repeatable)")
    p.add_argument("--image-id", default="synth")
    p.add_argument("--shift", default=None,
                   help="dy,dx: write a planted pair instead of one stack")
    p.add_argument("--tgt-out", default=None, help="target path for --shift")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="dense flow between two stacks")
    p.add_argument("src")
    p.add_argument("tgt")
    p.add_argument("--layers", required=True, help="layer ids, smallest is base")
    p.add_argument("--conf-out", default=None, help="dump confidences to .npy")
    _add_rhm_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="keypoint transfer accuracy on a dataset")
    p.add_argument("annotations", help="JSONL annotation file")
    p.add_argument("--stack-dir", required=True,
                   help="directory of <image_id>.hfm stacks")
    p.add_argument("--layers", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--ref", choices=("img", "bbox"), default="img")
    _add_rhm_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="beam-search the best layer subset")
    p.add_argument("annotations")
    p.add_argument("--stack-dir", required=True)
    p.add_argument("--candidates", default=None,
                   help="candidate ids (default: all layers of first stack)")
    p.add_argument("--base", default=None,
                   help="allowed minimum ids (default: all candidates)")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-layers", type=int, default=8)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--ref", choices=("img", "bbox"), default="img")
    p.add_argument("--trace-out", default=None,
                   help="write one line per evaluated subset")
    p.add_argument("--plot-data", default=None,
                   help="write iteration,best_score CSV")
    _add_rhm_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="time the matching kernel")
    p.add_argument("src")
    p.add_argument("tgt")
    p.add_argument("--layers", required=True)
    p.add_argument("--repeats", type=int, default=5)
    _add_rhm_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return 3
        return args.func(args)
    except CliInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CliConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
