"""Command-line entry points.

Exit codes: 0 success, 2 validation failure (bad flags, bad input data),
3 I/O failure. The default seed for every command comes from the NTD_SEED
environment variable when the flag is omitted.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import sys
from pathlib import Path

import numpy as np

from . import docfmt
from .calibrate import (
    METHOD_FIT,
    METHOD_RANKING,
    CalibrationConfig,
    GlobalScope,
    PerClassScope,
    SubsetScope,
    calibrate,
    table_read,
    table_write,
)
from .detect import Query, detect_one
from .errors import IoError, NtdError, ValidationError
from .evalharness import (
    SweepBase,
    SyntheticSpec,
    bench_latency,
    generate_synthetic,
    latency_csv,
    sweep,
    sweep_csv,
)
from .featstore import manifest_write, store_read, store_write
from .gateway import GatewayServer
from .simdist import Metric

log = logging.getLogger(__name__)


def _default_seed() -> int:
    raw = os.environ.get("NTD_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"NTD_SEED must be an integer, got {raw!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_text(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate a synthetic validated store")
    p.add_argument("--out", required=True, help="output NTDF path")
    p.add_argument("--heldout-out", help="optional NTDF path for the held-out pool")
    p.add_argument("--manifest", help="optional class-name manifest path")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--records-per-class", type=int, default=200)
    p.add_argument("--heldout-per-class", type=int, default=100)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--min-angle", type=float, default=90.0)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        classes=args.classes,
        dim=args.dim,
        records_per_class=args.records_per_class,
        heldout_per_class=args.heldout_per_class,
        noise_sigma=args.noise_sigma,
        min_angle_deg=args.min_angle,
        seed=args.seed if args.seed is not None else _default_seed(),
    )
    store, heldout = generate_synthetic(spec)
    store_write(store, args.out)
    if args.heldout_out:
        store_write(heldout, args.heldout_out)
    if args.manifest:
        manifest_write(store.names, args.manifest)
    print(
        f"wrote {store.count} records ({spec.classes} classes, dim {spec.dim}) "
        f"to {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def _add_calibrate(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("calibrate", help="calibrate a threshold table")
    p.add_argument("--store", required=True, help="NTDF store path")
    p.add_argument("--out", required=True, help="threshold table output path")
    p.add_argument("--metric", default="cosine")
    p.add_argument("--n", type=int, default=3, help="comparison set size")
    p.add_argument("--rounds", type=int, default=1000)
    rate = p.add_mutually_exclusive_group(required=True)
    rate.add_argument("--frr", type=float, help="preset false rejection rate")
    rate.add_argument("--far", type=float, help="preset false acceptance rate")
    p.add_argument("--method", choices=[METHOD_RANKING, METHOD_FIT],
                   default=METHOD_RANKING)
    p.add_argument("--scope", choices=["global", "per-class", "global-subset"],
                   default="global")
    p.add_argument("--class", dest="class_id", type=int,
                   help="class id for --scope per-class")
    p.add_argument("--classes", type=_int_list,
                   help="comma-separated ids for --scope global-subset")
    p.add_argument("--min-class-size", type=int, default=11)
    p.add_argument("--exclude-donors", type=_int_list, default=[],
                   help="classes never used as inter-class donors")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_calibrate)


def cmd_calibrate(args: argparse.Namespace) -> int:
    if args.scope == "per-class":
        if args.class_id is None:
            raise ValidationError("--scope per-class requires --class")
        scope = PerClassScope(args.class_id)
    elif args.scope == "global-subset":
        if not args.classes:
            raise ValidationError("--scope global-subset requires --classes")
        scope = SubsetScope(tuple(args.classes))
    else:
        scope = GlobalScope()
    cfg = CalibrationConfig(
        n=args.n,
        metric=Metric.parse(args.metric),
        rounds=args.rounds,
        preset_frr=args.frr,
        preset_far=args.far,
        method=args.method,
        scope=scope,
        seed=args.seed if args.seed is not None else _default_seed(),
        min_class_size=args.min_class_size,
        donor_exclude=tuple(args.exclude_donors),
    )
    store = store_read(args.store)
    table = calibrate(store, cfg)
    table_write(table, args.out)
    preset = f"frr={args.frr}" if args.frr is not None else f"far={args.far}"
    if table.global_threshold is not None:
        print(
            f"global threshold {docfmt.render_real(table.global_threshold)} "
            f"({preset}, rounds={cfg.rounds})"
        )
    for cid in sorted(table.per_class):
        print(
            f"class {cid} threshold {docfmt.render_real(table.per_class[cid])} "
            f"({preset}, rounds={cfg.rounds})"
        )
    return 0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

def _add_detect(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("detect", help="screen a batch of embeddings")
    p.add_argument("--store", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--queries", required=True,
                   help="text file, one embedding per line")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--metric", default=None,
                   help="defaults to the metric the table was calibrated with")
    p.add_argument("--class", dest="class_id", type=int, default=None,
                   help="predicted class for lines that do not carry one")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="write verdict lines here instead of stdout")
    p.set_defaults(func=cmd_detect)


def _parse_query_line(line: str, lineno: int, default_class: int | None) -> Query:
    if "\t" in line:
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(
                f"query line {lineno}: expected id<TAB>class<TAB>values"
            )
        input_id, class_text, value_text = parts
        try:
            predicted = int(class_text)
        except ValueError:
            raise ValidationError(
                f"query line {lineno}: bad class id {class_text!r}"
            ) from None
    else:
        tokens = line.split()
        if len(tokens) < 2:
            raise ValidationError(f"query line {lineno}: expected id and values")
        input_id, value_text = tokens[0], " ".join(tokens[1:])
        if default_class is None:
            raise ValidationError(
                f"query line {lineno}: no class on the line and no --class given"
            )
        predicted = default_class
    try:
        embedding = np.array([float(tok) for tok in value_text.split()])
    except ValueError:
        raise ValidationError(
            f"query line {lineno}: embedding has non-numeric tokens"
        ) from None
    return Query(input_id=input_id, predicted_class=predicted, embedding=embedding)


def cmd_detect(args: argparse.Namespace) -> int:
    store = store_read(args.store)
    table = table_read(args.thresholds)
    metric = Metric.parse(args.metric) if args.metric else table.metric
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        lines = Path(args.queries).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {args.queries}: {exc}") from exc
    queries = [
        _parse_query_line(line, i, args.class_id)
        for i, line in enumerate(lines, start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    out_lines = []
    for index, query in enumerate(queries):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
        verdict = detect_one(query, store, table, args.n, metric, rng)
        out_lines.append(
            f"{verdict.input_id}\t{verdict.decision}\t"
            f"{docfmt.render_real(verdict.score)}\t"
            f"{docfmt.render_real(verdict.threshold)}"
        )
    text = "\n".join(out_lines) + ("\n" if out_lines else "")
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="calibrate and measure rates on synthetic data")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--preset-frr", type=float, default=0.05)
    p.add_argument("--axis", choices=["n", "metric", "preset_frr", "scope"],
                   default="preset_frr")
    p.add_argument("--values", default=None,
                   help="comma-separated axis values; defaults to --preset-frr")
    p.add_argument("--store", help="NTDF store to load instead of generating")
    p.add_argument("--heldout", help="held-out NTDF pool, required with --store")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--records-per-class", type=int, default=200)
    p.add_argument("--heldout-per-class", type=int, default=100)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--min-angle", type=float, default=90.0)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--metric", default="cosine")
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--scope", choices=["global", "per-class"], default="global")
    p.add_argument("--clean-sessions", type=int, default=1000)
    p.add_argument("--trigger-sessions", type=int, default=1000)
    p.add_argument("--target-class", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)


def _parse_axis_values(axis: str, text: str) -> list[object]:
    tokens = [tok.strip() for tok in text.split(",") if tok.strip()]
    if not tokens:
        raise ValidationError("--values is empty")
    if axis == "n":
        return [int(tok) for tok in tokens]
    if axis == "preset_frr":
        return [float(tok) for tok in tokens]
    return list(tokens)


def cmd_eval(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.store:
        if not args.heldout:
            raise ValidationError("--store requires --heldout")
        store = store_read(args.store)
        heldout = store_read(args.heldout)
    else:
        spec = SyntheticSpec(
            classes=args.classes,
            dim=args.dim,
            records_per_class=args.records_per_class,
            heldout_per_class=args.heldout_per_class,
            noise_sigma=args.noise_sigma,
            min_angle_deg=args.min_angle,
            seed=seed,
        )
        store, heldout = generate_synthetic(spec)
    base = SweepBase(
        store=store,
        heldout=heldout,
        n=args.n,
        metric=Metric.parse(args.metric),
        preset_frr=args.preset_frr,
        scope=args.scope,
        rounds=args.rounds,
        m=args.m,
        clean_sessions=args.clean_sessions,
        trigger_sessions=args.trigger_sessions,
        target_class=args.target_class,
        cal_seed=seed,
        eval_seed=seed + 1,
    )
    if args.values is not None:
        values = _parse_axis_values(args.axis, args.values)
    else:
        values = [args.preset_frr]
        if args.axis != "preset_frr":
            raise ValidationError(f"--axis {args.axis} requires --values")
    points = sweep(args.axis, values, base)
    _write_text(args.out, sweep_csv(points, cal_seed=seed))
    for point in points:
        r = point.report
        print(
            f"{point.axis}={point.value}: frr={r.frr:.4f} far={r.far:.4f} "
            f"threshold={docfmt.render_real(point.threshold)}"
        )
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _add_bench(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("bench", help="latency of the screening path per query")
    p.add_argument("--store", help="NTDF store; default is a generated one")
    p.add_argument("--n-values", type=_int_list, default=[3, 10, 20, 40])
    p.add_argument("--delay-ms", type=float, default=30.0,
                   help="artificial extractor delay per invocation")
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--metric", default="cosine")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_bench)


def cmd_bench(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.store:
        store = store_read(args.store)
    else:
        store, _ = generate_synthetic(SyntheticSpec(seed=seed))
    rows = bench_latency(
        store,
        n_values=args.n_values,
        metric=Metric.parse(args.metric),
        delay_s=args.delay_ms / 1000.0,
        queries=args.queries,
        seed=seed,
    )
    text = latency_csv(rows)
    if args.out:
        _write_text(args.out, text)
    for row in rows:
        print(
            f"n={row.n} lut={'on' if row.lut else 'off'}: "
            f"mean {row.mean_s * 1000:.1f} ms, p95 {row.p95_s * 1000:.1f} ms, "
            f"{row.extractor_calls} extractor calls"
        )
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def _add_serve(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("serve", help="run the detection service")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port to bind")
    p.add_argument("--store", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--metric", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_serve)


def cmd_serve(args: argparse.Namespace) -> int:
    host, sep, port_text = args.listen.rpartition(":")
    if not sep:
        raise ValidationError("--listen must look like host:port")
    try:
        port = int(port_text)
    except ValueError:
        raise ValidationError(f"bad port {port_text!r}") from None
    store = store_read(args.store)
    table = table_read(args.thresholds)
    metric = Metric.parse(args.metric) if args.metric else table.metric
    server = GatewayServer(
        store=store,
        thresholds=table,
        n=args.n,
        metric=metric,
        seed=args.seed if args.seed is not None else _default_seed(),
        host=host,
        port=port,
    )

    async def run() -> None:
        await server.start()
        print(f"listening on {server.host}:{server.port}", flush=True)
        loop = asyncio.get_running_loop()
        stop = asyncio.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        serve_task = asyncio.ensure_future(server.serve_forever())
        await stop.wait()
        serve_task.cancel()
        await server.stop()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntd",
        description="calibrate similarity thresholds and screen model inputs",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_calibrate(sub)
    _add_detect(sub)
    _add_eval(sub)
    _add_bench(sub)
    _add_serve(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NtdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
