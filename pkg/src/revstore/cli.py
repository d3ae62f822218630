"""Command-line interface: ``revstore <command> ...``.

Exit codes: 0 success, 1 usage or rejected request, 2 integrity error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import tempfile
from pathlib import Path

from . import bench
from .chunker import ChunkingMode, ChunkingParams, chunk_stream, read_descriptors, write_descriptors
from .errors import CorruptLogError, IntegrityError, NotFoundError, RejectedError
from .store import Store
from .workload import WorkloadError, dataset, gen_dataset

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _chunking_args(p):
    p.add_argument("--chunk-bits", type=int, default=None,
                   help="average chunk size is 2^n bytes")
    p.add_argument("--segment-bits", type=int, default=None,
                   help="average segment size is 2^m bytes")
    p.add_argument("--fixed", action="store_true", help="fixed-size chunks of 2^n bytes, 2^(m-n) per segment")


def _chunking(args, base: ChunkingParams | None) -> ChunkingParams | None:
    if args.chunk_bits is None and args.segment_bits is None and not args.fixed:
        return base
    base = base or ChunkingParams()
    n = args.chunk_bits if args.chunk_bits is not None else base.chunk_bits
    m = args.segment_bits if args.segment_bits is not None else base.segment_bits
    mode = ChunkingMode.FIXED_SIZE if args.fixed else base.mode
    return ChunkingParams(chunk_bits=n, segment_bits=m, window_size=base.window_size, mode=mode,
                          fixed_chunk_size=1 << n, fixed_chunks_per_segment=1 << (m - n))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="revstore", description="Deduplicating backup store.")
    p.add_argument("--store", default="store", help="store directory (default ./store)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic backup dataset")
    g.add_argument("--dataset", default="sg1")
    g.add_argument("--scale", default="1/64")
    g.add_argument("--weeks", type=int)
    g.add_argument("--out", required=True)

    c = sub.add_parser("chunk", help="write the segment/chunk descriptor listing of a file")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    _chunking_args(c)

    b = sub.add_parser("backup", help="store a backup, then reverse-deduplicate what left the live window")
    b.add_argument("--series", type=int, required=True)
    b.add_argument("--input", required=True)
    b.add_argument("--descriptors", help="precomputed listing from `chunk`")
    b.add_argument("--mode", choices=("revdedup", "conv"), default="revdedup",
                   help="dedup mode, fixed when the series is created")
    b.add_argument("--container-mib", type=float, help="container capacity for a new store")
    b.add_argument("--live", type=int, default=1, help="live window length for a new series")
    b.add_argument("--archival", type=int, help="archival window length for a new series")
    b.add_argument("--no-reverse", action="store_true",
                   help="leave versions entering the archival window pending")
    _chunking_args(b)

    r = sub.add_parser("revdedup", help="reverse-deduplicate one version")
    r.add_argument("--series", type=int, required=True)
    r.add_argument("--version", type=int, required=True)

    o = sub.add_parser("restore", help="restore a backup to a file")
    o.add_argument("--series", type=int, required=True)
    o.add_argument("--version", type=int, required=True)
    o.add_argument("--output", required=True, help="output path, or - for stdout")
    o.add_argument("--prefetch", action="store_true")
    o.add_argument("--expect", help="SHA-1 the restored stream must have")

    d = sub.add_parser("delete", help="delete backups created before a timestamp")
    d.add_argument("--before", type=int, required=True)
    d.add_argument("--strategy", choices=("revdedup", "marksweep"), default="revdedup")

    sub.add_parser("stats", help="print a store summary as CSV")

    e = sub.add_parser("bench", help="run an experiment and print CSV")
    e.add_argument("experiment", choices=bench.EXPERIMENTS)
    e.add_argument("--dataset", default="sg1")
    e.add_argument("--scale", default="1/64")
    e.add_argument("--weeks", type=int)
    e.add_argument("--container-mib", type=float, default=0.5)
    e.add_argument("--live", type=int, default=1)
    e.add_argument("--windows", default="1,3,5", help="live window lengths for window-sweep")
    e.add_argument("--delete-counts", default="1,3,6", help="batch sizes for delete")
    e.add_argument("--sweep-bits", help="segment bits for storage (default m-2,m,m+1)")
    e.add_argument("--output", help="CSV path (default stdout)")
    e.add_argument("--plot", help="also write a chart (PNG/SVG; needs matplotlib)")
    e.add_argument("--workdir", help="scratch directory for the stores built")
    _chunking_args(e)
    return p


def _print_kv(out, **items):
    w = csv.writer(out)
    w.writerow(items.keys())
    w.writerow(items.values())


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_gen(args, out):
    params = dataset(args.dataset, args.scale, seed=args.seed, weeks=args.weeks)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    multi = params.series_count > 1
    with open(dest / "manifest.csv", "w", newline="") as mf:
        w = csv.writer(mf, lineterminator="\n")
        w.writerow(["series", "week", "file", "bytes", "sha1"])
        for series, week, image, dg in gen_dataset(params):
            name = f"series{series}/week{week}.img" if multi else f"week{week}.img"
            (dest / name).parent.mkdir(parents=True, exist_ok=True)
            (dest / name).write_bytes(image)
            w.writerow([series, week, name, len(image), dg])
    print(f"wrote {params.series_count * params.weeks} images to {dest}", file=out)


def cmd_chunk(args, out):
    params = _chunking(args, ChunkingParams())
    with open(args.input, "rb") as f:
        segs = chunk_stream(f, params, args.threads)
    with open(args.output, "wb") as f:
        n = write_descriptors(segs, f)
    _print_kv(out, segments=len(segs), chunks=n, bytes=sum(s.length for s in segs))


def _open_store(args, **kwargs) -> Store:
    return Store(args.store, threads=args.threads, **kwargs)


def cmd_backup(args, out):
    capacity = int(args.container_mib * (1 << 20)) if args.container_mib else None
    store = Store(args.store, container_capacity=capacity, threads=args.threads)
    with store:
        params = _chunking(args, store.chunking)
        store.ensure_series(args.series, live_len=args.live, archival_len=args.archival,
                            conv=args.mode == "conv")
        data = Path(args.input).read_bytes()
        segs = None
        if args.descriptors:
            with open(args.descriptors, "rb") as f:
                segs = read_descriptors(f)
        res, jobs = store.ingest(args.series, data, segs, params,
                                 reverse_dedup=not args.no_reverse, verify=segs is not None)
        _print_kv(out, series=res.series_id, version=res.version, timestamp=res.timestamp,
                  bytes=res.original_size, written=res.payload_bytes_written,
                  new_segments=res.unique_segments, elapsed=f"{res.elapsed:.4f}",
                  reverse_deduplicated=" ".join(str(j.version) for j in jobs))


def cmd_revdedup(args, out):
    with _open_store(args) as store:
        r = store.reverse_dedup(args.series, args.version)
        _print_kv(out, series=r.series_id, version=r.version, containers_loaded=r.containers_loaded,
                  bytes_reclaimed=r.bytes_reclaimed, elapsed=f"{r.elapsed:.4f}",
                  throughput=f"{r.throughput:.0f}")


def cmd_restore(args, out):
    with _open_store(args) as store:
        if args.output == "-":
            r = store.restore(args.series, args.version, sys.stdout.buffer, args.prefetch)
            out = sys.stderr
        else:
            with open(args.output, "wb") as f:
                r = store.restore(args.series, args.version, f, args.prefetch)
        _print_kv(out, bytes=r.nbytes, sha1=r.digest, containers_read=r.containers_read,
                  elapsed=f"{r.elapsed:.4f}")
        if args.expect and args.expect.strip().lower() != r.digest:
            raise IntegrityError(f"restored digest {r.digest} does not match {args.expect}")


def cmd_delete(args, out):
    with _open_store(args) as store:
        if args.strategy == "revdedup":
            r = store.delete_expired(args.before)
        else:
            r = store.mark_and_sweep(args.before)
        _print_kv(out, strategy=args.strategy, versions_deleted=len(r.versions_deleted),
                  containers_deleted=r.containers_deleted, containers_read=r.containers_read,
                  payload_bytes_read=r.payload_bytes_read, bytes_reclaimed=r.bytes_reclaimed,
                  elapsed=f"{r.elapsed:.4f}")


def cmd_stats(args, out):
    if not Path(args.store).exists():
        raise NotFoundError(f"no store at {args.store}")
    with _open_store(args) as store:
        st = store.stats()
        w = csv.writer(out)
        w.writerow(["series", "live", "archival", "expired", "conv"])
        for sid, windows in sorted(st.series.items()):
            w.writerow([sid, *(" ".join(map(str, windows[k])) for k in ("live", "archival", "expired")),
                        int(store.series(sid).conv)])
        w.writerow([])
        w.writerow(["containers", "stamped_containers", "stored_bytes", "original_bytes",
                    "null_bytes", "saving"])
        w.writerow([st.containers, st.stamped_containers, st.stored_payload, st.original_bytes,
                    st.null_bytes, f"{st.saving:.6f}"])


def cmd_bench(args, out):
    params = dataset(args.dataset, args.scale, seed=args.seed, weeks=args.weeks)
    base = ChunkingParams(chunk_bits=12, segment_bits=16)
    cfg = bench.BenchConfig(
        workload=params, chunking=_chunking(args, base),
        container_capacity=int(args.container_mib * (1 << 20)), threads=args.threads,
        live_len=args.live, windows=_ints(args.windows), delete_counts=_ints(args.delete_counts),
        segment_bits=_ints(args.sweep_bits) if args.sweep_bits else ())
    if args.workdir:
        rows = bench.run(args.experiment, cfg, args.workdir)
    else:
        with tempfile.TemporaryDirectory(prefix="revstore-bench-") as tmp:
            rows = bench.run(args.experiment, cfg, tmp)
    sink = open(args.output, "w", newline="") if args.output else out
    try:
        sink.write(f"# experiment={args.experiment}\n# dataset={args.dataset}\n# scale={args.scale}\n"
                   f"# seed={args.seed}\n")
        for k, v in cfg.header().items():
            sink.write(f"# {k}={v}\n")
        if rows:
            w = csv.DictWriter(sink, fieldnames=list(rows[0]))
            w.writeheader()
            for row in rows:
                w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in row.items()})
    finally:
        if sink is not out:
            sink.close()
    if args.plot:
        bench.plot(args.experiment, rows, args.plot)


COMMANDS = {
    "gen": cmd_gen, "chunk": cmd_chunk, "backup": cmd_backup, "revdedup": cmd_revdedup,
    "restore": cmd_restore, "delete": cmd_delete, "stats": cmd_stats, "bench": cmd_bench,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        COMMANDS[args.command](args, out)
    except (IntegrityError, CorruptLogError) as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (UsageError, RejectedError, NotFoundError, WorkloadError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
