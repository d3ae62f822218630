"""Experiment harness behind ``revstore bench``.

Each experiment builds fresh stores under a work directory from a generated
dataset and returns a list of CSV rows.  Timings wrap the store operation
only; image generation and chunking happen beforehand and are reused
across runs that share chunking parameters.
"""

from __future__ import annotations

import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import reclaim
from .chunker import ChunkingParams, SegmentDescriptor, chunk_bytes
from .store import Store
from .workload import WorkloadParams, gen_series

EXPERIMENTS = ("storage", "restore-frag", "delete", "window-sweep")

MODES = ("inline-only", "revdedup", "conv")


@dataclass
class BenchConfig:
    workload: WorkloadParams
    chunking: ChunkingParams = field(default_factory=lambda: ChunkingParams(12, 16))
    container_capacity: int = 512 << 10
    threads: int = 1
    live_len: int = 1
    segment_bits: tuple[int, ...] = ()
    windows: tuple[int, ...] = (1, 3, 5)
    delete_counts: tuple[int, ...] = (1, 3, 6)

    def header(self) -> dict[str, object]:
        out: dict[str, object] = {f"workload.{k}": v for k, v in asdict(self.workload).items()}
        for k, v in asdict(self.chunking).items():
            out[f"chunking.{k}"] = getattr(v, "value", v)
        out.update(container_capacity=self.container_capacity, threads=self.threads,
                   live_len=self.live_len,
                   segment_bits=" ".join(map(str, self.sweep_bits())),
                   windows=" ".join(map(str, self.windows)),
                   delete_counts=" ".join(map(str, self.delete_counts)))
        return out

    def sweep_bits(self) -> tuple[int, ...]:
        m = self.chunking.segment_bits
        return self.segment_bits or (m - 2, m, m + 1)


def images(params: WorkloadParams, series: int = 0):
    """(week, image, digest) for one series; regenerated on each call."""
    return gen_series(params, series)


def segmentations(params: WorkloadParams, chunking: ChunkingParams, threads: int = 1
                  ) -> list[list[SegmentDescriptor]]:
    return [chunk_bytes(img, chunking, threads) for _, img, _ in images(params)]


def populate(root: Path, cfg: BenchConfig, mode: str, segs, chunking=None,
             live_len: int | None = None) -> tuple[Store, float]:
    """Back up every week of series 0 in ``mode``; returns the store and ingest seconds."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if root.exists():
        shutil.rmtree(root)
    store = Store(root, container_capacity=cfg.container_capacity,
                  chunking=chunking or cfg.chunking, threads=cfg.threads)
    store.create_series(0, live_len=live_len or cfg.live_len, conv=mode == "conv")
    elapsed = 0.0
    for (_, img, _), seg in zip(images(cfg.workload), segs):
        t0 = time.perf_counter()
        store.ingest(0, img, seg, reverse_dedup=mode == "revdedup")
        elapsed += time.perf_counter() - t0
    return store, elapsed


def unique_chunk_bytes(segs) -> int:
    """Bytes of distinct non-null chunks over every backup (global chunk dedup)."""
    seen: dict[bytes, int] = {}
    for week in segs:
        for s in week:
            for c in s.chunks:
                if not c.is_null:
                    seen[c.fp] = c.length
    return sum(seen.values())


def run_storage(cfg: BenchConfig, workdir: Path) -> list[dict]:
    rows = []
    conv_done = None
    for bits in cfg.sweep_bits():
        chunking = ChunkingParams(chunk_bits=cfg.chunking.chunk_bits, segment_bits=bits,
                                  window_size=cfg.chunking.window_size)
        segs = segmentations(cfg.workload, chunking, cfg.threads)
        modes = ["inline-only", "revdedup"] + (["conv"] if conv_done is None else [])
        for mode in modes:
            store, elapsed = populate(workdir / f"{mode}-{bits}", cfg, mode, segs, chunking)
            st = store.stats()
            row = dict(mode=mode, segment_bits=bits, saving=st.saving,
                       stored_bytes=st.stored_payload, logical_bytes=st.original_bytes - st.null_bytes,
                       ingest_seconds=elapsed)
            store.close()
            shutil.rmtree(workdir / f"{mode}-{bits}")
            if mode == "conv":
                conv_done = row
            rows.append(row)
        if conv_done is not None and conv_done["segment_bits"] != bits:
            rows.append({**conv_done, "segment_bits": bits})
        logical = rows[-1]["logical_bytes"]
        oracle = unique_chunk_bytes(segs)
        rows.append(dict(mode="chunk-oracle", segment_bits=bits, saving=1 - oracle / logical,
                         stored_bytes=oracle, logical_bytes=logical, ingest_seconds=0.0))
    return rows


def run_restore_frag(cfg: BenchConfig, workdir: Path) -> list[dict]:
    rows = []
    segs = segmentations(cfg.workload, cfg.chunking, cfg.threads)
    for mode in ("revdedup", "conv"):
        store, _ = populate(workdir / mode, cfg, mode, segs)
        for info in store.series(0).retained():
            r = store.restore(0, info.version)
            rows.append(dict(mode=mode, version=info.version, containers_read=r.containers_read,
                             restore_seconds=r.elapsed, bytes=r.nbytes))
        store.close()
        shutil.rmtree(workdir / mode)
    return rows


def run_delete(cfg: BenchConfig, workdir: Path) -> list[dict]:
    rows = []
    segs = segmentations(cfg.workload, cfg.chunking, cfg.threads)
    base = workdir / "base"
    store, _ = populate(base, cfg, "revdedup", segs)
    created = [v.created_at for v in store.series(0).retained()]
    store.close()
    for n in cfg.delete_counts:
        if n >= len(created):
            continue
        cutoff = created[n]
        for strategy in ("revdedup", "marksweep"):
            copy = reclaim.snapshot(base, workdir / f"{strategy}-{n}")
            s = Store(copy, threads=cfg.threads)
            total = s.stored_payload()
            r = s.delete_expired(cutoff) if strategy == "revdedup" else s.mark_and_sweep(cutoff)
            rows.append(dict(strategy=strategy, deleted=len(r.versions_deleted),
                             containers_read=r.containers_read,
                             payload_bytes_read=r.payload_bytes_read,
                             payload_bytes_total=total,
                             containers_deleted=r.containers_deleted,
                             bytes_reclaimed=r.bytes_reclaimed, stored_after=s.stored_payload(),
                             elapsed=r.elapsed, mark_elapsed=r.mark_elapsed,
                             sweep_elapsed=r.sweep_elapsed))
            s.close()
            shutil.rmtree(copy)
    shutil.rmtree(base)
    return rows


def run_window_sweep(cfg: BenchConfig, workdir: Path) -> list[dict]:
    rows = []
    segs = segmentations(cfg.workload, cfg.chunking, cfg.threads)
    for live in cfg.windows:
        store, elapsed = populate(workdir / f"live-{live}", cfg, "revdedup", segs, live_len=live)
        st = store.stats()
        rows.append(dict(live_len=live, stored_bytes=st.stored_payload, saving=st.saving,
                         ingest_seconds=elapsed))
        store.close()
        shutil.rmtree(workdir / f"live-{live}")
    return rows


RUNNERS = {
    "storage": run_storage,
    "restore-frag": run_restore_frag,
    "delete": run_delete,
    "window-sweep": run_window_sweep,
}


def run(experiment: str, cfg: BenchConfig, workdir) -> list[dict]:
    if experiment not in RUNNERS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    return RUNNERS[experiment](cfg, workdir)


def plot(experiment: str, rows: list[dict], path) -> None:
    """Write a static chart of ``rows``; needs matplotlib."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if experiment == "storage":
        for mode in dict.fromkeys(r["mode"] for r in rows):
            pts = [(r["segment_bits"], r["saving"]) for r in rows if r["mode"] == mode]
            ax.plot(*zip(*pts), marker="o", label=mode)
        ax.set(xlabel="segment bits", ylabel="saving")
    elif experiment == "restore-frag":
        for mode in ("revdedup", "conv"):
            pts = [(r["version"], r["containers_read"]) for r in rows if r["mode"] == mode]
            ax.plot(*zip(*pts), marker="o", label=mode)
        ax.set(xlabel="version", ylabel="containers read")
    elif experiment == "delete":
        for strategy in ("revdedup", "marksweep"):
            pts = [(r["deleted"], r["elapsed"]) for r in rows if r["strategy"] == strategy]
            ax.plot(*zip(*pts), marker="o", label=strategy)
        ax.set(xlabel="backups deleted", ylabel="seconds")
    else:
        ax.plot([r["live_len"] for r in rows], [r["stored_bytes"] for r in rows], marker="o",
                label="stored bytes")
        ax.set(xlabel="live window length", ylabel="stored payload bytes")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
