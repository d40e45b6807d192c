"""FIO-style workloads over the engine, measured in simulated time.

Workers are simulated threads stepped round-robin on one OS thread, each
with its own clock account and its own file, so a seeded run is fully
reproducible.  Write-back and GC fire on the simulated timeline and are
charged to the background account.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import asdict, dataclass, fields

from .config import Config
from .disk import DiskBackend
from .engine import Engine
from .pmem import PmemImage

CSV_COLUMNS = ("timestamp", "ops_per_s", "bytes_per_s", "nvm_pages_in_use",
               "dirty_pages", "fallback_active")


@dataclass
class WorkloadSpec:
    rw_ratio: float = 0.0          # reads per write
    sync_pct: float = 100.0        # share of writes that are synchronous
    io_size: int = 4096
    access: str = "seq"            # seq | random
    seed: int = 0
    threads: int = 1
    total_bytes: int = 16 << 20    # bytes written across all workers
    sync_mode: str = "fsync"       # fsync | osync
    file_size: int = 4 << 20
    metrics_interval_ms: float = 10.0

    def __post_init__(self):
        if not 0 <= self.sync_pct <= 100:
            raise ValueError("sync_pct must be within 0..100")
        if self.io_size < 1:
            raise ValueError("io_size must be >= 1")
        if self.rw_ratio < 0:
            raise ValueError("rw_ratio must be >= 0")
        if self.access not in ("seq", "random"):
            raise ValueError("access must be seq or random")
        if self.sync_mode not in ("fsync", "osync"):
            raise ValueError("sync_mode must be fsync or osync")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.file_size < self.io_size:
            raise ValueError("file_size must be >= io_size")
        if self.total_bytes < self.io_size:
            raise ValueError("total_bytes must be >= io_size")

    @classmethod
    def coerce(cls, pairs: dict[str, str]) -> dict:
        """Convert ``key -> text`` pairs to typed keyword arguments."""
        defaults = cls()
        known = {f.name for f in fields(cls)}
        out = {}
        for k, v in pairs.items():
            if k not in known:
                raise ValueError(f"unknown workload key {k!r}")
            out[k] = type(getattr(defaults, k))(v)
        return out


def varmail_like(**overrides) -> WorkloadSpec:
    """Mail-server flavour: one read per small synced append."""
    base = dict(rw_ratio=1.0, sync_pct=100.0, io_size=1024, access="random",
                sync_mode="fsync", total_bytes=4 << 20, file_size=1 << 20)
    base.update(overrides)
    return WorkloadSpec(**base)


@dataclass
class MetricsRow:
    timestamp: float
    ops_per_s: float
    bytes_per_s: float
    nvm_pages_in_use: int
    dirty_pages: int
    fallback_active: int


@dataclass
class BenchResult:
    spec: WorkloadSpec
    ops: int
    reads: int
    writes: int
    syncs: int
    bytes_written: int
    bytes_read: int
    sim_seconds: float
    rows: list[MetricsRow]
    engine: Engine

    @property
    def ops_per_s(self) -> float:
        return self.ops / self.sim_seconds if self.sim_seconds else 0.0

    @property
    def write_bytes_per_s(self) -> float:
        return self.bytes_written / self.sim_seconds if self.sim_seconds else 0.0

    def summary(self) -> dict:
        return {
            "ops": self.ops, "reads": self.reads, "writes": self.writes, "syncs": self.syncs,
            "bytes_written": self.bytes_written, "sim_seconds": round(self.sim_seconds, 9),
            "ops_per_s": round(self.ops_per_s, 3),
            "log_entries": self.engine.log.stats["entries"],
            "nvm_pages_in_use": self.engine.nvm_pages_in_use,
            "peak_nvm_pages": max((r.nvm_pages_in_use for r in self.rows), default=0),
        }


def rows_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()


def _worker(engine: Engine, spec: WorkloadSpec, ino: int, quota: int, counters: dict):
    """Generator yielding after each op so the scheduler can interleave workers."""
    rng = random.Random(spec.seed * 1_000_003 + ino)
    slots = max(1, spec.file_size // spec.io_size)
    pos = 0
    written = 0
    read_credit = 0.0
    payload = bytes(rng.getrandbits(8) for _ in range(256))
    while written < quota:
        read_credit += spec.rw_ratio
        while read_credit >= 1.0:
            read_credit -= 1.0
            off = rng.randrange(slots) * spec.io_size
            counters["bytes_read"] += len(engine.read(ino, off, spec.io_size))
            counters["reads"] += 1
            yield
        if spec.access == "seq":
            off = (pos % slots) * spec.io_size
            pos += 1
        else:
            off = rng.randrange(slots) * spec.io_size
        data = (payload * (spec.io_size // len(payload) + 1))[:spec.io_size]
        synced = rng.random() * 100 < spec.sync_pct
        if synced and spec.sync_mode == "osync":
            engine.set_flags(ino, True)
            engine.write(ino, off, data)
            engine.set_flags(ino, False)
        else:
            engine.write(ino, off, data)
            if synced:
                engine.fsync(ino)
        counters["syncs"] += synced
        counters["writes"] += 1
        counters["bytes_written"] += spec.io_size
        written += spec.io_size
        yield


def run_bench(spec: WorkloadSpec, config: Config | None = None, engine: Engine | None = None,
              background: bool = True) -> BenchResult:
    """Run ``spec`` and return throughput over simulated time plus metric rows."""
    config = config or Config()
    if engine is None:
        engine = Engine.format(config, pmem=PmemImage(config.nvm_size_pages, mode=config.pmem_mode),
                               disk=DiskBackend())
    clock = engine.clock
    inos = list(range(1, spec.threads + 1))
    for ino in inos:
        fs = engine.open(ino)
        if fs.size < spec.file_size:
            fs.size = fs.disk_size = fs.persisted_size = spec.file_size
            engine.disk.set_meta(ino, spec.file_size)
        engine.cache.prewarm(ino, spec.file_size)
    clock.reset()
    counters = {"reads": 0, "writes": 0, "syncs": 0, "bytes_written": 0, "bytes_read": 0}
    quota = -(-spec.total_bytes // spec.threads)
    workers = {ino: _worker(engine, spec, ino, quota, counters) for ino in inos}

    def now() -> float:
        return max((clock.accounts[("w", i)] for i in inos), default=0.0)

    wb_every = config.writeback_interval_ms * 1e6
    gc_every = config.gc_interval_ms * 1e6
    row_every = spec.metrics_interval_ms * 1e6
    next_wb, next_gc, next_row = wb_every, gc_every, row_every
    rows: list[MetricsRow] = []
    last_ops = last_bytes = 0
    last_t = 0.0

    def emit_row(t: float) -> None:
        nonlocal last_ops, last_bytes, last_t
        ops = counters["reads"] + counters["writes"]
        dt = (t - last_t) / 1e9
        m = engine.metrics()
        rows.append(MetricsRow(round(t / 1e9, 9), round((ops - last_ops) / dt, 3) if dt else 0.0,
                               round((counters["bytes_written"] - last_bytes) / dt, 3) if dt else 0.0,
                               m["nvm_pages_in_use"], m["dirty_pages"], m["fallback_active"]))
        last_ops, last_bytes, last_t = ops, counters["bytes_written"], t

    live = dict(workers)
    while live:
        # step the worker that is furthest behind in simulated time
        ino = min(live, key=lambda i: (clock.accounts[("w", i)], i))
        with clock.account(("w", ino)):
            try:
                next(live[ino])
            except StopIteration:
                del live[ino]
        t = now()
        if background:
            while t >= next_wb:
                engine.writeback_tick()
                next_wb += wb_every
            while t >= next_gc:
                engine.gc_pass()
                next_gc += gc_every
        while t >= next_row:
            emit_row(next_row)
            next_row += row_every
    end = now()
    if not rows or rows[-1].timestamp < end / 1e9:
        emit_row(end)
    return BenchResult(spec, counters["reads"] + counters["writes"], counters["reads"],
                       counters["writes"], counters["syncs"], counters["bytes_written"],
                       counters["bytes_read"], end / 1e9, rows, engine)


def quiesce(engine: Engine) -> dict:
    """Drain write-back, run one GC pass and report NVM usage."""
    engine.writeback_all()
    stats = engine.gc_pass()
    return {"nvm_pages_in_use": engine.nvm_pages_in_use, **stats.as_dict()}
