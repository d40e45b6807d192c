"""The storage engine facade tying cache, log, write-back and GC together."""

from __future__ import annotations

import itertools
import threading
import time

from .config import Config
from .disk import DiskBackend
from .gc import GarbageCollector, GcStats
from .log_store import InodeLog, LogStore, NvmFull, PagePool, Record, format_image
from .page_cache import FileState, PageCache
from .pmem import PAGE_SIZE, PmemImage
from .recovery import RecoveryReport, recover
from .simclock import SimClock
from .sync import SyncEngine
from .trace import Trace
from .writeback import WritebackEngine


class Engine:
    def __init__(self, config: Config, pmem: PmemImage, pool: PagePool, log: LogStore,
                 disk: DiskBackend, trace: Trace | None = None, clock: SimClock | None = None):
        self.config = config
        self.clock = clock or SimClock()
        self.pmem = pmem
        self.pool = pool
        self.log = log
        self.disk = disk
        self.trace = trace
        pmem.clock = self.clock
        pmem.store_latency_ns = config.nvm_store_latency_ns
        disk.clock = self.clock
        disk.latency_us = config.disk_latency_us
        disk.sync_latency_us = config.disk_sync_latency_us
        self.cache = PageCache(disk, config.cache_capacity_pages, self.clock, config.dram_ns_per_byte)
        self.syncer = SyncEngine(self)
        self.writeback = WritebackEngine(self)
        self.gc = GarbageCollector(self)
        # file pages with committed entries not yet expired by a record
        self._valid: dict[int, set[int]] = {}
        self._valid_lock = threading.Lock()
        self.fallback_active = False
        self._fallback_since = 0.0
        self.fallback_seconds = 0.0
        self.fallback_events = 0
        self._mtime = itertools.count(1)
        self._workers: list[threading.Thread] = []
        self._stop = threading.Event()
        pool.listeners.append(self._on_page_freed)

    # -- construction ---------------------------------------------------------

    @classmethod
    def format(cls, config: Config | None = None, pmem: PmemImage | None = None,
               disk: DiskBackend | None = None, trace: Trace | None = None,
               clock: SimClock | None = None) -> Engine:
        """Start from an empty log on a fresh (or reused) device."""
        config = config or Config()
        if pmem is None:
            pmem = PmemImage(config.nvm_size_pages, mode=config.pmem_mode)
        format_image(pmem)
        pool = PagePool(pmem.capacity_pages, config.pool_batch, config.reserve_pages)
        log = LogStore(pmem, pool, fault_drop_commit_fence=config.fault_drop_commit_fence)
        return cls(config, pmem, pool, log, disk or DiskBackend(), trace, clock)

    @classmethod
    def mount(cls, config: Config, pmem: PmemImage, disk: DiskBackend,
              trace: Trace | None = None, clock: SimClock | None = None) -> tuple[Engine, RecoveryReport]:
        """Recover ``disk`` from ``pmem`` and resume on the surviving log."""
        report = recover(pmem, disk)
        pool = PagePool(pmem.capacity_pages, config.pool_batch, config.reserve_pages,
                        live=report.live_pages)
        log = LogStore.load(pmem, pool, fault_drop_commit_fence=config.fault_drop_commit_fence)
        eng = cls(config, pmem, pool, log, disk, trace, clock)
        eng.gc.released = set(report.dead_oop_entries)
        eng.syncer.seed_tid(report.max_tid)
        for ino, pages in report.replayed_pages.items():
            ilog = log.get(config.s_dev, ino) or next(
                il for (dev, i), il in log.logs.items() if i == ino)
            try:
                log.append_transaction(ilog, [Record("wb", p * PAGE_SIZE) for p in pages],
                                       eng.syncer.next_tid(), reserved=True)
            except NvmFull:
                # leave them valid; the next write-back of each page expires them
                eng.note_valid_entries(ino, pages)
        return eng, report

    # -- plumbing used by the sync / write-back / GC modules ------------------

    def emit(self, ev: str, **fields) -> None:
        if self.trace is not None:
            self.trace.emit(ev, **fields)

    def inode_log(self, ino: int) -> InodeLog:
        ilog = self.log.get(self.config.s_dev, ino)
        if ilog is None:
            ilog = self.log.create_inode_log(self.config.s_dev, ino)
        return ilog

    def note_valid_entries(self, ino: int, pages) -> None:
        with self._valid_lock:
            self._valid.setdefault(ino, set()).update(pages)

    def has_valid_entries(self, ino: int, page_no: int) -> bool:
        with self._valid_lock:
            return page_no in self._valid.get(ino, ())

    def clear_valid_entries(self, ino: int, page_no: int) -> None:
        with self._valid_lock:
            self._valid.get(ino, set()).discard(page_no)

    def disk_size_of(self, ino: int) -> int:
        return self.disk.size(ino) if self.disk.exists(ino) else 0

    def enter_fallback(self) -> None:
        if not self.fallback_active:
            self.fallback_active = True
            self.fallback_events += 1
            self._fallback_since = time.perf_counter()

    def check_fallback(self) -> None:
        if self.fallback_active and self.pool.free_count > self.pool.reserve:
            self.fallback_active = False
            self.fallback_seconds += time.perf_counter() - self._fallback_since

    def _on_page_freed(self) -> None:
        self.check_fallback()

    # -- file API -------------------------------------------------------------

    def open(self, ino: int, o_sync: bool = False) -> FileState:
        fs = self.cache.open(ino)
        if o_sync:
            fs.user_o_sync = True
        self.emit("open", ino=ino)
        return fs

    def set_flags(self, ino: int, o_sync: bool) -> None:
        self.cache.file(ino).user_o_sync = o_sync

    def read(self, ino: int, offset: int, length: int) -> bytes:
        self.clock.charge(self.config.syscall_latency_ns)
        return self.cache.read(ino, offset, length)

    def write(self, ino: int, offset: int, data: bytes) -> int:
        if not data:
            return 0
        self.clock.charge(self.config.syscall_latency_ns)
        fs = self.cache.file(ino)
        with fs.lock:
            prior = self.cache.write(ino, offset, data)
            fs.mtime_ns = next(self._mtime)
            self.emit("write", ino=ino, off=offset, len=len(data), data=data)
            self.syncer.on_write(fs)
            if fs.o_sync:
                self.syncer.o_sync_write(fs, offset, len(data), prior)
        return len(data)

    def fsync(self, ino: int) -> None:
        self.clock.charge(self.config.syscall_latency_ns)
        self.syncer.fsync(self.cache.file(ino), datasync=False)

    def fdatasync(self, ino: int) -> None:
        self.clock.charge(self.config.syscall_latency_ns)
        self.syncer.fsync(self.cache.file(ino), datasync=True)

    # -- background work ------------------------------------------------------

    def writeback_tick(self, batch: int | None = None) -> int:
        return self.writeback.writeback_tick(batch)

    def writeback_all(self) -> int:
        return self.writeback.writeback_all()

    def gc_pass(self) -> GcStats:
        with self.clock.background():
            return self.gc.gc_pass()

    def start_background(self) -> None:
        """Run write-back and GC on real-time intervals until ``shutdown``."""
        if self._workers:
            return
        self._stop.clear()

        def loop(interval_ms: float, fn) -> None:
            while not self._stop.wait(interval_ms / 1000.0):
                fn()

        for interval, fn in ((self.config.writeback_interval_ms, self.writeback_tick),
                             (self.config.gc_interval_ms, self.gc_pass)):
            t = threading.Thread(target=loop, args=(interval, fn), daemon=True)
            t.start()
            self._workers.append(t)

    def shutdown(self, flush: bool = False) -> None:
        self._stop.set()
        for t in self._workers:
            t.join()
        self._workers.clear()
        if flush:
            self.writeback_all()

    # -- metrics --------------------------------------------------------------

    @property
    def nvm_pages_in_use(self) -> int:
        return self.pool.in_use

    def metrics(self) -> dict:
        fallback_s = self.fallback_seconds
        if self.fallback_active:
            fallback_s += time.perf_counter() - self._fallback_since
        return {
            "nvm_pages_in_use": self.pool.in_use,
            "dirty_pages": self.cache.dirty_count,
            "absorbed_pages": self.cache.absorbed_count,
            "fallback_active": int(self.fallback_active),
            "fallback_seconds": round(fallback_s, 6),
            "reclaimed_total": self.gc.reclaimed_total,
            "cache_hits": self.cache.stats["hits"],
            "cache_misses": self.cache.stats["misses"],
            "nvm_reads": self.cache.stats["nvm_reads"],
            **{f"log_{k}": v for k, v in self.log.stats.items()},
            **{f"sync_{k}": v for k, v in self.syncer.stats.items()},
            **{f"wb_{k}": v for k, v in self.writeback.stats.items()},
        }
