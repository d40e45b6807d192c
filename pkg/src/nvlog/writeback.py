"""Asynchronous write-back of dirty cache pages and write-back record emission.

A write-back record for a page is appended only after the disk copy of
the page is durable; appending it earlier would expire log entries whose
data the disk does not hold yet.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

from .disk import DiskError
from .log_store import NvmFull, Record
from .page_cache import FileState
from .pmem import PAGE_SIZE

if TYPE_CHECKING:
    from .engine import Engine


class WritebackEngine:
    def __init__(self, engine: Engine):
        self.engine = engine
        self.stats = {"pages_written": 0, "records": 0, "records_skipped": 0,
                      "aborted": 0, "disk_errors": 0, "meta_writes": 0}
        self._skip_budget = engine.config.fault_skip_wb_record

    def _skip_record(self) -> bool:
        """Fault hook: drop the n-th record that would be appended."""
        if self._skip_budget is None:
            return False
        if self._skip_budget == 0:
            self._skip_budget = None
            return True
        self._skip_budget -= 1
        return False

    def writeback_page(self, ino: int, page_no: int, sync: bool = False) -> bool:
        eng = self.engine
        fs = eng.cache.file(ino)
        with fs.lock:
            page = fs.pages.get(page_no)
            if page is None or not page.dirty:
                return False
            snapshot = bytes(page.data)
            version = page.version
            eng.emit("writeback_begin", ino=ino, page=page_no)
        try:
            eng.disk.write_page(ino, page_no, snapshot, sync=sync)
        except DiskError:
            self.stats["disk_errors"] += 1
            eng.emit("writeback_abort", ino=ino, page=page_no)
            if sync:
                raise
            return False
        eng.emit("disk_durable", ino=ino, page=page_no)
        with fs.lock:
            if page.version != version:
                # rewritten meanwhile: keep it dirty and its entries valid
                self.stats["aborted"] += 1
                eng.emit("writeback_abort", ino=ino, page=page_no)
                return False
            if eng.has_valid_entries(ino, page_no) and eng.config.expire_on_writeback:
                if self._skip_record():
                    self.stats["records_skipped"] += 1
                else:
                    try:
                        self._append_record(ino, page_no)
                    except NvmFull:
                        # entries stay valid; the page stays dirty for a retry
                        self.stats["aborted"] += 1
                        eng.emit("writeback_abort", ino=ino, page=page_no)
                        return False
            eng.cache.mark_written_back(ino, page_no, version)
            self.stats["pages_written"] += 1
            eng.emit("writeback_done", ino=ino, page=page_no)
        return True

    def _append_record(self, ino: int, page_no: int) -> None:
        eng = self.engine
        ilog = eng.inode_log(ino)
        with ilog.lock:
            eng.log.append_transaction(ilog, [Record("wb", page_no * PAGE_SIZE)],
                                       eng.syncer.next_tid(), reserved=True)
        eng.clear_valid_entries(ino, page_no)
        self.stats["records"] += 1

    def writeback_meta(self, fs: FileState, sync: bool = False, force: bool = False) -> bool:
        """Persist size and mtime in the disk sidecar if the size changed (or ``force``)."""
        eng = self.engine
        with fs.lock:
            if fs.size == fs.disk_size and not force:
                return False
            size, mtime = fs.size, fs.mtime_ns
        eng.disk.set_meta(fs.ino, size, mtime, sync=sync)
        with fs.lock:
            fs.disk_size = max(fs.disk_size, size)
            fs.persisted_size = max(fs.persisted_size, size)
        self.stats["meta_writes"] += 1
        eng.emit("meta_durable", ino=fs.ino, size=size)
        return True

    def writeback_tick(self, batch: int | None = None) -> int:
        """Write back up to ``batch`` of the oldest dirty pages."""
        eng = self.engine
        batch = eng.config.writeback_batch if batch is None else batch
        written = 0
        touched = set()
        with eng.clock.background():
            for ino, page_no in eng.cache.oldest_dirty(batch):
                if self.writeback_page(ino, page_no):
                    written += 1
                touched.add(ino)
            for ino in sorted(touched):
                self.writeback_meta(eng.cache.file(ino))
        return written

    def writeback_all(self) -> int:
        total = 0
        while True:
            n = self.writeback_tick()
            total += n
            if n == 0:
                break
        with self.engine.clock.background():
            for fs in list(self.engine.cache.files.values()):
                self.writeback_meta(fs)
        return total

