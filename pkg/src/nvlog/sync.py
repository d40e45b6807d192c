"""Sync write path: page-bounded segmentation, transactions and active sync."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .layout import IP_MAX, MetadataPayload
from .log_store import NvmFull, Record
from .page_cache import O_SYNC, FileState, PageState
from .pmem import PAGE_SIZE

if TYPE_CHECKING:
    from .engine import Engine

IP = "ip"
OOP = "oop"


@dataclass(frozen=True)
class Segment:
    file_offset: int
    length: int
    kind: str

    @property
    def page_no(self) -> int:
        return self.file_offset // PAGE_SIZE


def segment(offset: int, length: int) -> list[Segment]:
    """Split a write at page boundaries; whole aligned pages become OOP."""
    if length <= 0:
        raise ValueError("segment() needs a positive length")
    out = []
    pos, end = offset, offset + length
    while pos < end:
        seg_end = min(end, (pos // PAGE_SIZE + 1) * PAGE_SIZE)
        n = seg_end - pos
        out.append(Segment(pos, n, OOP if n == PAGE_SIZE else IP))
        pos = seg_end
    return out


def logged_payload(offset: int, length: int) -> int:
    """Payload bytes an O_SYNC write puts in NVM: exact bytes, whole pages for OOP."""
    return sum(s.length for s in segment(offset, length))


@dataclass
class ActiveSyncState:
    should_active_cnt: int = 0
    should_deact_cnt: int = 0


def mark_sync(file: FileState, written_bytes: int, dirty_pages: int, sensitivity: int,
              state: ActiveSyncState) -> None:
    """Called on each sync."""
    if written_bytes < dirty_pages * PAGE_SIZE:
        state.should_active_cnt += 1
        if state.should_active_cnt >= sensitivity:
            file.flags |= O_SYNC
            state.should_deact_cnt = 0


def clear_sync(file: FileState, written_bytes: int, dirty_pages: int, sensitivity: int,
               state: ActiveSyncState) -> None:
    """Called on each write."""
    if written_bytes >= dirty_pages * PAGE_SIZE:
        state.should_deact_cnt += 1
        if state.should_deact_cnt >= sensitivity:
            file.flags &= ~O_SYNC
            state.should_active_cnt = 0


class SyncEngine:
    def __init__(self, engine: Engine):
        self.engine = engine
        self._global_state = ActiveSyncState()
        self._file_states: dict[int, ActiveSyncState] = {}
        self._tid = 0
        self._tid_lock = threading.Lock()
        self.stats = {"osync_writes": 0, "fsyncs": 0, "fallback_syncs": 0, "empty_syncs": 0}

    def next_tid(self) -> int:
        with self._tid_lock:
            self._tid += 1
            return self._tid

    def seed_tid(self, last: int) -> None:
        with self._tid_lock:
            self._tid = max(self._tid, last)

    def state_for(self, ino: int) -> ActiveSyncState:
        if self.engine.config.actsync_scope == "global":
            return self._global_state
        return self._file_states.setdefault(ino, ActiveSyncState())

    # -- active sync hooks ---------------------------------------------------

    def on_write(self, fs: FileState) -> None:
        cfg = self.engine.config
        if cfg.active_sync and not fs.user_o_sync:
            clear_sync(fs, fs.written_bytes, fs.dirty_pages, cfg.sensitivity, self.state_for(fs.ino))

    def on_sync(self, fs: FileState) -> None:
        cfg = self.engine.config
        if cfg.active_sync and not fs.user_o_sync:
            mark_sync(fs, fs.written_bytes, fs.dirty_pages, cfg.sensitivity, self.state_for(fs.ino))
        fs.reset_counters()

    # -- NVM path ------------------------------------------------------------

    def _nvm_usable(self) -> bool:
        eng = self.engine
        if not eng.config.nvlog_enabled:
            return False
        if eng.fallback_active:
            eng.check_fallback()
        return not eng.fallback_active

    def _meta_record(self, fs: FileState) -> Record:
        return Record("meta", meta=MetadataPayload(fs.size, fs.mtime_ns, fs.mtime_ns))

    def _commit(self, fs: FileState, records: list[Record], tid: int) -> bool:
        eng = self.engine
        try:
            ilog = eng.inode_log(fs.ino)
            eng.log.append_transaction(ilog, records, tid)
        except NvmFull:
            eng.enter_fallback()
            return False
        return True

    def o_sync_write(self, fs: FileState, offset: int, length: int, prior: dict[int, PageState]) -> None:
        """Log one synchronous write as a transaction (cache already updated)."""
        eng = self.engine
        self.stats["osync_writes"] += 1
        tid = self.next_tid()
        records: list[Record] = []
        for seg in segment(offset, length):
            page = fs.pages[seg.page_no].data
            lo = seg.file_offset % PAGE_SIZE
            data = bytes(page[lo:lo + seg.length])
            if seg.kind == OOP:
                records.append(Record("oop", seg.file_offset, data))
            else:
                # oversized unaligned parts become two IP entries
                while data:
                    chunk = data[:IP_MAX]
                    records.append(Record("ip", seg.file_offset + (seg.length - len(data)), chunk))
                    data = data[IP_MAX:]
        if fs.size != fs.persisted_size:
            records.append(self._meta_record(fs))
        touched = sorted({s.page_no for s in segment(offset, length)})
        eng.emit("sync_begin", ino=fs.ino, kind="osync", off=offset, len=length, tid=tid,
                 n=sum(1 for r in records if r.kind in ("ip", "oop")))
        if self._nvm_usable() and self._commit(fs, records, tid):
            full_pages = {s.page_no for s in segment(offset, length) if s.kind == OOP}
            for p in touched:
                if p in full_pages or prior[p].fully_logged:
                    eng.cache.mark_absorbed(fs.ino, p, tid)
                else:
                    fs.pages[p].last_dirty_tid = tid
            eng.note_valid_entries(fs.ino, touched)
            fs.persisted_size = max(fs.persisted_size, fs.size)
        else:
            eng.emit("sync_fallback", ino=fs.ino)
            # O_SYNC has file-integrity semantics, so timestamps go too
            self._sync_to_disk(fs, touched, meta=True, force_meta=True)
        eng.emit("sync_done", ino=fs.ino, kind="osync", tid=tid)

    def fsync(self, fs: FileState, datasync: bool = False) -> None:
        eng = self.engine
        kind = "fdatasync" if datasync else "fsync"
        self.stats["fsyncs"] += 1
        with fs.lock:
            dirty = eng.cache.collect_dirty(fs.ino)
            self.on_sync(fs)
            if not dirty:
                self.stats["empty_syncs"] += 1
                return
            tid = self.next_tid()
            records = [Record("oop", p * PAGE_SIZE, bytes(pg.data)) for p, pg in dirty]
            if not datasync or fs.size != fs.persisted_size:
                records.append(self._meta_record(fs))
            eng.emit("sync_begin", ino=fs.ino, kind=kind, tid=tid, n=len(dirty))
            if self._nvm_usable() and self._commit(fs, records, tid):
                for p, _ in dirty:
                    eng.cache.mark_absorbed(fs.ino, p, tid)
                eng.note_valid_entries(fs.ino, [p for p, _ in dirty])
                fs.persisted_size = max(fs.persisted_size, fs.size)
            else:
                eng.emit("sync_fallback", ino=fs.ino)
                self._sync_to_disk(fs, eng.cache.dirty_pages_of(fs.ino),
                                   meta=fs.size != fs.disk_size, force_meta=not datasync)
            eng.emit("sync_done", ino=fs.ino, kind=kind, tid=tid)

    # -- disk path -----------------------------------------------------------

    def _sync_to_disk(self, fs: FileState, pages: list[int], meta: bool,
                      force_meta: bool = False) -> None:
        """Synchronous write-back used when NVM is disabled or full."""
        eng = self.engine
        self.stats["fallback_syncs"] += 1
        for p in pages:
            eng.writeback.writeback_page(fs.ino, p, sync=True)
        if meta or force_meta:
            # fsync also persists the timestamps, even when the size is unchanged
            eng.writeback.writeback_meta(fs, sync=True, force=force_meta)
