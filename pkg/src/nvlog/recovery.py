"""Crash recovery: replay committed, unexpired log entries onto the disk.

Pass 1 walks every inode log up to its committed tail, links entries of
the same file page through ``last_write`` and remembers the newest entry
per page.  Pass 2 starts at that newest entry and follows ``last_write``
backwards until it meets a write-back record (not replayed) or an OOP
entry (replayed), then applies the collected entries oldest first.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

from .disk import DiskBackend
from .layout import (
    ENTRY_META,
    ENTRY_WB_RECORD,
    ENTRY_WRITE,
    FIRST_SLOT,
    SLOTS_PER_PAGE,
    InodeLogEntry,
    page_of,
    slot_addr,
    slot_of,
)
from .log_store import chain_pages, entry_payload, read_entry, read_super_log, walk_inode_log
from .pmem import PAGE_SIZE, PmemImage


@dataclass
class RecoveryReport:
    inodes: int = 0
    entries_scanned: int = 0
    replayed_entries: int = 0
    replayed_bytes: int = 0
    replayed_pages: dict[int, list[int]] = field(default_factory=dict)
    dropped_uncommitted: int = 0
    sizes: dict[int, int] = field(default_factory=dict)
    live_pages: set[int] = field(default_factory=set)
    dead_oop_entries: set[int] = field(default_factory=set)
    committed_writes: dict[int, Counter] = field(default_factory=dict)
    max_tid: int = 0
    elapsed_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "inodes": self.inodes,
            "entries_scanned": self.entries_scanned,
            "replayed_entries": self.replayed_entries,
            "replayed_bytes": self.replayed_bytes,
            "replayed_pages": sum(len(v) for v in self.replayed_pages.values()),
            "dropped_uncommitted": self.dropped_uncommitted,
            "live_pages": len(self.live_pages),
            "dead_oop_entries": len(self.dead_oop_entries),
            "max_tid": self.max_tid,
            "elapsed_s": round(self.elapsed_s, 6),
        }


def _count_after_tail(pmem: PmemImage, head: int, tail: int, floor_tid: int) -> int:
    """Valid-looking entries past the committed tail (torn or unfinished transactions)."""
    if tail:
        page = page_of(tail)
        slot = slot_of(tail) + read_entry(pmem, tail).slots
    else:
        page, slot = head, FIRST_SLOT
    n = 0
    while slot < SLOTS_PER_PAGE:
        e = read_entry(pmem, slot_addr(page, slot))
        if not e.valid or e.kind not in (ENTRY_WRITE, ENTRY_META, ENTRY_WB_RECORD) or e.tid <= floor_tid:
            break
        n += 1
        slot += e.slots
    return n


def recover(pmem: PmemImage, disk: DiskBackend) -> RecoveryReport:
    """Bring ``disk`` up to date with the committed log on ``pmem``.

    Raises ``CorruptLog`` if a chain cannot be decoded.  Running it twice
    gives the same disk state.
    """
    t0 = time.perf_counter()
    report = RecoveryReport()
    supers, super_pages = read_super_log(pmem)
    report.live_pages.update(super_pages)
    for se in supers:
        ino = se.i_ino
        tail = se.committed_log_tail
        report.inodes += 1
        if not disk.exists(ino):
            disk.create(ino)
        report.live_pages.update(chain_pages(pmem, se.head_log_page, tail, ino))

        newest: dict[int, int] = {}
        meta: InodeLogEntry | None = None
        oops: list[InodeLogEntry] = []
        tids: Counter = Counter()
        last_tid = 0
        for e in walk_inode_log(pmem, se.head_log_page, tail, ino):
            report.entries_scanned += 1
            last_tid = max(last_tid, e.tid)
            if e.is_meta:
                meta = e
                continue
            if e.is_write:
                tids[e.tid] += 1
            if e.is_oop:
                oops.append(e)
            pmem.store_u64(e.addr + 16, newest.get(e.file_page, 0))
            newest[e.file_page] = e.addr
        report.committed_writes[ino] = tids
        report.max_tid = max(report.max_tid, last_tid)
        report.dropped_uncommitted += _count_after_tail(pmem, se.head_log_page, tail, last_tid)

        replayed: set[int] = set()
        pages = []
        for page_no in sorted(newest):
            chain = []
            addr = newest[page_no]
            while addr:
                e = read_entry(pmem, addr)
                if e.is_wb_record:
                    break
                chain.append(e)
                if e.is_oop:
                    break
                addr = e.last_write
            if not chain:
                continue
            buf = bytearray(disk.read_page(ino, page_no))
            for e in reversed(chain):
                data = entry_payload(pmem, e)
                lo = e.file_offset % PAGE_SIZE
                buf[lo:lo + len(data)] = data
                report.replayed_entries += 1
                report.replayed_bytes += len(data)
                if e.is_oop:
                    replayed.add(e.addr)
                    report.live_pages.add(e.page_index)
            disk.write_page(ino, page_no, bytes(buf))
            pages.append(page_no)
        if pages:
            report.replayed_pages[ino] = pages
        report.dead_oop_entries.update(e.addr for e in oops if e.addr not in replayed)

        current = disk.meta(ino)
        if meta is not None:
            m = meta.metadata
            if m.new_size > current.size or m.mtime_ns > current.mtime_ns:
                disk.set_meta(ino, max(m.new_size, current.size), max(m.mtime_ns, current.mtime_ns))
        report.sizes[ino] = disk.size(ino)
    report.elapsed_s = time.perf_counter() - t0
    return report

