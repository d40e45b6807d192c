"""Reclamation of obsolete log entries, OOP data pages and log pages."""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING

from .layout import page_of
from .log_store import InodeLog, read_header, walk_inode_log

if TYPE_CHECKING:
    from .engine import Engine


@dataclass
class GcStats:
    inodes: int = 0
    entries_scanned: int = 0
    data_pages_freed: int = 0
    log_pages_freed: int = 0
    nvm_pages_in_use: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class GarbageCollector:
    def __init__(self, engine: Engine):
        self.engine = engine
        # addresses of OOP entries whose data page was already freed
        self.released: set[int] = set()
        self._mutex = threading.Lock()
        self.passes = 0
        self.reclaimed_total = 0

    def gc_pass(self) -> GcStats:
        eng = self.engine
        stats = GcStats()
        with self._mutex:
            eng.emit("gc_begin")
            for ilog in list(eng.log.logs.values()):
                fs = eng.cache.files.get(ilog.ino)
                disk_size = fs.disk_size if fs is not None else eng.disk_size_of(ilog.ino)
                self._collect(ilog, disk_size, stats)
                stats.inodes += 1
            self.passes += 1
            self.reclaimed_total += stats.data_pages_freed + stats.log_pages_freed
            stats.nvm_pages_in_use = eng.pool.in_use
            eng.emit("gc_done", freed=stats.data_pages_freed + stats.log_pages_freed)
        return stats

    def _collect(self, ilog: InodeLog, disk_size: int, stats: GcStats) -> None:
        eng = self.engine
        tail = ilog.durable_tail
        if not tail:
            return
        entries = list(walk_inode_log(eng.pmem, ilog.head, tail, ilog.ino))
        stats.entries_scanned += len(entries)

        last_halt: dict[int, int] = {}
        last_meta = -1
        for i, e in enumerate(entries):
            if e.is_meta:
                last_meta = i
            elif e.is_oop or e.is_wb_record:
                last_halt[e.file_page] = i

        def superseded(i: int) -> bool:
            e = entries[i]
            if e.is_meta:
                return i < last_meta or e.metadata.new_size <= disk_size
            return last_halt.get(e.file_page, -1) > i

        for i, e in enumerate(entries):
            if e.is_oop and e.addr not in self.released and superseded(i):
                eng.pool.free(e.page_index)
                self.released.add(e.addr)
                stats.data_pages_freed += 1

        groups: list[tuple[int, list[int]]] = []
        for i, e in enumerate(entries):
            pg = page_of(e.addr)
            if not groups or groups[-1][0] != pg:
                groups.append((pg, []))
            groups[-1][1].append(i)

        # every file page with an entry on a kept log page, dead or alive
        survivors: set[int] = set()
        prev: int | None = None
        tail_page = page_of(tail)
        for pg, idx in groups:
            if pg == tail_page:
                break
            dead = all(
                superseded(i) or (entries[i].is_wb_record and entries[i].file_page not in survivors)
                for i in idx
            )
            if dead:
                nxt = read_header(eng.pmem, pg).next_page
                eng.log.unlink_page(ilog, prev, pg, nxt)
                for i in idx:
                    self.released.discard(entries[i].addr)
                stats.log_pages_freed += 1
            else:
                prev = pg
                survivors.update(entries[i].file_page for i in idx if not entries[i].is_meta)

