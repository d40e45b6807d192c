"""Volatile DRAM page cache.

The cache is the source of truth for program-visible data.  Besides the
usual dirty bit every page carries an ``absorbed`` bit: set when all of the
page's dirty bytes are already held by the NVM log, cleared whenever the
page is dirtied again.  Pages are never read back from NVM.
"""

from __future__ import annotations

import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

from .pmem import PAGE_SIZE

O_SYNC = os.O_SYNC


@dataclass(eq=False)
class CachedPage:
    ino: int
    page_no: int
    data: bytearray = field(default_factory=lambda: bytearray(PAGE_SIZE))
    dirty: bool = False
    absorbed: bool = False
    last_dirty_tid: int = 0
    version: int = 0


@dataclass(eq=False)
class FileState:
    ino: int
    size: int = 0
    user_o_sync: bool = False
    flags: int = 0
    pages: dict[int, CachedPage] = field(default_factory=dict)
    # counters between two syncs
    written_bytes: int = 0
    dirtied: set[int] = field(default_factory=set)
    # largest size known durable (disk sidecar or a committed metadata entry)
    persisted_size: int = 0
    disk_size: int = 0
    mtime_ns: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def o_sync(self) -> bool:
        return self.user_o_sync or bool(self.flags & O_SYNC)

    @property
    def dirty_pages(self) -> int:
        return len(self.dirtied)

    def reset_counters(self) -> None:
        self.written_bytes = 0
        self.dirtied.clear()


@dataclass
class PageState:
    """Flags of a page just before a write touched it."""

    was_dirty: bool
    was_absorbed: bool

    @property
    def fully_logged(self) -> bool:
        return not self.was_dirty or self.was_absorbed


class PageCache:
    def __init__(self, disk, capacity_pages: int | None = None, clock=None,
                 dram_ns_per_byte: float = 0.0, cold_read_latency_us: float = 0.0):
        self.disk = disk
        self.capacity_pages = capacity_pages
        self.clock = clock
        self.dram_ns_per_byte = dram_ns_per_byte
        self.cold_read_latency_us = cold_read_latency_us
        self.files: dict[int, FileState] = {}
        self.dirty_queue: OrderedDict[tuple[int, int], None] = OrderedDict()
        self._lru: OrderedDict[tuple[int, int], None] = OrderedDict()
        self._lock = threading.Lock()
        self.stats = {"hits": 0, "misses": 0, "nvm_reads": 0}

    def _charge(self, ns: float) -> None:
        if self.clock is not None and ns:
            self.clock.charge(ns)

    def open(self, ino: int) -> FileState:
        fs = self.files.get(ino)
        if fs is None:
            if not self.disk.exists(ino):
                self.disk.create(ino)
            size = self.disk.size(ino)
            fs = FileState(ino, size=size, persisted_size=size, disk_size=size)
            self.files[ino] = fs
        return fs

    def file(self, ino: int) -> FileState:
        try:
            return self.files[ino]
        except KeyError:
            raise FileNotFoundError(f"inode {ino} is not open") from None

    def _page(self, fs: FileState, page_no: int) -> CachedPage:
        page = fs.pages.get(page_no)
        key = (fs.ino, page_no)
        if page is not None:
            self.stats["hits"] += 1
            if self.capacity_pages is not None:
                with self._lock:
                    self._lru.move_to_end(key)
            return page
        self.stats["misses"] += 1
        self._charge(self.cold_read_latency_us * 1000)
        page = CachedPage(fs.ino, page_no, bytearray(self.disk.read_page(fs.ino, page_no)))
        fs.pages[page_no] = page
        if self.capacity_pages is not None:
            with self._lock:
                self._lru[key] = None
                self._evict()
        return page

    def _evict(self) -> None:
        excess = len(self._lru) - self.capacity_pages
        if excess <= 0:
            return
        for key in list(self._lru):
            if excess <= 0:
                break
            ino, p = key
            page = self.files[ino].pages.get(p)
            if page is None or not page.dirty:
                self.files[ino].pages.pop(p, None)
                del self._lru[key]
                excess -= 1

    def read(self, ino: int, offset: int, length: int) -> bytes:
        fs = self.file(ino)
        with fs.lock:
            end = min(offset + length, fs.size)
            if end <= offset:
                return b""
            out = bytearray()
            pos = offset
            while pos < end:
                p, off = divmod(pos, PAGE_SIZE)
                n = min(end - pos, PAGE_SIZE - off)
                out += self._page(fs, p).data[off:off + n]
                pos += n
        self._charge(len(out) * self.dram_ns_per_byte)
        return bytes(out)

    def write(self, ino: int, offset: int, data: bytes) -> dict[int, PageState]:
        """Copy ``data`` into the cache; returns the prior state of each touched page."""
        fs = self.file(ino)
        prior: dict[int, PageState] = {}
        with fs.lock:
            pos = offset
            end = offset + len(data)
            view = memoryview(data)
            while pos < end:
                p, off = divmod(pos, PAGE_SIZE)
                n = min(end - pos, PAGE_SIZE - off)
                page = self._page(fs, p)
                prior[p] = PageState(page.dirty, page.absorbed)
                page.data[off:off + n] = view[pos - offset:pos - offset + n]
                page.version += 1
                page.absorbed = False
                if not page.dirty:
                    page.dirty = True
                    with self._lock:
                        self.dirty_queue[(ino, p)] = None
                fs.dirtied.add(p)
                pos += n
            fs.size = max(fs.size, end)
            fs.written_bytes += len(data)
        self._charge(len(data) * self.dram_ns_per_byte)
        return prior

    def collect_dirty(self, ino: int) -> list[tuple[int, CachedPage]]:
        """Dirty pages whose content is not yet held by the NVM log."""
        fs = self.file(ino)
        with fs.lock:
            return sorted((p, pg) for p, pg in fs.pages.items() if pg.dirty and not pg.absorbed)

    def dirty_pages_of(self, ino: int) -> list[int]:
        fs = self.file(ino)
        with fs.lock:
            return sorted(p for p, pg in fs.pages.items() if pg.dirty)

    def mark_absorbed(self, ino: int, page_no: int, tid: int) -> None:
        page = self.files[ino].pages[page_no]
        page.absorbed = page.dirty
        page.last_dirty_tid = tid

    def mark_written_back(self, ino: int, page_no: int, version: int | None = None) -> bool:
        """Clear dirty/absorbed once the page is durable on disk.

        With ``version`` the flags are only cleared if the page has not been
        written since that snapshot.
        """
        fs = self.file(ino)
        with fs.lock:
            page = fs.pages.get(page_no)
            if page is None or not page.dirty:
                return False
            if version is not None and page.version != version:
                return False
            page.dirty = False
            page.absorbed = False
            with self._lock:
                self.dirty_queue.pop((ino, page_no), None)
            return True

    def oldest_dirty(self, n: int) -> list[tuple[int, int]]:
        with self._lock:
            out = []
            for key in self.dirty_queue:
                if len(out) >= n:
                    break
                out.append(key)
            return out

    @property
    def dirty_count(self) -> int:
        return len(self.dirty_queue)

    @property
    def absorbed_count(self) -> int:
        return sum(1 for fs in self.files.values() for pg in fs.pages.values() if pg.absorbed)

    def prewarm(self, ino: int, length: int) -> None:
        """Load every page of the first ``length`` bytes (sizes the file if needed)."""
        fs = self.file(ino)
        with fs.lock:
            for p in range((length + PAGE_SIZE - 1) // PAGE_SIZE):
                self._page(fs, p)
