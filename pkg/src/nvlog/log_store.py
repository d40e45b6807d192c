"""Persistent log structure: super log, per-inode logs and the page pool."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .layout import (
    ENTRY_LAST_WRITE,
    ENTRY_META,
    ENTRY_WB_RECORD,
    ENTRY_WRITE,
    FIRST_SLOT,
    FORMAT_VERSION,
    HDR_NEXT,
    HDR_SLOT_COUNT,
    INLINE_SIZE,
    IP_MAX,
    KIND_INODE,
    KIND_SUPER,
    MAGIC,
    ROOT_EXTRA,
    SLOT_SIZE,
    SLOTS_PER_PAGE,
    SUPER_HEAD,
    SUPER_TAIL,
    SUPER_VALID,
    CorruptLog,
    InodeLogEntry,
    MetadataPayload,
    PageHeader,
    SuperLogEntry,
    ip_slots,
    page_of,
    slot_addr,
    slot_of,
)
from .pmem import PAGE_SIZE, PmemImage

ROOT_PAGE = 0


class NvmFull(Exception):
    """No free NVM page is available (recoverable: callers fall back to disk)."""


class DuplicateInode(ValueError):
    pass


_FREE_GLOBAL = 1
_FREE_CACHED = 2


class PagePool:
    """Volatile page allocator: a global free bitmap plus per-thread caches.

    A thread draws pages from its own cache and refills it ``batch`` pages at
    a time from the global bitmap.  ``reserve`` pages are held back for
    callers that pass ``reserved=True`` (write-back records), so expiring
    old entries stays possible when the pool is otherwise exhausted.
    """

    def __init__(self, capacity_pages: int, batch: int = 16, reserve: int = 0,
                 live: Iterable[int] = (ROOT_PAGE,)):
        self.capacity_pages = capacity_pages
        self.batch = max(1, batch)
        self.reserve = reserve
        self._state = bytearray([_FREE_GLOBAL]) * capacity_pages
        self._state[ROOT_PAGE] = 0
        for p in live:
            self._state[p] = 0
        self._nfree_global = self._state.count(_FREE_GLOBAL)
        self._caches: dict[int, list[int]] = {}
        self._lock = threading.Lock()
        self._hint = 1
        self.refills = 0
        self.listeners: list = []

    @property
    def free_count(self) -> int:
        return self._nfree_global + sum(len(c) for c in self._caches.values())

    @property
    def in_use(self) -> int:
        return self.capacity_pages - self.free_count

    def is_free(self, page: int) -> bool:
        return self._state[page] != 0

    def _refill(self, cache: list[int], want: int) -> None:
        state = self._state
        got = 0
        pos = self._hint
        while got < want and self._nfree_global:
            i = state.find(_FREE_GLOBAL, pos)
            if i < 0:
                if pos == 1:
                    break
                pos = 1
                continue
            state[i] = _FREE_CACHED
            cache.append(i)
            self._nfree_global -= 1
            got += 1
            pos = i + 1
        self._hint = pos if pos < self.capacity_pages else 1
        self.refills += 1

    def alloc_many(self, n: int, reserved: bool = False) -> list[int]:
        """Allocate ``n`` pages, all or nothing."""
        if n == 0:
            return []
        with self._lock:
            floor = 0 if reserved else self.reserve
            if self.free_count - n < floor:
                raise NvmFull(f"need {n} NVM pages, {self.free_count} free (reserve {floor})")
            cache = self._caches.setdefault(threading.get_ident(), [])
            out = []
            while len(out) < n:
                if not cache:
                    self._refill(cache, max(self.batch, n - len(out)))
                    if not cache:
                        # stranded in other threads' caches
                        self._steal(cache, n - len(out))
                page = cache.pop(0)
                self._state[page] = 0
                out.append(page)
            return out

    def _steal(self, cache: list[int], want: int) -> None:
        for other in self._caches.values():
            while other and want:
                cache.append(other.pop())
                want -= 1

    def alloc(self, reserved: bool = False) -> int:
        return self.alloc_many(1, reserved)[0]

    def free(self, page: int) -> None:
        if page == ROOT_PAGE or not 0 < page < self.capacity_pages:
            raise ValueError(f"cannot free page {page}")
        with self._lock:
            if self._state[page] != 0:
                raise ValueError(f"double free of NVM page {page}")
            self._state[page] = _FREE_GLOBAL
            self._nfree_global += 1
            if page < self._hint:
                self._hint = page
        for cb in self.listeners:
            cb()

    def live_pages(self) -> set[int]:
        return {i for i, s in enumerate(self._state) if s == 0}


@dataclass
class InodeLog:
    """Volatile handle on one inode log."""

    s_dev: int
    ino: int
    entry_addr: int
    head: int
    durable_tail: int = 0
    append_page: int = 0
    append_slot: int = FIRST_SLOT
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


@dataclass
class Record:
    """One entry to append: ``ip``, ``oop``, ``meta`` or ``wb``."""

    kind: str
    file_offset: int = 0
    data: bytes = b""
    meta: MetadataPayload | None = None

    @property
    def slots(self) -> int:
        return ip_slots(len(self.data)) if self.kind == "ip" else 1


def read_header(pmem: PmemImage, page: int) -> PageHeader:
    return PageHeader.unpack(pmem.load(page * PAGE_SIZE, SLOT_SIZE))


def read_entry(pmem: PmemImage, addr: int) -> InodeLogEntry:
    return InodeLogEntry.unpack(pmem.load(addr, SLOT_SIZE), addr)


def entry_payload(pmem: PmemImage, e: InodeLogEntry) -> bytes:
    if e.is_oop:
        return pmem.load(e.page_index * PAGE_SIZE, PAGE_SIZE)
    return pmem.load(e.addr + INLINE_SIZE, e.data_len)


def _check_page(pmem: PmemImage, page: int, kind: int, owner: int | None, seen: set[int]) -> PageHeader:
    if not 0 <= page < pmem.capacity_pages:
        raise CorruptLog(f"log page index {page} outside device of {pmem.capacity_pages} pages")
    if page in seen:
        raise CorruptLog(f"log chain loops back to page {page}")
    seen.add(page)
    hdr = read_header(pmem, page)
    if hdr.magic != MAGIC or hdr.page_kind != kind:
        raise CorruptLog(f"page {page} is not a {'super' if kind == KIND_SUPER else 'inode'} log page "
                         f"(magic={hdr.magic:#x} kind={hdr.page_kind})")
    if owner is not None and hdr.owner_ino != owner:
        raise CorruptLog(f"page {page} belongs to inode {hdr.owner_ino}, reached from inode {owner}")
    return hdr


def walk_inode_log(pmem: PmemImage, head: int, tail: int, ino: int | None = None) -> Iterator[InodeLogEntry]:
    """Yield committed entries of one inode log, oldest first, ending at ``tail``."""
    if tail == 0:
        return
    seen: set[int] = set()
    tail_page = page_of(tail)
    page = head
    hdr = _check_page(pmem, page, KIND_INODE, ino, seen)
    slot = FIRST_SLOT
    while True:
        limit = SLOTS_PER_PAGE if page == tail_page else hdr.slot_count
        if slot >= limit:
            if page == tail_page:
                raise CorruptLog(f"tail {tail:#x} not found in its page {page}")
            page = hdr.next_page
            if page == 0:
                raise CorruptLog(f"inode {ino} log chain ends before tail {tail:#x}")
            hdr = _check_page(pmem, page, KIND_INODE, ino, seen)
            slot = FIRST_SLOT
            continue
        addr = slot_addr(page, slot)
        e = read_entry(pmem, addr)
        if not e.valid or e.kind not in (ENTRY_WRITE, ENTRY_META, ENTRY_WB_RECORD):
            raise CorruptLog(f"invalid entry flag {e.flag:#x} at {addr:#x} (before tail {tail:#x})")
        if e.is_oop and (e.data_len != PAGE_SIZE or e.file_offset % PAGE_SIZE
                         or not 0 < e.page_index < pmem.capacity_pages):
            raise CorruptLog(f"malformed OOP entry at {addr:#x}: {e.describe()}")
        if e.is_ip and (e.data_len == 0 or e.data_len > IP_MAX
                        or e.file_offset // PAGE_SIZE != (e.file_offset + e.data_len - 1) // PAGE_SIZE):
            raise CorruptLog(f"malformed IP entry at {addr:#x}: {e.describe()}")
        if slot + e.slots > SLOTS_PER_PAGE:
            raise CorruptLog(f"entry at {addr:#x} straddles log page {page}")
        if page == tail_page and addr > tail:
            raise CorruptLog(f"walked past tail {tail:#x} in page {page}")
        yield e
        if addr == tail:
            return
        slot += e.slots


def chain_pages(pmem: PmemImage, head: int, tail: int, ino: int | None = None) -> list[int]:
    """Log pages from ``head`` through the page holding ``tail``."""
    if tail == 0:
        return [head]
    pages = [head]
    seen: set[int] = set()
    tail_page = page_of(tail)
    page = head
    while page != tail_page:
        hdr = _check_page(pmem, page, KIND_INODE, ino, seen)
        page = hdr.next_page
        if page == 0:
            raise CorruptLog(f"inode {ino} log chain ends before tail page {tail_page}")
        pages.append(page)
    return pages


def read_super_log(pmem: PmemImage) -> tuple[list[SuperLogEntry], list[int]]:
    """Return live super log entries and the super log page chain."""
    seen: set[int] = set()
    entries = []
    pages = []
    page = ROOT_PAGE
    while True:
        hdr = _check_page(pmem, page, KIND_SUPER, None, seen)
        pages.append(page)
        for slot in range(FIRST_SLOT, SLOTS_PER_PAGE):
            addr = slot_addr(page, slot)
            raw = pmem.load(addr, SLOT_SIZE)
            se = SuperLogEntry.unpack(raw, addr)
            if se.valid:
                entries.append(se)
        if hdr.next_page == 0:
            return entries, pages
        page = hdr.next_page


def format_image(pmem: PmemImage) -> None:
    """Write an empty super log at page 0."""
    hdr = PageHeader(0, KIND_SUPER, 0, MAGIC, 0, 0).pack()
    root = bytearray(PAGE_SIZE)
    root[:SLOT_SIZE] = hdr
    ROOT_EXTRA.pack_into(root, 32, pmem.capacity_pages, FORMAT_VERSION)
    pmem.store(0, bytes(root))
    pmem.persist(0, PAGE_SIZE)


class LogStore:
    """Owns the log chains on one NVM image."""

    def __init__(self, pmem: PmemImage, pool: PagePool, fault_drop_commit_fence: bool = False):
        self.pmem = pmem
        self.pool = pool
        self.fault_drop_commit_fence = fault_drop_commit_fence
        self.logs: dict[tuple[int, int], InodeLog] = {}
        self.super_lock = threading.Lock()
        self._super_page = ROOT_PAGE
        self._super_slot = FIRST_SLOT
        self.stats = {"transactions": 0, "entries": 0, "ip_payload_bytes": 0,
                      "oop_payload_bytes": 0, "log_pages_allocated": 0}

    @classmethod
    def load(cls, pmem: PmemImage, pool: PagePool, **kw) -> LogStore:
        store = cls(pmem, pool, **kw)
        entries, pages = read_super_log(pmem)
        for se in entries:
            ilog = InodeLog(se.s_dev, se.i_ino, se.addr, se.head_log_page, se.committed_log_tail)
            if se.committed_log_tail == 0:
                ilog.append_page, ilog.append_slot = se.head_log_page, FIRST_SLOT
            else:
                last = None
                for last in walk_inode_log(pmem, se.head_log_page, se.committed_log_tail, se.i_ino):
                    pass
                ilog.append_page = page_of(last.addr)
                ilog.append_slot = slot_of(last.addr) + last.slots
            store.logs[(se.s_dev, se.i_ino)] = ilog
        last_page = pages[-1]
        store._super_page = last_page
        store._super_slot = SLOTS_PER_PAGE
        for slot in range(SLOTS_PER_PAGE - 1, FIRST_SLOT - 1, -1):
            if pmem.load_u64(slot_addr(last_page, slot)) & 0xFFFF == SUPER_VALID:
                break
            store._super_slot = slot
        return store

    # -- super log ------------------------------------------------------------

    def get(self, s_dev: int, ino: int) -> InodeLog | None:
        return self.logs.get((s_dev, ino))

    def create_inode_log(self, s_dev: int, ino: int) -> InodeLog:
        pmem = self.pmem
        with self.super_lock:
            if (s_dev, ino) in self.logs:
                raise DuplicateInode(f"inode ({s_dev}, {ino}) already has a log")
            need_super = self._super_slot >= SLOTS_PER_PAGE
            pages = self.pool.alloc_many(2 if need_super else 1)
            head = pages[0]
            if need_super:
                new_super = pages[1]
                body = bytearray(PAGE_SIZE)
                body[:SLOT_SIZE] = PageHeader(0, KIND_SUPER, 0, MAGIC, 0, 0).pack()
                pmem.store(new_super * PAGE_SIZE, bytes(body))
                pmem.persist(new_super * PAGE_SIZE, PAGE_SIZE)
                link = self._super_page * PAGE_SIZE + HDR_NEXT
                pmem.store_u64(link, new_super)
                pmem.persist(link, 8)
                self._super_page, self._super_slot = new_super, FIRST_SLOT
                self.stats["log_pages_allocated"] += 1
            hdr_addr = head * PAGE_SIZE
            pmem.store(hdr_addr, PageHeader(0, KIND_INODE, 0, MAGIC, ino, s_dev).pack())
            pmem.clwb(hdr_addr, SLOT_SIZE)
            addr = slot_addr(self._super_page, self._super_slot)
            se = SuperLogEntry(s_dev, ino, head, 0, flag=0, addr=addr)
            pmem.store(addr, se.pack())
            pmem.persist(addr, SLOT_SIZE)
            # publish: the flag word goes last so a torn entry is never valid
            pmem.store(addr, SUPER_VALID.to_bytes(2, "little"), atomic=True)
            pmem.store(self._super_page * PAGE_SIZE + HDR_SLOT_COUNT,
                       self._super_slot.to_bytes(2, "little"), atomic=True)
            pmem.clwb(addr, SLOT_SIZE)
            pmem.clwb(self._super_page * PAGE_SIZE, SLOT_SIZE)
            pmem.sfence()
            self._super_slot += 1
            self.stats["log_pages_allocated"] += 1
            ilog = InodeLog(s_dev, ino, addr, head, 0, head, FIRST_SLOT)
            self.logs[(s_dev, ino)] = ilog
            return ilog

    # -- appends --------------------------------------------------------------

    def pages_needed(self, ilog: InodeLog, records: list[Record]) -> int:
        slot = ilog.append_slot
        n = 0
        for r in records:
            if slot + r.slots > SLOTS_PER_PAGE:
                n += 1
                slot = FIRST_SLOT
            slot += r.slots
            if r.kind == "oop":
                n += 1
        return n

    def _new_log_page(self, ilog: InodeLog, page: int) -> None:
        pmem = self.pmem
        pmem.store(page * PAGE_SIZE, PageHeader(0, KIND_INODE, 0, MAGIC, ilog.ino, ilog.s_dev).pack())
        pmem.clwb(page * PAGE_SIZE, SLOT_SIZE)
        old = ilog.append_page * PAGE_SIZE
        # seal the full page, then link it forward
        pmem.store(old + HDR_SLOT_COUNT, ilog.append_slot.to_bytes(2, "little"), atomic=True)
        pmem.store_u64(old + HDR_NEXT, page)
        pmem.clwb(old, SLOT_SIZE)
        ilog.append_page, ilog.append_slot = page, FIRST_SLOT
        self.stats["log_pages_allocated"] += 1

    def append_entry(self, ilog: InodeLog, entry: InodeLogEntry, payload: bytes = b"",
                     pages: list[int] | None = None, reserved: bool = False) -> int:
        """Store and flush one entry (not committed).  Returns its address.

        ``pages`` is a pre-allocated supply; without it pages come from the pool.
        """
        pmem = self.pmem

        def take() -> int:
            return pages.pop(0) if pages else self.pool.alloc(reserved)

        oop = entry.is_write and entry.data_len == PAGE_SIZE
        nslots = 1 if oop else entry.slots
        if ilog.append_slot + nslots > SLOTS_PER_PAGE:
            self._new_log_page(ilog, take())
        if oop:
            data_page = take()
            pmem.store(data_page * PAGE_SIZE, payload)
            pmem.clwb(data_page * PAGE_SIZE, PAGE_SIZE)
            entry.page_index = data_page
            self.stats["oop_payload_bytes"] += PAGE_SIZE
        addr = slot_addr(ilog.append_page, ilog.append_slot)
        raw = entry.pack()
        if entry.is_ip:
            raw = raw[:INLINE_SIZE] + payload
            self.stats["ip_payload_bytes"] += len(payload)
        pmem.store(addr, raw)
        pmem.clwb(addr, len(raw))
        entry.addr = addr
        ilog.append_slot += nslots
        self.stats["entries"] += 1
        return addr

    def commit(self, ilog: InodeLog, tail: int) -> None:
        """Publish every entry up to ``tail`` with one atomic tail store."""
        pmem = self.pmem
        if not self.fault_drop_commit_fence:
            pmem.sfence()
        pmem.store_u64(ilog.entry_addr + SUPER_TAIL, tail)
        pmem.clwb(ilog.entry_addr + SUPER_TAIL, 8)
        pmem.sfence()
        ilog.durable_tail = tail
        self.stats["transactions"] += 1

    def append_transaction(self, ilog: InodeLog, records: list[Record], tid: int,
                           reserved: bool = False) -> list[InodeLogEntry]:
        """Append ``records`` as one transaction and commit it.

        Every page the transaction needs is allocated up front, so ``NvmFull``
        is raised before anything is written.
        """
        pages = self.pool.alloc_many(self.pages_needed(ilog, records), reserved)
        entries = []
        for r in records:
            if r.kind == "ip":
                if not 0 < len(r.data) <= IP_MAX:
                    raise ValueError(f"IP payload of {len(r.data)} bytes")
                e = InodeLogEntry(ENTRY_WRITE, len(r.data), 0, r.file_offset, 0, tid)
                payload = r.data
            elif r.kind == "oop":
                if len(r.data) != PAGE_SIZE or r.file_offset % PAGE_SIZE:
                    raise ValueError("OOP records are whole aligned pages")
                e = InodeLogEntry(ENTRY_WRITE, PAGE_SIZE, 0, r.file_offset, 0, tid)
                payload = r.data
            elif r.kind == "meta":
                e = InodeLogEntry(ENTRY_META, 24, 0, 0, 0, tid, r.meta.pack())
                payload = b""
            elif r.kind == "wb":
                e = InodeLogEntry(ENTRY_WB_RECORD, PAGE_SIZE, 0, r.file_offset, 0, tid)
                payload = b""
            else:
                raise ValueError(f"unknown record kind {r.kind!r}")
            self.append_entry(ilog, e, payload, pages)
            entries.append(e)
        assert not pages, "page plan and appends disagree"
        self.commit(ilog, entries[-1].addr)
        return entries

    # -- GC support -----------------------------------------------------------

    def unlink_page(self, ilog: InodeLog, prev: int | None, page: int, next_page: int) -> None:
        """Drop ``page`` from the chain with one atomic pointer store, then free it."""
        pmem = self.pmem
        if prev is None:
            addr = ilog.entry_addr + SUPER_HEAD
            ilog.head = next_page
        else:
            addr = prev * PAGE_SIZE + HDR_NEXT
        pmem.store_u64(addr, next_page)
        pmem.persist(addr, 8)
        self.pool.free(page)

    def set_last_write(self, addr: int, prev: int) -> None:
        self.pmem.store_u64(addr + ENTRY_LAST_WRITE, prev)
