"""On-media record formats (little-endian, 64-byte slots).

Log page, slot 0 (header)::

    0..7    next_page (u32 in its own 8-byte word, 0 = end of chain)
    8..9    page_kind (1 super log, 2 inode log)
    10..11  slot_count (slots in use; written when the page is sealed)
    12..15  magic
    16..23  owner_ino
    24..31  owner_dev
    32..39  capacity_pages   (page 0 only)
    40..43  format version   (page 0 only)

Super log entry::

    0..1    flag (valid bit + kind)
    8..15   s_dev
    16..23  i_ino
    24..31  head_log_page (u32 in its own word)
    32..39  committed_log_tail (absolute address, 0 = nothing committed)

Inode log entry::

    0..1    flag        2..3   data_len     4..7   page_index
    8..15   file_offset 16..23 last_write   24..31 tid
    32..63  inline zone (first 32 IP bytes, or the metadata payload)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .pmem import PAGE_SIZE

SLOT_SIZE = 64
SLOTS_PER_PAGE = PAGE_SIZE // SLOT_SIZE
FIRST_SLOT = 1
INLINE_SIZE = 32
IP_MAX = INLINE_SIZE + (SLOTS_PER_PAGE - 2) * SLOT_SIZE  # 4000

MAGIC = 0x474C564E  # "NVLG"
FORMAT_VERSION = 1

KIND_SUPER = 1
KIND_INODE = 2

VALID = 0x8000
KIND_MASK = 0x00FF
ENTRY_WRITE = 1
ENTRY_META = 2
ENTRY_WB_RECORD = 3
ENTRY_KIND_NAMES = {ENTRY_WRITE: "write", ENTRY_META: "meta", ENTRY_WB_RECORD: "wb_record"}

SUPER_VALID = VALID | 1

HEADER = struct.Struct("<QHHIQQ")
ROOT_EXTRA = struct.Struct("<QI")
SUPER_ENTRY = struct.Struct("<HHIQQQQ")
ENTRY = struct.Struct("<HHIQQQ")
META = struct.Struct("<QQQ")

HDR_NEXT = 0
HDR_KIND = 8
HDR_SLOT_COUNT = 10
SUPER_HEAD = 24
SUPER_TAIL = 32
ENTRY_LAST_WRITE = 16


class CorruptLog(Exception):
    """The persistent log cannot be decoded; never silently ignored."""


def slot_addr(page: int, slot: int) -> int:
    return page * PAGE_SIZE + slot * SLOT_SIZE


def page_of(addr: int) -> int:
    return addr // PAGE_SIZE


def slot_of(addr: int) -> int:
    return (addr % PAGE_SIZE) // SLOT_SIZE


def ip_slots(data_len: int) -> int:
    """Slots used by an IP entry: the entry slot plus continuation slots."""
    extra = max(0, data_len - INLINE_SIZE)
    return 1 + (extra + SLOT_SIZE - 1) // SLOT_SIZE


@dataclass
class PageHeader:
    next_page: int
    page_kind: int
    slot_count: int
    magic: int
    owner_ino: int
    owner_dev: int

    def pack(self) -> bytes:
        return HEADER.pack(self.next_page, self.page_kind, self.slot_count, self.magic,
                           self.owner_ino, self.owner_dev).ljust(SLOT_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes) -> PageHeader:
        return cls(*HEADER.unpack_from(raw))


@dataclass
class SuperLogEntry:
    s_dev: int
    i_ino: int
    head_log_page: int
    committed_log_tail: int = 0
    flag: int = SUPER_VALID
    addr: int = 0

    @property
    def valid(self) -> bool:
        return self.flag == SUPER_VALID

    def pack(self) -> bytes:
        return SUPER_ENTRY.pack(self.flag, 0, 0, self.s_dev, self.i_ino, self.head_log_page,
                                self.committed_log_tail).ljust(SLOT_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes, addr: int = 0) -> SuperLogEntry:
        flag, _, _, dev, ino, head, tail = SUPER_ENTRY.unpack_from(raw)
        return cls(dev, ino, head, tail, flag, addr)


@dataclass
class MetadataPayload:
    new_size: int
    mtime_ns: int = 0
    ctime_ns: int = 0

    def pack(self) -> bytes:
        return META.pack(self.new_size, self.mtime_ns, self.ctime_ns)

    @classmethod
    def unpack(cls, raw: bytes) -> MetadataPayload:
        return cls(*META.unpack_from(raw))


@dataclass
class InodeLogEntry:
    kind: int
    data_len: int = 0
    page_index: int = 0
    file_offset: int = 0
    last_write: int = 0
    tid: int = 0
    inline: bytes = b""
    valid: bool = True
    addr: int = 0

    @property
    def flag(self) -> int:
        return self.kind | (VALID if self.valid else 0)

    @property
    def is_write(self) -> bool:
        return self.kind == ENTRY_WRITE

    @property
    def is_oop(self) -> bool:
        return self.kind == ENTRY_WRITE and self.page_index != 0

    @property
    def is_ip(self) -> bool:
        return self.kind == ENTRY_WRITE and self.page_index == 0

    @property
    def is_meta(self) -> bool:
        return self.kind == ENTRY_META

    @property
    def is_wb_record(self) -> bool:
        return self.kind == ENTRY_WB_RECORD

    @property
    def file_page(self) -> int:
        return self.file_offset // PAGE_SIZE

    @property
    def slots(self) -> int:
        return ip_slots(self.data_len) if self.is_ip else 1

    @property
    def metadata(self) -> MetadataPayload:
        return MetadataPayload.unpack(self.inline)

    def pack(self) -> bytes:
        head = ENTRY.pack(self.flag, self.data_len, self.page_index, self.file_offset,
                          self.last_write, self.tid)
        return head + self.inline[:INLINE_SIZE].ljust(INLINE_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes, addr: int = 0) -> InodeLogEntry:
        flag, data_len, page_index, file_offset, last_write, tid = ENTRY.unpack_from(raw)
        return cls(flag & KIND_MASK, data_len, page_index, file_offset, last_write, tid,
                   bytes(raw[ENTRY.size:SLOT_SIZE]), bool(flag & VALID), addr)

    def describe(self) -> str:
        kind = ENTRY_KIND_NAMES.get(self.kind, f"kind{self.kind}")
        if self.is_write:
            kind = "OOP" if self.is_oop else "IP"
        s = f"{kind:9s} tid={self.tid} off={self.file_offset} len={self.data_len}"
        if self.is_oop:
            s += f" data_page={self.page_index}"
        if self.is_meta:
            m = self.metadata
            s += f" size={m.new_size} mtime={m.mtime_ns}"
        if self.last_write:
            s += f" last_write={self.last_write:#x}"
        return s
