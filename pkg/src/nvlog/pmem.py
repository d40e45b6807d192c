"""Emulated byte-addressable persistent memory.

The model is x86-like: stores land in a volatile store buffer keyed by
64-byte cacheline, ``clwb`` marks lines for write-back and ``sfence`` drains
every marked line into the durable array.  A crash keeps the durable array
plus an arbitrary subset of the still-pending lines; each line persists
whole, so an aligned 8-byte value is never torn.
"""

from __future__ import annotations

import itertools
import mmap
import os
import random
import threading
from pathlib import Path
from typing import Callable, Iterable, Iterator

PAGE_SIZE = 4096
LINE_SIZE = 64

ADR = "adr"
EADR = "eadr"

DROP_ALL_UNFENCED = "drop_all_unfenced"
RANDOM_SUBSET = "random_subset"
ENUMERATE_SUBSETS = "enumerate_subsets"

DEFAULT_ENUM_CAP = 1 << 12


class PmemError(Exception):
    pass


class PmemRangeError(PmemError, IndexError):
    pass


def line_of(addr: int) -> int:
    return addr & ~(LINE_SIZE - 1)


def lines_spanning(addr: int, length: int) -> range:
    if length <= 0:
        return range(0)
    return range(line_of(addr), addr + length, LINE_SIZE)


class PmemImage:
    """A persistent-memory device of ``capacity_pages`` 4 KiB pages."""

    def __init__(
        self,
        capacity_pages: int,
        mode: str = ADR,
        durable: bytearray | mmap.mmap | None = None,
        store_latency_ns: float = 0.0,
        clock=None,
    ):
        if capacity_pages < 2:
            raise ValueError("an NVM image needs at least 2 pages")
        if mode not in (ADR, EADR):
            raise ValueError(f"unknown pmem mode {mode!r}")
        self.capacity_pages = capacity_pages
        self.size = capacity_pages * PAGE_SIZE
        self.mode = mode
        if durable is None:
            durable = bytearray(self.size)
        elif len(durable) != self.size:
            raise ValueError("durable backing has the wrong size")
        self.durable = durable
        self.store_latency_ns = store_latency_ns
        self.clock = clock
        # line address -> newest (not yet durable) content of that line
        self._pending: dict[int, bytearray] = {}
        self._flushed: set[int] = set()
        self._lock = threading.RLock()
        self.fence_count = 0
        self.durable_version = 0
        self.fence_hooks: list[Callable[[PmemImage], None]] = []
        self._file = None

    # -- file backing -----------------------------------------------------

    @classmethod
    def create(cls, path: str | os.PathLike, capacity_pages: int, mode: str = ADR,
               force: bool = False, **kw) -> PmemImage:
        path = Path(path)
        if path.exists() and not force:
            raise FileExistsError(f"{path} already exists (use force to overwrite)")
        with open(path, "wb") as f:
            f.truncate(capacity_pages * PAGE_SIZE)
        return cls.open(path, mode=mode, **kw)

    @classmethod
    def open(cls, path: str | os.PathLike, mode: str = ADR, **kw) -> PmemImage:
        size = os.path.getsize(path)
        if size == 0 or size % PAGE_SIZE:
            raise PmemError(f"{path}: size {size} is not a whole number of pages")
        f = open(path, "r+b")
        mm = mmap.mmap(f.fileno(), size)
        img = cls(size // PAGE_SIZE, mode=mode, durable=mm, **kw)
        img._file = f
        return img

    def save(self, path: str | os.PathLike) -> None:
        """Write the durable array verbatim to ``path``."""
        with open(path, "wb") as f:
            f.write(self.durable)

    def close(self) -> None:
        if self._file is not None:
            self.durable.flush()
            self.durable.close()
            self._file.close()
            self._file = None

    # -- CPU side -----------------------------------------------------------

    def _check(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise PmemRangeError(f"access [{addr}, {addr + length}) outside device of {self.size} bytes")

    def store(self, addr: int, data: bytes, atomic: bool = False) -> None:
        n = len(data)
        self._check(addr, n)
        if atomic and (n > 8 or (addr // 8) != ((addr + n - 1) // 8)):
            raise PmemError(f"atomic store of {n} bytes at {addr} straddles an 8-byte word")
        if self.clock is not None and self.store_latency_ns:
            self.clock.charge(self.store_latency_ns * len(lines_spanning(addr, n)))
        with self._lock:
            if self.mode == EADR:
                self.durable[addr:addr + n] = data
                self.durable_version += 1
                return
            pending = self._pending
            durable = self.durable
            end = addr + n
            pos = addr
            view = memoryview(data)
            while pos < end:
                line = pos & ~(LINE_SIZE - 1)
                chunk_end = min(end, line + LINE_SIZE)
                buf = pending.get(line)
                if buf is None:
                    buf = bytearray(durable[line:line + LINE_SIZE])
                    pending[line] = buf
                else:
                    # a re-dirtied line needs a fresh clwb
                    self._flushed.discard(line)
                buf[pos - line:chunk_end - line] = view[pos - addr:chunk_end - addr]
                pos = chunk_end

    def store_u64(self, addr: int, value: int) -> None:
        self.store(addr, value.to_bytes(8, "little"), atomic=True)

    def load(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        pending = self._pending
        if not pending:
            return bytes(self.durable[addr:addr + length])
        with self._lock:
            first = line_of(addr)
            if length <= LINE_SIZE and first == line_of(addr + length - 1):
                buf = pending.get(first)
                if buf is None:
                    return bytes(self.durable[addr:addr + length])
                return bytes(buf[addr - first:addr - first + length])
            out = bytearray(self.durable[addr:addr + length])
            for line in lines_spanning(addr, length):
                buf = pending.get(line)
                if buf is None:
                    continue
                lo = max(line, addr)
                hi = min(line + LINE_SIZE, addr + length)
                out[lo - addr:hi - addr] = buf[lo - line:hi - line]
            return bytes(out)

    def load_u64(self, addr: int) -> int:
        return int.from_bytes(self.load(addr, 8), "little")

    def clwb(self, addr: int, length: int) -> None:
        self._check(addr, length)
        if self.mode == EADR:
            return
        with self._lock:
            pending = self._pending
            for line in lines_spanning(addr, length):
                if line in pending:
                    self._flushed.add(line)

    def sfence(self) -> None:
        with self._lock:
            self.fence_count += 1
            for hook in self.fence_hooks:
                hook(self)
            if not self._flushed:
                return
            durable = self.durable
            pending = self._pending
            for line in self._flushed:
                durable[line:line + LINE_SIZE] = pending.pop(line)
            self._flushed.clear()
            self.durable_version += 1

    def persist(self, addr: int, length: int) -> None:
        """clwb + sfence over a range."""
        self.clwb(addr, length)
        self.sfence()

    # -- introspection ------------------------------------------------------

    @property
    def buffered(self) -> dict[int, bytes]:
        with self._lock:
            return {line: bytes(buf) for line, buf in self._pending.items()}

    @property
    def flush_marked(self) -> frozenset[int]:
        with self._lock:
            return frozenset(self._flushed)

    def pending_lines(self) -> list[int]:
        with self._lock:
            return sorted(self._pending)

    def durable_bytes(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        return bytes(self.durable[addr:addr + length])

    # -- crash injection ----------------------------------------------------

    def image_with(self, lines: Iterable[int]) -> PmemImage:
        """Post-crash device: durable state plus the given pending lines."""
        with self._lock:
            data = bytearray(self.durable)
            for line in lines:
                data[line:line + LINE_SIZE] = self._pending[line]
        return PmemImage(self.capacity_pages, mode=self.mode, durable=data)

    def overlay(self, lines: Iterable[int]) -> PmemImage:
        """Cheap post-crash view sharing this device's durable array.

        The chosen lines sit in the view's store buffer, so loads see them
        and later stores stay private as long as the view is never fenced.
        Meant for read-mostly consumers such as recovery checks.
        """
        view = PmemImage(self.capacity_pages, mode=ADR, durable=self.durable)
        with self._lock:
            view._pending = {line: bytearray(self._pending[line]) for line in lines}
        view.sfence = _refuse_fence
        return view

    def crash(self, policy: str = DROP_ALL_UNFENCED, seed: int | None = None,
              cap: int = DEFAULT_ENUM_CAP) -> PmemImage | Iterator[PmemImage]:
        """Simulate a power failure.

        ``drop_all_unfenced`` and ``random_subset`` return one image;
        ``enumerate_subsets`` returns an iterator over every subset of the
        pending lines, or ``cap`` seeded random subsets when there are more.
        """
        if policy == DROP_ALL_UNFENCED:
            return self.image_with(())
        if policy == RANDOM_SUBSET:
            rng = random.Random(seed)
            return self.image_with(line for line in self.pending_lines() if rng.random() < 0.5)
        if policy == ENUMERATE_SUBSETS:
            return (self.image_with(s) for s in self.subsets(cap=cap, seed=seed))
        raise ValueError(f"unknown crash policy {policy!r}")

    def subsets(self, cap: int = DEFAULT_ENUM_CAP, seed: int | None = None) -> Iterator[tuple[int, ...]]:
        lines = self.pending_lines()
        if len(lines) < 63 and (1 << len(lines)) <= cap:
            for k in range(len(lines) + 1):
                yield from itertools.combinations(lines, k)
            return
        rng = random.Random(seed)
        for _ in range(cap):
            yield tuple(line for line in lines if rng.random() < 0.5)


def _refuse_fence() -> None:
    raise PmemError("overlay images share durable storage and cannot be fenced")
