"""Latency-simulated disk holding one page file plus a metadata sidecar per inode.

A completed ``write_page`` is durable and atomic.  Without a root
directory the disk lives in memory only, which is what crash tests use.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from .pmem import PAGE_SIZE

ZERO_PAGE = bytes(PAGE_SIZE)


class DiskError(Exception):
    pass


@dataclass
class DiskMeta:
    size: int = 0
    mtime_ns: int = 0


class DiskBackend:
    def __init__(self, root: str | os.PathLike | None = None, clock=None,
                 latency_us: float = 0.0, sync_latency_us: float = 0.0):
        self.root = Path(root) if root is not None else None
        self.clock = clock
        self.latency_us = latency_us
        self.sync_latency_us = sync_latency_us
        self._pages: dict[tuple[int, int], bytes] = {}
        self._meta: dict[int, DiskMeta] = {}
        self._lock = threading.Lock()
        self.version = 0
        self.fail_writes = 0
        self.stats = {"page_writes": 0, "sync_page_writes": 0, "meta_writes": 0, "page_reads": 0}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- directory persistence ------------------------------------------------

    def _data_path(self, ino: int) -> Path:
        return self.root / f"{ino}.pages"

    def _meta_path(self, ino: int) -> Path:
        return self.root / f"{ino}.meta"

    def _load(self) -> None:
        for meta_path in sorted(self.root.glob("*.meta")):
            ino = int(meta_path.stem)
            raw = json.loads(meta_path.read_text())
            self._meta[ino] = DiskMeta(raw["size"], raw.get("mtime_ns", 0))
            data_path = self._data_path(ino)
            if data_path.exists():
                blob = data_path.read_bytes()
                for p in range(len(blob) // PAGE_SIZE):
                    chunk = blob[p * PAGE_SIZE:(p + 1) * PAGE_SIZE]
                    if chunk != ZERO_PAGE:
                        self._pages[(ino, p)] = chunk

    def _persist_meta(self, ino: int) -> None:
        m = self._meta[ino]
        tmp = self._meta_path(ino).with_suffix(".meta.tmp")
        tmp.write_text(json.dumps({"size": m.size, "mtime_ns": m.mtime_ns}))
        os.replace(tmp, self._meta_path(ino))

    # -- API ------------------------------------------------------------------

    def create(self, ino: int) -> None:
        with self._lock:
            if ino in self._meta:
                return
            self._meta[ino] = DiskMeta()
            self.version += 1
            if self.root is not None:
                self._data_path(ino).touch()
                self._persist_meta(ino)

    def exists(self, ino: int) -> bool:
        return ino in self._meta

    def files(self) -> list[int]:
        return sorted(self._meta)

    def read_page(self, ino: int, page_no: int) -> bytes:
        self.stats["page_reads"] += 1
        return self._pages.get((ino, page_no), ZERO_PAGE)

    def write_page(self, ino: int, page_no: int, data: bytes, sync: bool = False) -> None:
        if len(data) != PAGE_SIZE:
            raise ValueError("disk writes are whole pages")
        if ino not in self._meta:
            raise DiskError(f"inode {ino} does not exist on disk")
        if self.fail_writes:
            self.fail_writes -= 1
            raise DiskError(f"simulated write error on inode {ino} page {page_no}")
        if self.clock is not None:
            self.clock.charge(1000 * (self.sync_latency_us if sync else self.latency_us))
        data = bytes(data)
        with self._lock:
            self._pages[(ino, page_no)] = data
            self.version += 1
            self.stats["sync_page_writes" if sync else "page_writes"] += 1
            if self.root is not None:
                with open(self._data_path(ino), "r+b") as f:
                    f.seek(page_no * PAGE_SIZE)
                    f.write(data)

    def meta(self, ino: int) -> DiskMeta:
        return self._meta[ino]

    def size(self, ino: int) -> int:
        return self._meta[ino].size

    def set_meta(self, ino: int, size: int, mtime_ns: int = 0, sync: bool = False) -> None:
        if self.clock is not None:
            self.clock.charge(1000 * (self.sync_latency_us if sync else self.latency_us))
        with self._lock:
            self._meta[ino] = DiskMeta(size, mtime_ns)
            self.version += 1
            self.stats["meta_writes"] += 1
            if self.root is not None:
                self._persist_meta(ino)

    def fork(self) -> DiskBackend:
        """In-memory copy of the current durable state."""
        other = DiskBackend()
        with self._lock:
            other._pages = dict(self._pages)
            other._meta = {ino: DiskMeta(m.size, m.mtime_ns) for ino, m in self._meta.items()}
            other.version = self.version
        return other

    def snapshot(self) -> dict[int, tuple[int, dict[int, bytes]]]:
        """``{ino: (size, {page_no: bytes})}`` with all-zero pages omitted."""
        out: dict[int, tuple[int, dict[int, bytes]]] = {}
        with self._lock:
            for ino, m in self._meta.items():
                out[ino] = (m.size, {})
            for (ino, p), data in self._pages.items():
                if data != ZERO_PAGE:
                    out[ino][1][p] = data
        return out
