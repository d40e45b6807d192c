"""Externally observable engine events, one structured record per line.

Record keys: ``seq``, ``ev`` (event kind), ``fence`` (device fence counter
when emitted), plus per-kind fields among ``ino``, ``off``, ``len``,
``page``, ``tid``, ``kind`` and ``data`` (hex, writes only).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Iterator

EVENT_KINDS = frozenset({
    "open", "write", "sync_begin", "sync_fallback", "sync_done",
    "writeback_begin", "disk_durable", "writeback_done", "writeback_abort",
    "meta_durable", "gc_begin", "gc_done", "crash_point",
})


class Trace:
    def __init__(self, keep: bool = True, fence_source: Callable[[], int] | None = None):
        self.keep = keep
        self.records: list[dict] = []
        self.subscribers: list[Callable[[dict], None]] = []
        self.fence_source = fence_source
        self._seq = 0

    def emit(self, ev: str, **fields) -> dict:
        if ev not in EVENT_KINDS:
            raise ValueError(f"unknown trace event {ev!r}")
        rec = {"seq": self._seq, "ev": ev,
               "fence": self.fence_source() if self.fence_source else 0}
        if "data" in fields:
            fields["data"] = bytes(fields["data"]).hex()
        rec.update(fields)
        self._seq += 1
        if self.keep:
            self.records.append(rec)
        for sub in self.subscribers:
            sub(rec)
        return rec

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path: str | Path) -> Iterator[dict]:
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_trace(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
