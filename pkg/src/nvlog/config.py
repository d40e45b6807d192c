from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class Config:
    # NVM device
    nvm_size_pages: int = 4096
    pmem_mode: str = "adr"
    nvm_store_latency_ns: float = 300.0
    s_dev: int = 1

    # sync path
    nvlog_enabled: bool = True
    active_sync: bool = True
    sensitivity: int = 2
    actsync_scope: str = "file"

    # page pool
    pool_batch: int = 16
    reserve_pages: int = 4

    # write-back and GC
    writeback_interval_ms: float = 500.0
    writeback_batch: int = 64
    gc_interval_ms: float = 10000.0
    cache_capacity_pages: int | None = None

    # simulated latencies
    disk_latency_us: float = 20.0
    disk_sync_latency_us: float = 80.0
    syscall_latency_ns: float = 1000.0
    dram_ns_per_byte: float = 0.05

    # test hooks
    expire_on_writeback: bool = True
    fault_skip_wb_record: int | None = None
    fault_drop_commit_fence: bool = False

    def __post_init__(self):
        if self.pmem_mode not in ("adr", "eadr"):
            raise ValueError(f"pmem_mode must be adr or eadr, got {self.pmem_mode!r}")
        if self.actsync_scope not in ("file", "global"):
            raise ValueError(f"actsync_scope must be file or global, got {self.actsync_scope!r}")
        if self.sensitivity < 1:
            raise ValueError("sensitivity must be >= 1")
        if self.nvm_size_pages < 2:
            raise ValueError("nvm_size_pages must be >= 2")

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)


def _coerce(raw: str, current):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    try:
        return int(raw)
    except ValueError:
        return raw


def parse_overrides(pairs: list[str], base: Config | None = None) -> Config:
    """Apply ``key=value`` strings on top of ``base``."""
    base = base or Config()
    known = {f.name for f in fields(Config)}
    changes = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"config override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        changes[key] = _coerce(raw, getattr(base, key))
    return base.replace(**changes)


def load_config(path: str | Path, base: Config | None = None) -> Config:
    lines = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_overrides(lines, base)
