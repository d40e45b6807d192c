"""Crash-injection campaigns checked against the trace-driven reference model.

At every store fence the checker builds post-crash images (nothing pending
persisted, plus random subsets of the pending cachelines), recovers a copy
of the disk from each and asks the model whether the result is admissible.
It also checks that no image exposes part of an in-flight transaction.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .config import Config
from .disk import DiskBackend
from .engine import Engine
from .layout import CorruptLog
from .oracle import OracleError, OracleFileModel
from .pmem import PAGE_SIZE, PmemImage
from .recovery import recover
from .trace import Trace

SYNC_PCTS = (0, 20, 40, 60, 80, 100)


@dataclass
class WorkloadShape:
    files: int = 2
    pages_per_file: int = 8
    ops: int = 24
    sync_pct: int = 50
    nvm_pages: int = 128
    gc_every: int = 0
    tick_pct: int = 15

    def __post_init__(self):
        if not 1 <= self.files <= 8:
            raise ValueError("files must be in 1..8")
        if not 1 <= self.pages_per_file <= 64:
            raise ValueError("pages_per_file must be in 1..64")
        if not 0 <= self.sync_pct <= 100:
            raise ValueError("sync_pct must be in 0..100")


def generate_ops(shape: WorkloadShape, seed: int) -> list[tuple]:
    """A reproducible op list; each op is a tuple starting with its verb."""
    rng = random.Random(seed)
    span = shape.pages_per_file * PAGE_SIZE
    ops: list[tuple] = []
    for _ in range(shape.ops):
        ino = rng.randrange(1, shape.files + 1)
        roll = rng.randrange(100)
        if roll < shape.tick_pct:
            ops.append(("tick", rng.randint(1, 4)))
            continue
        if shape.gc_every and rng.randrange(shape.gc_every) == 0:
            ops.append(("gc",))
            continue
        style = rng.randrange(4)
        if style == 0:
            length = rng.randint(1, 200)
        elif style == 1:
            length = PAGE_SIZE * rng.randint(1, 2)
        elif style == 2:
            length = rng.randint(4001, 4095)
        else:
            length = rng.randint(200, 3 * PAGE_SIZE)
        length = min(length, span)
        if style == 1 and rng.random() < 0.7:
            off = PAGE_SIZE * rng.randrange(0, shape.pages_per_file - length // PAGE_SIZE + 1)
        else:
            off = rng.randrange(0, span - length + 1)
        data = bytes(rng.getrandbits(8) for _ in range(min(length, 16))) * (length // 16 + 1)
        data = data[:length]
        if rng.randrange(100) < shape.sync_pct:
            mode = rng.choice(("osync", "fsync", "fdatasync"))
        else:
            mode = "async"
        ops.append(("write", ino, off, data, mode))
    return ops


@dataclass
class CrashStats:
    crash_points: int = 0
    images: int = 0
    atomicity_checks: int = 0
    gc_crash_points: int = 0
    multi_segment_txns: int = 0
    fallbacks: int = 0
    fallback_recoveries: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def merge(self, other: CrashStats) -> None:
        self.crash_points += other.crash_points
        self.images += other.images
        self.atomicity_checks += other.atomicity_checks
        self.gc_crash_points += other.gc_crash_points
        self.multi_segment_txns += other.multi_segment_txns
        self.fallbacks += other.fallbacks
        self.fallback_recoveries += other.fallback_recoveries
        self.failures.extend(other.failures)


class CrashChecker:
    """Fence hook that verifies every crash image it can build at that point."""

    def __init__(self, disk: DiskBackend, oracle: OracleFileModel, subsets: int = 16,
                 seed: int = 0, max_failures: int = 5):
        self.disk = disk
        self.oracle = oracle
        self.subsets = subsets
        self.rng = random.Random(seed)
        self.max_failures = max_failures
        self.stats = CrashStats()
        self._seen: set = set()
        self._inflight: tuple[int, int, int] | None = None
        self.label = ""

    def __call__(self, pmem: PmemImage) -> None:
        self.check(pmem)

    def check(self, pmem: PmemImage) -> None:
        if len(self.stats.failures) >= self.max_failures:
            return
        self.stats.crash_points += 1
        pending = pmem.pending_lines()
        choices = {()}
        for _ in range(self.subsets if pending else 0):
            choices.add(tuple(line for line in pending if self.rng.random() < 0.5))
        base_key = (pmem.durable_version, self.disk.version, self.oracle.version)
        for lines in sorted(choices):
            key = (base_key, lines, tuple(bytes(pmem._pending[x]) for x in lines))
            if key in self._seen:
                continue
            self._seen.add(key)
            self._check_image(pmem.overlay(lines), lines)

    def _check_image(self, image: PmemImage, lines: tuple) -> None:
        self.stats.images += 1
        disk = self.disk.fork()
        where = f"{self.label} fence={self.oracle.version} lines={len(lines)}"
        try:
            report = recover(image, disk)
        except CorruptLog as exc:
            self.stats.failures.append(f"{where}: recovery failed: {exc}")
            return
        problems = self.oracle.verify(disk.snapshot())
        if problems:
            self.stats.failures.append(f"{where}: " + " | ".join(problems))
            return
        pending = self.oracle._sync
        if pending is not None and not pending.fallback and self._inflight is not None:
            ino, tid, n = self._inflight
            if n > 1:
                self.stats.atomicity_checks += 1
                got = report.committed_writes.get(ino, {}).get(tid, 0)
                if got not in (0, n):
                    self.stats.failures.append(
                        f"{where}: transaction {tid} exposes {got} of {n} segments")

    def on_trace(self, rec: dict) -> None:
        if rec["ev"] == "sync_begin":
            self._inflight = (rec["ino"], rec["tid"], rec["n"])
            if rec["n"] > 1:
                self.stats.multi_segment_txns += 1
        elif rec["ev"] == "sync_done":
            self._inflight = None


def run_ops(engine: Engine, ops: list[tuple], after_gc=None) -> None:
    for op in ops:
        verb = op[0]
        if verb == "tick":
            engine.writeback_tick(op[1])
        elif verb == "gc":
            engine.gc_pass()
            if after_gc is not None:
                after_gc()
        elif verb == "write":
            _, ino, off, data, mode = op
            if mode == "osync":
                engine.set_flags(ino, True)
                engine.write(ino, off, data)
                engine.set_flags(ino, False)
            else:
                engine.write(ino, off, data)
                if mode == "fsync":
                    engine.fsync(ino)
                elif mode == "fdatasync":
                    engine.fdatasync(ino)
        else:
            raise ValueError(f"unknown op {verb!r}")


def run_trial(seed: int, shape: WorkloadShape | None = None, config: Config | None = None,
              subsets: int = 16) -> CrashStats:
    """One randomized workload with a crash check at every fence."""
    shape = shape or WorkloadShape()
    config = (config or Config()).replace(nvm_size_pages=shape.nvm_pages)
    trace = Trace(keep=False)
    oracle = OracleFileModel()
    disk = DiskBackend()
    pmem = PmemImage(config.nvm_size_pages, mode=config.pmem_mode)
    checker = CrashChecker(disk, oracle, subsets=subsets, seed=seed)
    checker.label = f"seed={seed}"
    trace.subscribers.append(oracle.apply_event)
    trace.subscribers.append(checker.on_trace)
    trace.fence_source = lambda: pmem.fence_count
    engine = Engine.format(config, pmem=pmem, disk=disk, trace=trace)
    pmem.fence_hooks.append(checker)
    try:
        for ino in range(1, shape.files + 1):
            engine.open(ino)
        def after_gc():
            checker.stats.gc_crash_points += 1
            checker.check(pmem)

        run_ops(engine, generate_ops(shape, seed), after_gc=after_gc)
        checker.check(pmem)
    except OracleError as exc:
        checker.stats.failures.append(f"seed={seed}: semantic violation: {exc}")
    checker.stats.fallbacks = engine.fallback_events
    checker.stats.fallback_recoveries = engine.fallback_events - int(engine.fallback_active)
    return checker.stats


def shape_for(seed: int, max_ops: int = 40) -> WorkloadShape:
    """Vary file count, size, sync mix and NVM capacity across trials."""
    rng = random.Random(seed * 7919 + 1)
    small_nvm = rng.random() < 0.2
    return WorkloadShape(
        files=rng.randint(1, 4),
        pages_per_file=rng.choice((2, 4, 8, 16, 64)),
        ops=rng.randint(8, max_ops),
        sync_pct=SYNC_PCTS[seed % len(SYNC_PCTS)],
        nvm_pages=rng.randint(10, 20) if small_nvm else 256,
        gc_every=rng.choice((0, 6, 12)),
    )


@dataclass
class CampaignReport:
    trials: int
    stats: CrashStats
    elapsed_s: float
    failed_seeds: list[int]

    def summary(self) -> str:
        s = self.stats
        return (f"trials={self.trials} crash_points={s.crash_points} images={s.images} "
                f"atomicity_checks={s.atomicity_checks} failures={len(s.failures)} "
                f"elapsed_s={self.elapsed_s:.1f}")


def run_campaign(trials: int, seed: int = 0, config: Config | None = None,
                 max_ops: int = 40, subsets: int = 16) -> CampaignReport:
    t0 = time.perf_counter()
    total = CrashStats()
    failed = []
    for i in range(trials):
        s = seed + i
        st = run_trial(s, shape_for(s, max_ops), config, subsets)
        if not st.ok:
            failed.append(s)
        total.merge(st)
    return CampaignReport(trials, total, time.perf_counter() - t0, failed)


# -- the write-back record scenario -------------------------------------------

SCENARIO_INO = 1


def expiry_scenario(expire: bool = True) -> tuple[bytes, OracleFileModel, DiskBackend]:
    """Sync write, async overwrite + write-back, then a small O_SYNC write and a crash.

    Returns the first six recovered bytes, the model and the recovered disk.
    """
    config = Config(nvm_size_pages=64, expire_on_writeback=expire, active_sync=False)
    disk = DiskBackend()
    disk.create(SCENARIO_INO)
    disk.write_page(SCENARIO_INO, 0, b"abc123".ljust(PAGE_SIZE, b"\0"))
    disk.set_meta(SCENARIO_INO, 6)
    trace = Trace()
    oracle = OracleFileModel()
    oracle.preload(SCENARIO_INO, 6, {0: disk.read_page(SCENARIO_INO, 0)})
    trace.subscribers.append(oracle.apply_event)
    engine = Engine.format(config, disk=disk, trace=trace)
    engine.open(SCENARIO_INO)
    engine.write(SCENARIO_INO, 3, b"xyz")
    engine.fsync(SCENARIO_INO)
    engine.write(SCENARIO_INO, 1, b"21")
    engine.writeback_all()
    engine.set_flags(SCENARIO_INO, True)
    engine.write(SCENARIO_INO, 1, b"3")
    image = engine.pmem.crash()
    recovered = disk.fork()
    recover(image, recovered)
    return recovered.read_page(SCENARIO_INO, 0)[:6], oracle, recovered
