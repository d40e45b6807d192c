"""Command line interface: ``nvlog <subcommand> ...``.

Failures exit nonzero after printing one line ``nvlog-error {json}`` to
stderr.  Set ``NVLOG_LOG_LEVEL`` (e.g. ``DEBUG``) for diagnostic logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from .bench import WorkloadSpec, quiesce, rows_to_csv, run_bench, varmail_like
from .config import Config, load_config, parse_overrides
from .crashtest import expiry_scenario, run_campaign
from .disk import DiskBackend
from .engine import Engine
from .layout import page_of
from .log_store import read_header, read_super_log, walk_inode_log
from .pmem import PAGE_SIZE, PmemImage
from .recovery import recover

log = logging.getLogger("nvlog")

_SIZE = re.compile(r"^(\d+)([KMGT]?)(i?B)?$", re.IGNORECASE)


def parse_size(text: str) -> int:
    m = _SIZE.match(text.strip())
    if not m:
        raise ValueError(f"bad size {text!r} (try 64M or 10G)")
    n = int(m.group(1)) * 1024 ** " KMGT".index(m.group(2).upper() or " ")
    if n % PAGE_SIZE or n < 2 * PAGE_SIZE:
        raise ValueError(f"size {text} must be a multiple of {PAGE_SIZE} and at least two pages")
    return n


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    return parse_overrides(getattr(args, "set", None) or [], cfg)


def _open_engine(args, cfg: Config) -> tuple[Engine, PmemImage, DiskBackend, dict]:
    pmem = PmemImage.open(args.nvm, mode=cfg.pmem_mode)
    cfg = cfg.replace(nvm_size_pages=pmem.capacity_pages)
    disk = DiskBackend(args.disk)
    engine, report = Engine.mount(cfg, pmem, disk)
    return engine, pmem, disk, report.to_dict()


def cmd_init(args) -> int:
    size = parse_size(args.size)
    nvm = Path(args.nvm)
    if nvm.exists() and not args.force:
        raise FileExistsError(f"{nvm} exists; pass --force to overwrite")
    cfg = _config(args)
    pmem = PmemImage.create(nvm, size // PAGE_SIZE, mode=cfg.pmem_mode, force=args.force)
    Engine.format(cfg.replace(nvm_size_pages=pmem.capacity_pages), pmem=pmem,
                  disk=DiskBackend(args.disk))
    pmem.close()
    print(json.dumps({"nvm": str(nvm), "pages": size // PAGE_SIZE, "disk": args.disk}))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.baseline:
        cfg = cfg.replace(nvlog_enabled=False)
    pairs = WorkloadSpec.coerce(dict(kv.split("=", 1) for kv in args.workload or []))
    spec = varmail_like(**pairs) if args.preset == "varmail" else WorkloadSpec(**pairs)
    pmem = None
    if args.nvm:
        engine, pmem, _, _ = _open_engine(args, cfg)
        result = run_bench(spec, engine.config, engine=engine)
    else:
        result = run_bench(spec, cfg)
    summary = result.summary()
    if args.quiesce:
        summary["after_quiesce"] = quiesce(result.engine)
    csv_text = rows_to_csv(result.rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    print(json.dumps(summary), file=sys.stderr)
    if pmem is not None:
        result.engine.writeback_all()
        pmem.close()
    return 0


def cmd_crashtest(args) -> int:
    cfg = _config(args)
    if args.mutation == "skip-wb-record":
        cfg = cfg.replace(fault_skip_wb_record=0)
    elif args.mutation == "drop-commit-fence":
        cfg = cfg.replace(fault_drop_commit_fence=True)
    if args.scenario == "expiry":
        got, _, _ = expiry_scenario(expire=not args.no_expiry)
        ok = got == b"a31xyz"
        print(json.dumps({"scenario": "expiry", "recovered": got.decode(errors="replace"), "ok": ok}))
        return 0 if ok or args.no_expiry else 1
    report = run_campaign(args.trials, seed=args.seed, config=cfg, max_ops=args.max_ops)
    out = {"summary": report.summary(), "failed_seeds": report.failed_seeds[:20],
           "failures": report.stats.failures[:5]}
    print(json.dumps(out, indent=2))
    if args.mutation:
        # a mutation run succeeds when the checker catches the fault
        return 0 if report.stats.failures else 1
    return 0 if report.stats.ok else 1


def cmd_recover(args) -> int:
    pmem = PmemImage.open(args.nvm)
    report = recover(pmem, DiskBackend(args.disk))
    pmem.close()
    d = report.to_dict()
    if args.json:
        print(json.dumps(d))
    else:
        for k, v in d.items():
            print(f"{k:20s} {v}")
    return 0


def cmd_gc_stats(args) -> int:
    engine, pmem, _, rec = _open_engine(args, _config(args))
    before = engine.nvm_pages_in_use
    stats = engine.gc_pass()
    pmem.close()
    print(json.dumps({"nvm_pages_before": before, **stats.as_dict(),
                      "reclaimed_total": engine.gc.reclaimed_total,
                      "fallback_seconds": engine.metrics()["fallback_seconds"]}))
    return 0


def dump_log(pmem: PmemImage, out=None) -> None:
    out = out or sys.stdout
    supers, pages = read_super_log(pmem)
    root = pmem.load(32, 12)
    cap = int.from_bytes(root[:8], "little")
    print(f"super log pages {pages} capacity={cap} entries={len(supers)}", file=out)
    for se in supers:
        print(f"inode dev={se.s_dev} ino={se.i_ino} head={se.head_log_page} "
              f"tail={se.committed_log_tail:#x}", file=out)
        if not se.committed_log_tail:
            continue
        current = None
        for e in walk_inode_log(pmem, se.head_log_page, se.committed_log_tail, se.i_ino):
            pg = page_of(e.addr)
            if pg != current:
                hdr = read_header(pmem, pg)
                print(f"  page {pg} next={hdr.next_page} sealed_slots={hdr.slot_count or '-'}", file=out)
                current = pg
            slot = (e.addr % PAGE_SIZE) // 64
            print(f"    [{slot:2d}] {e.describe()}", file=out)


def cmd_dump_log(args) -> int:
    pmem = PmemImage.open(args.nvm)
    dump_log(pmem)
    pmem.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvlog", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, image=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        if image:
            sp.add_argument("--nvm", required=True, help="NVM image file")
            sp.add_argument("--disk", required=True, help="disk directory")

    sp = sub.add_parser("init", help="create an empty NVM image and disk directory")
    common(sp)
    sp.add_argument("--size", default="64M", help="image size, e.g. 64M or 10G")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_init)

    sp = sub.add_parser("bench", help="run a workload and emit CSV metrics")
    common(sp, image=False)
    sp.add_argument("--nvm", help="use this image (otherwise in-memory)")
    sp.add_argument("--disk", help="disk directory for --nvm")
    sp.add_argument("--workload", "-w", action="append", metavar="KEY=VALUE",
                    help="workload field, e.g. sync_pct=50 io_size=4096")
    sp.add_argument("--preset", choices=("varmail",))
    sp.add_argument("--baseline", action="store_true", help="sync straight to disk")
    sp.add_argument("--quiesce", action="store_true", help="drain write-back and GC afterwards")
    sp.add_argument("--csv", help="write CSV here instead of stdout")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("crashtest", help="crash-injection campaign against the reference model")
    common(sp, image=False)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-ops", type=int, default=40)
    sp.add_argument("--mutation", choices=("skip-wb-record", "drop-commit-fence"))
    sp.add_argument("--scenario", choices=("expiry",), help="run the canned expiry scenario")
    sp.add_argument("--no-expiry", action="store_true", help="disable write-back records")
    sp.set_defaults(fn=cmd_crashtest)

    sp = sub.add_parser("recover", help="replay the NVM log onto the disk")
    sp.add_argument("--nvm", required=True)
    sp.add_argument("--disk", required=True)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_recover)

    sp = sub.add_parser("gc-stats", help="mount, run one GC pass and report usage")
    common(sp)
    sp.set_defaults(fn=cmd_gc_stats)

    sp = sub.add_parser("dump-log", help="print the log chains of an image")
    sp.add_argument("--nvm", required=True)
    sp.set_defaults(fn=cmd_dump_log)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("NVLOG_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        log.debug("command failed", exc_info=True)
        print("nvlog-error " + json.dumps({"cmd": args.cmd, "type": type(exc).__name__,
                                           "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
