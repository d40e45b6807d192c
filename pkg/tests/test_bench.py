import csv
import io

import pytest

from nvlog.bench import CSV_COLUMNS, WorkloadSpec, quiesce, rows_to_csv, run_bench, varmail_like
from nvlog.config import Config

SMALL = dict(total_bytes=256 << 10, file_size=256 << 10)


def test_async_workload_logs_nothing():
    r = run_bench(WorkloadSpec(sync_pct=0, **SMALL), Config(nvm_size_pages=256))
    assert r.engine.log.stats["entries"] == 0 and r.syncs == 0


def test_aligned_osync_workload_is_all_oop():
    r = run_bench(WorkloadSpec(sync_mode="osync", **SMALL), Config(nvm_size_pages=512))
    stats = r.engine.log.stats
    assert stats["ip_payload_bytes"] == 0 and stats["oop_payload_bytes"] == SMALL["total_bytes"]


def test_seeded_runs_are_reproducible():
    spec = WorkloadSpec(access="random", sync_pct=50, threads=2, rw_ratio=1, **SMALL)
    a = run_bench(spec, Config(nvm_size_pages=512))
    b = run_bench(spec, Config(nvm_size_pages=512))
    assert a.summary() == b.summary() and rows_to_csv(a.rows) == rows_to_csv(b.rows)


def test_csv_columns_and_quiesce():
    r = run_bench(varmail_like(total_bytes=128 << 10), Config(nvm_size_pages=512))
    rows = list(csv.DictReader(io.StringIO(rows_to_csv(r.rows))))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) >= 1
    timestamps = [float(x["timestamp"]) for x in rows]
    assert timestamps == sorted(timestamps)
    after = quiesce(r.engine)
    assert r.engine.cache.dirty_count == 0 and after["nvm_pages_in_use"] <= 4


@pytest.mark.parametrize("bad", [dict(sync_pct=101), dict(io_size=0), dict(access="zig"),
                                 dict(sync_mode="never"), dict(threads=0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        WorkloadSpec(**bad)


def test_coerce_types_and_rejects_unknown_keys():
    assert WorkloadSpec.coerce({"io_size": "512", "sync_pct": "20"}) == {"io_size": 512, "sync_pct": 20.0}
    with pytest.raises(ValueError):
        WorkloadSpec.coerce({"speed": "fast"})
