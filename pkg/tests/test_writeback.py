from nvlog.pmem import PAGE_SIZE


def test_record_only_for_pages_with_valid_entries(make_engine):
    eng = make_engine(active_sync=False)
    eng.open(1)
    eng.write(1, 0, b"a" * 10)
    eng.writeback_all()
    assert eng.writeback.stats["records"] == 0
    eng.write(1, 0, b"b" * 10)
    eng.fsync(1)
    eng.write(1, 0, b"c")
    eng.writeback_all()
    assert eng.writeback.stats["records"] == 1
    assert not eng.has_valid_entries(1, 0)


def test_record_follows_disk_durability_in_trace(make_engine):
    eng = make_engine(active_sync=False)
    eng.open(1, o_sync=True)
    eng.write(1, 5, b"x")
    eng.writeback_all()
    evs = [r["ev"] for r in eng.trace.records if r["ev"].startswith(("writeback", "disk"))]
    assert evs == ["writeback_begin", "disk_durable", "writeback_done"]


def test_tick_writes_oldest_pages_in_batches(make_engine):
    eng = make_engine()
    eng.open(1)
    for p in range(3):
        eng.write(1, p * PAGE_SIZE, b"z")
    assert eng.writeback_tick(2) == 2
    assert eng.cache.oldest_dirty(5) == [(1, 2)]
    assert eng.writeback_tick(2) == 1
    assert eng.cache.dirty_count == 0


def test_disk_error_keeps_page_dirty_until_retry(make_engine):
    eng = make_engine()
    eng.open(1)
    eng.write(1, 0, b"e" * 100)
    eng.disk.fail_writes = 1
    assert eng.writeback_tick() == 0
    assert eng.writeback.stats["disk_errors"] == 1
    assert eng.cache.dirty_count == 1
    assert eng.writeback_tick() == 1
    assert eng.disk.read_page(1, 0)[:100] == b"e" * 100


def test_eventual_durability_matches_cache(make_engine):
    eng = make_engine()
    eng.open(1)
    eng.open(2, o_sync=True)
    for i in range(30):
        eng.write(1 + i % 2, i * 777, bytes([i + 1]) * 300)
    eng.fsync(1)
    eng.writeback_all()
    for ino in (1, 2):
        size = eng.cache.file(ino).size
        assert eng.disk.size(ino) == size
        for p in range(-(-size // PAGE_SIZE)):
            assert eng.disk.read_page(ino, p) == bytes(eng.cache.file(ino).pages[p].data)


def test_skip_record_fault_hook(make_engine):
    eng = make_engine(fault_skip_wb_record=0, active_sync=False)
    eng.open(1, o_sync=True)
    eng.write(1, 0, b"q")
    eng.writeback_all()
    assert eng.writeback.stats["records_skipped"] == 1
    assert eng.writeback.stats["records"] == 0
