from nvlog.disk import DiskBackend
from nvlog.pmem import PAGE_SIZE
from nvlog.recovery import recover


def test_superseded_oop_page_is_freed(make_engine):
    eng = make_engine(active_sync=False)
    eng.open(1, o_sync=True)
    eng.write(1, 0, b"1" * PAGE_SIZE)
    eng.write(1, 0, b"2" * PAGE_SIZE)
    stats = eng.gc_pass()
    assert stats.data_pages_freed == 1
    assert eng.gc_pass().data_pages_freed == 0
    d = DiskBackend()
    recover(eng.pmem.crash(), d)
    assert d.read_page(1, 0) == b"2" * PAGE_SIZE


def test_written_back_log_shrinks_to_tail_page(make_engine):
    eng = make_engine(active_sync=False)
    eng.open(1, o_sync=True)
    for i in range(200):
        eng.write(1, (i % 8) * PAGE_SIZE + 7, b"w" * 120)
    before = eng.nvm_pages_in_use
    eng.writeback_all()
    stats = eng.gc_pass()
    assert stats.log_pages_freed > 0
    assert eng.nvm_pages_in_use < before
    assert eng.inode_log(1).head == eng.inode_log(1).append_page
    d = eng.disk.fork()
    recover(eng.pmem.crash(), d)
    assert d.snapshot() == eng.disk.snapshot()


def test_latest_log_page_is_never_reclaimed(make_engine):
    eng = make_engine()
    eng.open(1, o_sync=True)
    eng.write(1, 0, b"a")
    eng.writeback_all()
    tail_page = eng.inode_log(1).append_page
    eng.gc_pass()
    assert eng.inode_log(1).append_page == tail_page
    assert eng.inode_log(1).head == tail_page


def test_usage_does_not_grow_without_writes(make_engine):
    eng = make_engine()
    eng.open(1, o_sync=True)
    for i in range(50):
        eng.write(1, i * 500, b"u" * 500)
    eng.writeback_all()
    usage = []
    for _ in range(4):
        eng.gc_pass()
        usage.append(eng.nvm_pages_in_use)
    assert usage == sorted(usage, reverse=True) and len(set(usage[1:])) == 1


def test_fallback_engages_and_clears(make_engine):
    eng = make_engine(nvm_size_pages=12, active_sync=False)
    eng.open(1)
    for i in range(20):
        eng.write(1, i * PAGE_SIZE, b"f" * PAGE_SIZE)
        eng.fsync(1)
    assert eng.fallback_events >= 1 and eng.fallback_active
    assert eng.disk.size(1) == 20 * PAGE_SIZE
    eng.writeback_all()
    eng.gc_pass()
    assert not eng.fallback_active
    eng.write(1, 0, b"g")
    eng.fsync(1)
    assert eng.syncer.stats["fallback_syncs"] > 0
    d = eng.disk.fork()
    recover(eng.pmem.crash(), d)
    assert d.read_page(1, 0)[:1] == b"g"
    assert eng.oracle.verify(d.snapshot()) == []


def test_gc_does_not_take_file_locks(make_engine):
    eng = make_engine()
    fs = eng.open(1, o_sync=True)
    eng.write(1, 0, b"x" * PAGE_SIZE)
    eng.write(1, 0, b"y" * PAGE_SIZE)
    with fs.lock:
        # a held foreground lock must not block reclamation
        assert eng.gc_pass().data_pages_freed == 1
