import pytest

from nvlog.config import Config
from nvlog.crashtest import expiry_scenario, run_campaign
from nvlog.disk import DiskBackend
from nvlog.engine import Engine
from nvlog.layout import CorruptLog
from nvlog.log_store import format_image
from nvlog.pmem import PAGE_SIZE, PmemImage
from nvlog.recovery import recover


def test_writeback_record_scenario():
    got, oracle, disk = expiry_scenario()
    assert got == b"a31xyz"
    assert oracle.verify(disk.snapshot()) == []


def test_without_expiry_old_entries_resurface():
    got, oracle, disk = expiry_scenario(expire=False)
    assert got != b"a31xyz"
    assert got[:1] == b"a" and got[3:] == b"xyz"
    assert oracle.verify(disk.snapshot())


def test_empty_log_is_a_noop():
    pm = PmemImage(16)
    format_image(pm)
    d = DiskBackend()
    rep = recover(pm.crash(), d)
    assert rep.inodes == 0 and rep.replayed_entries == 0 and d.snapshot() == {}


def test_replays_osync_and_fsync_writes():
    eng = Engine.format(Config(nvm_size_pages=64))
    eng.open(1, o_sync=True)
    eng.write(1, 10, b"hello")
    eng.open(2)
    eng.write(2, PAGE_SIZE + 1, b"world")
    eng.fsync(2)
    d = DiskBackend()
    rep = recover(eng.pmem.crash(), d)
    assert d.read_page(1, 0)[10:15] == b"hello"
    assert d.read_page(2, 1)[1:6] == b"world"
    assert rep.sizes == {1: 15, 2: PAGE_SIZE + 6}


def test_mid_transaction_crash_recovers_nothing_of_it():
    eng = Engine.format(Config(nvm_size_pages=64))
    eng.open(1, o_sync=True)
    eng.write(1, 0, b"a")
    images = []
    eng.pmem.fence_hooks.append(lambda p: images.append(p.crash()))
    eng.write(1, 100, b"b" * (3 * PAGE_SIZE))
    for img in images[:-1]:
        d = DiskBackend()
        rep = recover(img, d)
        assert d.read_page(1, 0)[:1] == b"a"
        assert d.read_page(1, 0)[100:101] == b"\0"
        assert d.size(1) == 1


def test_recovery_is_idempotent():
    eng = Engine.format(Config(nvm_size_pages=64))
    eng.open(1, o_sync=True)
    for i in range(10):
        eng.write(1, i * 1000, bytes([65 + i]) * 500)
    img = eng.pmem.crash()
    d1 = DiskBackend()
    recover(img, d1)
    once = d1.snapshot()
    recover(img, d1)
    assert d1.snapshot() == once


def test_corrupt_chain_raises():
    eng = Engine.format(Config(nvm_size_pages=64))
    eng.open(1, o_sync=True)
    eng.write(1, 0, b"x")
    img = eng.pmem.crash()
    head = eng.inode_log(1).head
    img.store(head * PAGE_SIZE, b"\xff" * 64)
    img.sfence()
    with pytest.raises(CorruptLog):
        recover(img, DiskBackend())


def test_mount_resumes_after_crash():
    cfg = Config(nvm_size_pages=64)
    eng = Engine.format(cfg)
    eng.open(1, o_sync=True)
    eng.write(1, 0, b"first")
    disk = DiskBackend()
    eng2, rep = Engine.mount(cfg, eng.pmem.crash(), disk)
    assert rep.replayed_pages == {1: [0]}
    eng2.open(1, o_sync=True)
    eng2.write(1, 5, b"second")
    recover(eng2.pmem.crash(), disk)
    assert disk.read_page(1, 0)[:11] == b"firstsecond"


@pytest.mark.parametrize("mutation", [{"fault_drop_commit_fence": True},
                                      {"fault_skip_wb_record": 0}])
def test_checker_detects_mutations(mutation):
    report = run_campaign(60, config=Config(**mutation))
    assert report.failed_seeds
