import pytest

from nvlog.layout import (
    FIRST_SLOT,
    SLOTS_PER_PAGE,
    CorruptLog,
    InodeLogEntry,
    ENTRY_WRITE,
    ip_slots,
    page_of,
    slot_addr,
    slot_of,
)
from nvlog.log_store import (
    DuplicateInode,
    LogStore,
    NvmFull,
    PagePool,
    Record,
    entry_payload,
    format_image,
    read_super_log,
    walk_inode_log,
)
from nvlog.pmem import PAGE_SIZE, PmemImage
from nvlog.recovery import recover
from nvlog.disk import DiskBackend


def fresh(pages=64, reserve=0):
    pm = PmemImage(pages)
    format_image(pm)
    pool = PagePool(pages, batch=16, reserve=reserve)
    return pm, pool, LogStore(pm, pool)


def test_first_inode_lands_in_slot_one():
    pm, _, store = fresh()
    ilog = store.create_inode_log(1, 7)
    assert ilog.entry_addr == slot_addr(0, 1)
    entries, pages = read_super_log(pm.crash())
    assert [(e.i_ino, e.head_log_page) for e in entries] == [(7, ilog.head)]


def test_64th_inode_chains_a_new_super_page():
    pm, _, store = fresh(pages=256)
    logs = [store.create_inode_log(1, i) for i in range(64)]
    assert page_of(logs[62].entry_addr) == 0
    assert page_of(logs[63].entry_addr) != 0
    assert slot_of(logs[63].entry_addr) == FIRST_SLOT
    entries, pages = read_super_log(pm.crash())
    assert len(entries) == 64 and len(pages) == 2


def test_duplicate_inode_rejected():
    _, _, store = fresh()
    store.create_inode_log(1, 1)
    with pytest.raises(DuplicateInode):
        store.create_inode_log(1, 1)


@pytest.mark.parametrize("n, slots", [(20, 1), (32, 1), (33, 2), (110, 3), (4000, 63)])
def test_ip_slot_formula(n, slots):
    assert ip_slots(n) == slots


def test_ip_append_consumes_slots():
    _, _, store = fresh()
    ilog = store.create_inode_log(1, 1)
    store.append_transaction(ilog, [Record("ip", 0, b"a" * 20)], 1)
    assert ilog.append_slot == FIRST_SLOT + 1
    store.append_transaction(ilog, [Record("ip", 100, b"b" * 110)], 2)
    assert ilog.append_slot == FIRST_SLOT + 4


def test_oop_fills_data_page_before_entry():
    pm, _, store = fresh()
    ilog = store.create_inode_log(1, 1)
    seen = []

    def hook(p):
        # at the first fence of the transaction, the data page is already flushed
        seen.append(p.flush_marked)

    pm.fence_hooks.append(hook)
    [e] = store.append_transaction(ilog, [Record("oop", 0, b"d" * PAGE_SIZE)], 1)
    assert e.page_index not in (0, ilog.head)
    assert any(line // PAGE_SIZE == e.page_index for line in seen[0])
    assert entry_payload(pm, e) == b"d" * PAGE_SIZE


def test_uncommitted_entries_invisible_after_crash():
    pm, _, store = fresh()
    ilog = store.create_inode_log(1, 1)
    store.append_transaction(ilog, [Record("ip", 0, b"one")], 1)
    store.append_entry(ilog, InodeLogEntry(ENTRY_WRITE, 3, 0, 10, 0, 2), b"two")
    img = pm.crash()
    supers, _ = read_super_log(img)
    got = list(walk_inode_log(img, supers[0].head_log_page, supers[0].committed_log_tail))
    assert [e.tid for e in got] == [1]


def test_commit_makes_all_segments_visible_and_tails_increase():
    pm, _, store = fresh()
    ilog = store.create_inode_log(1, 1)
    tails = []
    for tid in range(1, 5):
        store.append_transaction(ilog, [Record("ip", 0, b"x" * 50), Record("oop", PAGE_SIZE, bytes(PAGE_SIZE))], tid)
        tails.append(ilog.durable_tail)
    assert tails == sorted(tails) and len(set(tails)) == 4
    img = pm.crash()
    se = read_super_log(img)[0][0]
    assert [e.tid for e in walk_inode_log(img, se.head_log_page, se.committed_log_tail)] == \
        [1, 1, 2, 2, 3, 3, 4, 4]


def test_log_spills_to_next_page_without_straddling():
    pm, _, store = fresh()
    ilog = store.create_inode_log(1, 1)
    for tid in range(1, 40):
        store.append_transaction(ilog, [Record("ip", 0, b"y" * 100)], tid)
    img = pm.crash()
    se = read_super_log(img)[0][0]
    entries = list(walk_inode_log(img, se.head_log_page, se.committed_log_tail))
    assert len(entries) == 39
    for e in entries:
        assert slot_of(e.addr) + e.slots <= SLOTS_PER_PAGE
    assert len({page_of(e.addr) for e in entries}) == 2


def test_two_ip_entries_for_large_unaligned_segment_roundtrip():
    pm, _, store = fresh()
    ilog = store.create_inode_log(1, 1)
    data = bytes(range(256)) * 16
    store.append_transaction(ilog, [Record("ip", 1, data[:4000]), Record("ip", 4001, data[4000:4095])], 1)
    d = DiskBackend()
    recover(pm.crash(), d)
    assert d.read_page(1, 0)[1:] == data[:4095]


def test_pool_refills_in_batches():
    pool = PagePool(100, batch=16)
    first = pool.alloc()
    assert pool.refills == 1
    for _ in range(15):
        pool.alloc()
    assert pool.refills == 1
    pool.alloc()
    assert pool.refills == 2
    assert first != 0


def test_pool_free_then_alloc_and_exhaustion():
    pool = PagePool(4, batch=1)
    pages = pool.alloc_many(3)
    with pytest.raises(NvmFull):
        pool.alloc()
    pool.free(pages[1])
    assert pool.alloc() == pages[1]
    with pytest.raises(ValueError):
        pool.free(0)


def test_pool_double_free_and_reserve():
    pool = PagePool(6, batch=2, reserve=2)
    got = pool.alloc_many(3)
    with pytest.raises(NvmFull):
        pool.alloc()
    assert pool.alloc(reserved=True)
    pool.free(got[0])
    with pytest.raises(ValueError):
        pool.free(got[0])


def test_walk_detects_corrupt_chain():
    pm, _, store = fresh()
    ilog = store.create_inode_log(1, 1)
    store.append_transaction(ilog, [Record("ip", 0, b"z")], 1)
    with pytest.raises(CorruptLog):
        list(walk_inode_log(pm, 999, ilog.durable_tail))
    with pytest.raises(CorruptLog):
        list(walk_inode_log(pm, 0, ilog.durable_tail))


def test_load_resumes_append_position():
    pm, pool, store = fresh()
    ilog = store.create_inode_log(1, 1)
    store.append_transaction(ilog, [Record("ip", 0, b"q" * 100)], 1)
    again = LogStore.load(pm, PagePool(pm.capacity_pages, live=pool.live_pages()))
    other = again.get(1, 1)
    assert (other.append_page, other.append_slot) == (ilog.append_page, ilog.append_slot)
    again.create_inode_log(1, 2)
    assert again.get(1, 2).entry_addr == slot_addr(0, 2)
