import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvlog.pmem import (
    DROP_ALL_UNFENCED,
    EADR,
    ENUMERATE_SUBSETS,
    LINE_SIZE,
    PAGE_SIZE,
    RANDOM_SUBSET,
    PmemError,
    PmemImage,
    PmemRangeError,
)

P5 = 5 * PAGE_SIZE


def test_unflushed_store_is_lost():
    pm = PmemImage(8)
    pm.store(P5, b"\x11" * 64)
    assert pm.load(P5, 64) == b"\x11" * 64
    assert pm.crash().load(P5, 64) == bytes(64)


def test_flush_and_fence_persists():
    pm = PmemImage(8)
    pm.store(P5, b"\x22" * 64)
    pm.clwb(P5, 64)
    pm.sfence()
    assert pm.crash().load(P5, 64) == b"\x22" * 64


def test_eadr_store_is_durable_without_flush():
    pm = PmemImage(8, mode=EADR)
    pm.store(P5, b"abc")
    assert pm.crash().load(P5, 3) == b"abc"


def test_clwb_on_untouched_line_is_noop():
    pm = PmemImage(8)
    pm.clwb(P5, 64)
    assert pm.flush_marked == frozenset()


def test_flushed_unfenced_line_has_both_outcomes():
    pm = PmemImage(8)
    pm.store(P5, b"x")
    pm.clwb(P5, 1)
    outcomes = {img.load(P5, 1) for img in pm.crash(ENUMERATE_SUBSETS)}
    assert outcomes == {b"x", b"\0"}


def test_fence_only_covers_flushed_lines():
    pm = PmemImage(8)
    pm.store(P5, b"a")
    pm.store(P5 + 128, b"b")
    pm.clwb(P5, 1)
    pm.sfence()
    img = pm.crash(DROP_ALL_UNFENCED)
    assert img.load(P5, 1) == b"a"
    assert img.load(P5 + 128, 1) == b"\0"


def test_empty_fence_is_noop():
    pm = PmemImage(8)
    v = pm.durable_version
    pm.sfence()
    assert pm.durable_version == v


def test_no_pending_means_image_equals_durable():
    pm = PmemImage(4)
    pm.store(0, b"q" * 10)
    pm.persist(0, 10)
    assert bytes(pm.crash().durable) == bytes(pm.durable)


def test_enumeration_counts_all_subsets():
    pm = PmemImage(8)
    for i in range(4):
        pm.store(P5 + i * LINE_SIZE, b"z")
    assert len(list(pm.crash(ENUMERATE_SUBSETS, cap=16))) == 16


def test_enumeration_cap_falls_back_to_random():
    pm = PmemImage(8)
    for i in range(5):
        pm.store(P5 + i * LINE_SIZE, b"z")
    assert len(list(pm.subsets(cap=8, seed=1))) == 8


def test_random_subset_is_seeded():
    pm = PmemImage(8)
    for i in range(10):
        pm.store(P5 + i * LINE_SIZE, bytes([i + 1]))
    a = pm.crash(RANDOM_SUBSET, seed=3)
    b = pm.crash(RANDOM_SUBSET, seed=3)
    assert bytes(a.durable) == bytes(b.durable)


def test_out_of_range_and_straddling_atomic_store():
    pm = PmemImage(2)
    with pytest.raises(PmemRangeError):
        pm.store(2 * PAGE_SIZE - 2, b"abc")
    with pytest.raises(PmemError):
        pm.store(4, b"12345678", atomic=True)


def test_overlay_shares_durable_and_refuses_fence():
    pm = PmemImage(4)
    pm.store(100, b"new")
    view = pm.overlay([64])
    assert view.load(100, 3) == b"new"
    view.store_u64(128, 7)
    assert pm.load_u64(128) == 0
    with pytest.raises(PmemError):
        view.sfence()


def test_file_backed_image_roundtrip(tmp_path):
    path = tmp_path / "nvm.img"
    pm = PmemImage.create(path, 4)
    pm.store(PAGE_SIZE, b"hello")
    pm.persist(PAGE_SIZE, 5)
    pm.close()
    assert path.read_bytes()[PAGE_SIZE:PAGE_SIZE + 5] == b"hello"
    again = PmemImage.open(path)
    assert again.load(PAGE_SIZE, 5) == b"hello"
    again.close()
    with pytest.raises(FileExistsError):
        PmemImage.create(path, 4)


ops = st.lists(
    st.tuples(st.sampled_from(["store", "clwb", "sfence"]),
              st.integers(0, 15), st.integers(1, 255)),
    min_size=1, max_size=40)


@settings(max_examples=300, deadline=None)
@given(ops, st.integers(0, 2**32))
def test_crash_images_respect_fences_and_never_tear_words(seq, seed):
    """Every crash image holds, per 8-byte word, a value that was stored there,
    and nothing older than what the last fence covering it made durable."""
    pm = PmemImage(2)
    history = {w: [0] for w in range(64)}   # word -> values in program order
    floor = {w: 0 for w in range(64)}       # index of oldest admissible value
    flushed_upto = {}
    for op, word, val in seq:
        addr = word * 8
        if op == "store":
            pm.store_u64(addr, val)
            history[word].append(val)
            # a store after clwb needs a fresh flush
            line = addr // LINE_SIZE
            for w in range(line * 8, line * 8 + 8):
                flushed_upto.pop(w, None)
        elif op == "clwb":
            pm.clwb(addr, 8)
            line = addr // LINE_SIZE
            for w in range(line * 8, line * 8 + 8):
                flushed_upto[w] = len(history[w]) - 1
        else:
            pm.sfence()
            for w, idx in flushed_upto.items():
                floor[w] = max(floor[w], idx)
            flushed_upto.clear()
    rng = random.Random(seed)
    lines = [ln for ln in pm.pending_lines() if rng.random() < 0.5]
    img = pm.image_with(lines)
    for w in range(16):
        got = img.load_u64(w * 8)
        assert got in history[w][floor[w]:], (w, got, history[w], floor[w])
