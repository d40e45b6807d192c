import pytest

from nvlog.config import Config
from nvlog.crashtest import generate_ops, run_ops, WorkloadShape
from nvlog.disk import DiskBackend
from nvlog.engine import Engine
from nvlog.oracle import OracleError, OracleFileModel
from nvlog.pmem import PAGE_SIZE
from nvlog.trace import Trace


def ev(name, **kw):
    return {"ev": name, **kw}


def write(ino, off, data):
    return ev("write", ino=ino, off=off, data=data.hex())


def page(data, lo=0):
    buf = bytearray(PAGE_SIZE)
    buf[lo:lo + len(data)] = data
    return bytes(buf)


def test_async_write_is_not_durable():
    m = OracleFileModel()
    m.apply_trace([ev("open", ino=1), write(1, 0, b"abc")])
    assert m.predict() == [{1: (0, {})}]


def test_osync_window_admits_old_and_new():
    m = OracleFileModel()
    m.apply_trace([ev("open", ino=1), write(1, 2, b"hi"),
                   ev("sync_begin", ino=1, kind="osync", off=2, len=2, tid=1, n=1)])
    assert m.admits({1: (0, {})})
    assert m.admits({1: (4, {0: page(b"hi", 2)})})
    m.apply_event(ev("sync_done", ino=1, kind="osync", tid=1))
    assert m.predict() == [{1: (4, {0: page(b"hi", 2)})}]


def test_sync_done_without_begin_is_rejected():
    m = OracleFileModel()
    m.apply_event(ev("open", ino=1))
    with pytest.raises(OracleError):
        m.apply_event(ev("sync_done", ino=1, kind="fsync", tid=1))


def test_out_of_order_writeback_events_rejected():
    m = OracleFileModel()
    m.apply_trace([ev("open", ino=1), write(1, 0, b"x"),
                   ev("writeback_begin", ino=1, page=0)])
    with pytest.raises(OracleError):
        m.apply_event(ev("writeback_done", ino=1, page=0))


def test_unknown_event_and_unopened_inode():
    m = OracleFileModel()
    with pytest.raises(OracleError):
        m.apply_event(ev("teleport"))
    with pytest.raises(OracleError):
        m.apply_event(write(9, 0, b"a"))


def test_verify_reports_differences():
    m = OracleFileModel()
    m.apply_trace([ev("open", ino=1)])
    assert m.verify({1: (0, {})}) == []
    assert m.verify({1: (5, {})})


def _trace_of(seed):
    trace = Trace()
    eng = Engine.format(Config(nvm_size_pages=128), trace=trace, disk=DiskBackend())
    shape = WorkloadShape(files=2, pages_per_file=4, ops=30)
    for ino in (1, 2):
        eng.open(ino)
    run_ops(eng, generate_ops(shape, seed))
    return trace.records, eng


def test_prediction_is_deterministic_and_matches_engine():
    records, eng = _trace_of(3)
    a, b = OracleFileModel(), OracleFileModel()
    a.apply_trace(records)
    b.apply_trace(records)
    assert a.predict() == b.predict()
    eng.writeback_all()
    c = OracleFileModel()
    c.apply_trace(eng.trace.records)
    assert c.verify(eng.disk.snapshot()) == []
