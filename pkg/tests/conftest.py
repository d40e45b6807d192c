import pytest

from nvlog.config import Config
from nvlog.disk import DiskBackend
from nvlog.engine import Engine
from nvlog.oracle import OracleFileModel
from nvlog.pmem import PmemImage
from nvlog.trace import Trace

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def make_engine():
    """Engine on an in-memory device with a trace feeding a reference model."""

    def build(**overrides):
        cfg = Config(**{"nvm_size_pages": 256, **overrides})
        trace = Trace()
        oracle = OracleFileModel()
        trace.subscribers.append(oracle.apply_event)
        pmem = PmemImage(cfg.nvm_size_pages, mode=cfg.pmem_mode)
        eng = Engine.format(cfg, pmem=pmem, disk=DiskBackend(), trace=trace)
        eng.oracle = oracle
        return eng

    return build
