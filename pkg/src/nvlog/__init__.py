"""NVM write-ahead log that absorbs synchronous writes beside a volatile page cache."""

from .config import Config
from .engine import Engine
from .log_store import NvmFull
from .oracle import OracleFileModel
from .pmem import PmemImage
from .recovery import RecoveryReport, recover

__all__ = ["Config", "Engine", "NvmFull", "OracleFileModel", "PmemImage", "RecoveryReport", "recover"]
__version__ = "0.1.0"
