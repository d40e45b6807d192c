"""Reference model of what a crash may legally leave on disk.

The model consumes only the engine's event trace.  Per file page it keeps
the last durable disk copy plus the committed sync events not yet expired
by a write-back; the predicted post-crash page is the disk copy with those
events laid over it in commit order.  Two windows leave the outcome open:

* between ``sync_begin`` and ``sync_done`` the transaction may or may not
  have committed;
* between ``disk_durable`` and ``writeback_done`` the write-back record
  may or may not be persisted.

:meth:`OracleFileModel.predict` therefore returns a small set of states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAGE_SIZE = 4096
ZERO_PAGE = bytes(PAGE_SIZE)

State = dict[int, tuple[int, dict[int, bytes]]]


class OracleError(Exception):
    """The trace is malformed or shows a broken durability promise."""


@dataclass
class _Page:
    visible: bytearray = field(default_factory=lambda: bytearray(PAGE_SIZE))
    disk: bytes = ZERO_PAGE
    events: list[tuple[int, bytes]] = field(default_factory=list)
    dirty: bool = False
    logged: bool = False

    def predicted(self, events=None) -> bytes:
        out = bytearray(self.disk)
        for off, data in self.events if events is None else events:
            out[off:off + len(data)] = data
        return bytes(out)


@dataclass
class _File:
    size: int = 0
    disk_size: int = 0
    log_size: int = 0
    pages: dict[int, _Page] = field(default_factory=dict)

    def page(self, p: int) -> _Page:
        pg = self.pages.get(p)
        if pg is None:
            pg = self.pages[p] = _Page()
        return pg


@dataclass
class _PendingSync:
    ino: int
    kind: str
    events: list[tuple[int, int, bytes]]
    size: int
    logged: dict[int, bool]
    fallback: bool = False


class OracleFileModel:
    def __init__(self):
        self.files: dict[int, _File] = {}
        self.version = 0
        self._sync: _PendingSync | None = None
        self._wb: tuple[int, int, bytes, bool] | None = None  # ino, page, snapshot, durable
        self._last_write: tuple[int, int, int, dict[int, bool]] | None = None
        self._cache: tuple[int, list[State]] | None = None

    def _file(self, ino: int) -> _File:
        try:
            return self.files[ino]
        except KeyError:
            raise OracleError(f"event for inode {ino} before it was opened") from None

    def preload(self, ino: int, size: int, pages: dict[int, bytes]) -> None:
        """Declare a file that already exists on disk before tracing starts."""
        f = self.files.setdefault(ino, _File())
        f.size = f.disk_size = size
        for p, data in pages.items():
            pg = f.page(p)
            pg.disk = bytes(data)
            pg.visible[:] = data
        self.version += 1

    # -- event intake ---------------------------------------------------------

    def apply_event(self, rec: dict) -> None:
        ev = rec["ev"]
        handler = getattr(self, f"_on_{ev}", None)
        if handler is None:
            raise OracleError(f"unknown event {ev!r}")
        handler(rec)
        self.version += 1

    def apply_trace(self, records) -> None:
        for rec in records:
            self.apply_event(rec)

    def _on_open(self, rec):
        self.files.setdefault(rec["ino"], _File())

    def _on_write(self, rec):
        if self._sync is not None:
            raise OracleError("write event inside an open sync window")
        f = self._file(rec["ino"])
        data = bytes.fromhex(rec["data"])
        off = rec["off"]
        prior = {}
        pos, end = off, off + len(data)
        while pos < end:
            p, lo = divmod(pos, PAGE_SIZE)
            n = min(end - pos, PAGE_SIZE - lo)
            pg = f.page(p)
            prior[p] = not pg.dirty or pg.logged
            pg.visible[lo:lo + n] = data[pos - off:pos - off + n]
            pg.dirty = True
            pg.logged = False
            pos += n
        f.size = max(f.size, end)
        self._last_write = (rec["ino"], off, len(data), prior)

    def _on_sync_begin(self, rec):
        if self._sync is not None:
            raise OracleError("nested sync_begin")
        ino, kind = rec["ino"], rec["kind"]
        f = self._file(ino)
        events = []
        logged = {}
        if kind == "osync":
            off, length = rec["off"], rec["len"]
            if self._last_write is None or self._last_write[:3] != (ino, off, length):
                raise OracleError("O_SYNC sync_begin does not follow its write")
            prior = self._last_write[3]
            pos, end = off, off + length
            while pos < end:
                p, lo = divmod(pos, PAGE_SIZE)
                n = min(end - pos, PAGE_SIZE - lo)
                events.append((p, lo, bytes(f.pages[p].visible[lo:lo + n])))
                logged[p] = n == PAGE_SIZE or prior[p]
                pos += n
        elif kind in ("fsync", "fdatasync"):
            for p, pg in sorted(f.pages.items()):
                if pg.dirty and not pg.logged:
                    events.append((p, 0, bytes(pg.visible)))
                    logged[p] = True
        else:
            raise OracleError(f"unknown sync kind {kind!r}")
        self._sync = _PendingSync(ino, kind, events, f.size, logged)

    def _on_sync_fallback(self, rec):
        if self._sync is None or self._sync.ino != rec["ino"]:
            raise OracleError("sync_fallback outside a sync window")
        self._sync.fallback = True

    def _on_sync_done(self, rec):
        s = self._sync
        if s is None or s.ino != rec["ino"]:
            raise OracleError("sync_done without matching sync_begin")
        f = self.files[s.ino]
        if not s.fallback:
            for p, lo, data in s.events:
                f.page(p).events.append((lo, data))
            f.log_size = max(f.log_size, s.size)
            for p, v in s.logged.items():
                f.pages[p].logged = v
        self._sync = None
        # durability promise of the call that just returned
        if max(f.disk_size, f.log_size) < s.size:
            raise OracleError(f"inode {s.ino}: size {s.size} not durable after {s.kind}")
        if s.kind != "osync":
            bad = [p for p, pg in f.pages.items() if pg.dirty and not pg.logged]
        elif s.fallback:
            bad = [p for p in s.logged if f.pages[p].dirty]
        else:
            bad = []
        if bad:
            raise OracleError(f"inode {s.ino}: pages {bad} neither logged nor on disk after {s.kind}")

    def _on_writeback_begin(self, rec):
        if self._wb is not None:
            raise OracleError("overlapping write-backs")
        f = self._file(rec["ino"])
        self._wb = (rec["ino"], rec["page"], bytes(f.page(rec["page"]).visible), False)

    def _take_wb(self, rec) -> tuple[int, int, bytes, bool]:
        wb = self._wb
        if wb is None or wb[:2] != (rec["ino"], rec["page"]):
            raise OracleError(f"{rec['ev']} without matching writeback_begin")
        return wb

    def _on_disk_durable(self, rec):
        ino, p, snap, _ = self._take_wb(rec)
        self.files[ino].pages[p].disk = snap
        self._wb = (ino, p, snap, True)

    def _on_writeback_done(self, rec):
        ino, p, _, durable = self._take_wb(rec)
        if not durable:
            raise OracleError("writeback_done before disk_durable")
        pg = self.files[ino].pages[p]
        pg.events.clear()
        pg.dirty = False
        pg.logged = False
        self._wb = None

    def _on_writeback_abort(self, rec):
        self._take_wb(rec)
        self._wb = None

    def _on_meta_durable(self, rec):
        f = self._file(rec["ino"])
        f.disk_size = max(f.disk_size, rec.get("size", f.size))

    def _on_gc_begin(self, rec):
        pass

    _on_gc_done = _on_crash_point = _on_gc_begin

    # -- prediction -----------------------------------------------------------

    def _base(self) -> State:
        out: State = {}
        for ino, f in self.files.items():
            pages = {}
            for p, pg in f.pages.items():
                data = pg.predicted()
                if data != ZERO_PAGE:
                    pages[p] = data
            out[ino] = (max(f.disk_size, f.log_size), pages)
        return out

    def predict(self) -> list[State]:
        """Every disk state recovery may legally produce right now."""
        if self._cache is not None and self._cache[0] == self.version:
            return self._cache[1]
        base = self._base()
        states = [base]
        s = self._sync
        if s is not None and not s.fallback and (s.events or s.size > self.files[s.ino].log_size):
            f = self.files[s.ino]
            size, pages = base[s.ino]
            pages = dict(pages)
            extra: dict[int, list[tuple[int, bytes]]] = {}
            for p, lo, data in s.events:
                extra.setdefault(p, []).append((lo, data))
            for p, evs in extra.items():
                pg = f.pages[p]
                data = pg.predicted(pg.events + evs)
                if data != ZERO_PAGE:
                    pages[p] = data
                else:
                    pages.pop(p, None)
            states.append({**base, s.ino: (max(size, s.size), pages)})
        if self._wb is not None and self._wb[3]:
            ino, p, snap, _ = self._wb
            if self.files[ino].pages[p].events:
                size, pages = base[ino]
                pages = dict(pages)
                if snap != ZERO_PAGE:
                    pages[p] = snap
                else:
                    pages.pop(p, None)
                states.append({**base, ino: (size, pages)})
        self._cache = (self.version, states)
        return states

    def admits(self, state: State) -> bool:
        return any(_same(state, c) for c in self.predict())

    def verify(self, state: State) -> list[str]:
        """Empty when ``state`` is admissible, else a diff against each candidate."""
        cands = self.predict()
        if any(_same(state, c) for c in cands):
            return []
        return [f"candidate {i}: " + "; ".join(diff_states(state, c)) for i, c in enumerate(cands)]


def _same(a: State, b: State) -> bool:
    if a.keys() != b.keys():
        return False
    return all(a[k] == b[k] for k in a)


def diff_states(got: State, want: State) -> list[str]:
    out = []
    for ino in sorted(set(got) | set(want)):
        if ino not in got or ino not in want:
            out.append(f"inode {ino} present in only one state")
            continue
        gsize, gpages = got[ino]
        wsize, wpages = want[ino]
        if gsize != wsize:
            out.append(f"inode {ino} size {gsize} != {wsize}")
        for p in sorted(set(gpages) | set(wpages)):
            g = gpages.get(p, ZERO_PAGE)
            w = wpages.get(p, ZERO_PAGE)
            if g != w:
                first = next(i for i in range(PAGE_SIZE) if g[i] != w[i])
                out.append(f"inode {ino} page {p} differs from byte {first}: "
                           f"got {g[first:first + 8].hex()} want {w[first:first + 8].hex()}")
    return out
