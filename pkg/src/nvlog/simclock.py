"""Simulated time accounting.

Time is charged to the current account: by default one per OS thread, or
an explicit one selected with :meth:`SimClock.account` (the bench scheduler
uses this to run several simulated workers on one thread).  Work done
inside :meth:`SimClock.background` goes to a shared background account so
it never inflates foreground latency.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager


class SimClock:
    def __init__(self):
        self._local = threading.local()
        self._lock = threading.Lock()
        self.accounts: defaultdict = defaultdict(float)
        self.background_ns = 0.0

    def _state(self):
        st = self._local
        if not hasattr(st, "bg"):
            st.bg = 0
            st.account = threading.get_ident()
        return st

    def charge(self, ns: float) -> None:
        st = self._state()
        with self._lock:
            if st.bg:
                self.background_ns += ns
            else:
                self.accounts[st.account] += ns

    def now_ns(self) -> float:
        return self.accounts[self._state().account]

    def reset(self) -> None:
        with self._lock:
            self.accounts.clear()
            self.background_ns = 0.0

    @contextmanager
    def account(self, name):
        st = self._state()
        prev, st.account = st.account, name
        try:
            yield
        finally:
            st.account = prev

    @contextmanager
    def background(self):
        st = self._state()
        st.bg += 1
        try:
            yield
        finally:
            st.bg -= 1
