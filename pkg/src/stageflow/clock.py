"""Driving clocks for the orchestrator and simulated backends.

All timestamps in the library are milliseconds. Under :class:`VirtualClock`
the asyncio loop itself runs on virtual time whose unit is the millisecond,
so ``asyncio.sleep(d)`` inside the loop advances virtual time by ``d`` ms
and integer latencies stay exact.
"""

from __future__ import annotations

import asyncio
import selectors
import time
from typing import Any, Awaitable, Protocol, TypeVar

T = TypeVar("T")


class Clock(Protocol):
    def now(self) -> float: ...

    async def sleep(self, ms: float) -> None: ...

    async def sleep_until(self, ts: float) -> None: ...

    def run(self, coro: Awaitable[T]) -> T: ...


class VirtualDeadlock(RuntimeError):
    """Every task is blocked and no timer is pending."""


class _VirtualSelector(selectors.BaseSelector):
    # Real descriptors (the loop's self-pipe) are still polled, but never
    # block: an idle wait advances virtual time instead.

    def __init__(self, clock: VirtualClock):
        self._inner = selectors.DefaultSelector()
        self._clock = clock

    def register(self, fileobj, events, data=None):
        return self._inner.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._inner.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._inner.modify(fileobj, events, data)

    def get_map(self):
        return self._inner.get_map()

    def close(self) -> None:
        self._inner.close()

    def select(self, timeout=None):
        events = self._inner.select(0)
        if events:
            return events
        if timeout is None:
            raise VirtualDeadlock("no runnable task and no pending timer under virtual time")
        if timeout > 0:
            self._clock._now += timeout
        return []


class VirtualEventLoop(asyncio.SelectorEventLoop):
    def __init__(self, clock: VirtualClock):
        self._virtual_clock = clock
        super().__init__(selector=_VirtualSelector(clock))
        self._clock_resolution = 1e-9

    def time(self) -> float:
        return self._virtual_clock._now


class VirtualClock:
    """Deterministic clock; time moves only when every task is waiting."""

    def __init__(self, start_ms: float = 0.0):
        self._now = float(start_ms)

    def now(self) -> float:
        return self._now

    async def sleep(self, ms: float) -> None:
        await asyncio.sleep(max(0.0, ms))

    async def sleep_until(self, ts: float) -> None:
        await asyncio.sleep(max(0.0, ts - self._now))

    def run(self, coro: Awaitable[T]) -> T:
        loop = VirtualEventLoop(self)
        try:
            return loop.run_until_complete(coro)
        finally:
            _shutdown(loop)

    def __repr__(self) -> str:
        return f"VirtualClock(now={self._now})"


class WallClock:
    """Real time in ms since construction. ``time_scale`` shrinks sleeps (0 = no sleeping)."""

    def __init__(self, time_scale: float = 1.0):
        self.time_scale = time_scale
        self._t0 = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    async def sleep(self, ms: float) -> None:
        if ms > 0 and self.time_scale > 0:
            await asyncio.sleep(ms * self.time_scale / 1000.0)
        else:
            await asyncio.sleep(0)

    async def sleep_until(self, ts: float) -> None:
        await self.sleep(ts - self.now())

    def run(self, coro: Awaitable[T]) -> T:
        return asyncio.run(coro)


def make_clock(mode: str, **kwargs: Any) -> VirtualClock | WallClock:
    mode = mode.lower()
    if mode == "virtual":
        return VirtualClock(**kwargs)
    if mode == "wall":
        return WallClock(**kwargs)
    raise ValueError(f"unknown clock mode {mode!r} (expected 'virtual' or 'wall')")


def _shutdown(loop: asyncio.AbstractEventLoop) -> None:
    try:
        pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
        for task in pending:
            task.cancel()
        if pending:
            loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        loop.run_until_complete(loop.shutdown_asyncgens())
    finally:
        loop.close()
