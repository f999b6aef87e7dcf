import asyncio

import pytest

from stageflow.clock import VirtualClock, VirtualDeadlock, WallClock, make_clock


def test_virtual_sleep_advances_exactly(clock):
    async def main():
        await clock.sleep(240)
        a = clock.now()
        await clock.sleep(0.5)
        return a, clock.now()

    assert clock.run(main()) == (240.0, 240.5)


def test_virtual_concurrent_sleeps_overlap(clock):
    async def main():
        await asyncio.gather(clock.sleep(100), clock.sleep(300), clock.sleep(200))
        return clock.now()

    assert clock.run(main()) == 300.0


def test_sleep_until_past_is_immediate(clock):
    async def main():
        await clock.sleep(50)
        await clock.sleep_until(10)
        return clock.now()

    assert clock.run(main()) == 50.0


def test_start_offset():
    c = VirtualClock(1000)
    assert c.run(c.sleep_until(1500)) is None
    assert c.now() == 1500


def test_deadlock_is_reported(clock):
    async def main():
        await asyncio.get_running_loop().create_future()

    with pytest.raises(VirtualDeadlock):
        clock.run(main())


def test_wall_clock_zero_scale_does_not_sleep():
    c = WallClock(0)
    c.run(c.sleep(10_000))
    assert c.now() < 5_000


def test_make_clock():
    assert isinstance(make_clock("virtual"), VirtualClock)
    assert isinstance(make_clock("WALL", time_scale=0), WallClock)
    with pytest.raises(ValueError):
        make_clock("sundial")
