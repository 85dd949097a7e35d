import asyncio
import time

from conftest import vrun

from fedgate.simclock import now


def test_timers_fire_in_virtual_time_instantly():
    async def main():
        t0 = now()
        wall0 = time.perf_counter()
        await asyncio.sleep(3600)
        return now() - t0, time.perf_counter() - wall0

    virtual, wall = vrun(main())
    assert virtual == 3600
    assert wall < 1.0


def test_concurrent_sleeps_wake_in_deadline_order():
    async def main():
        order = []

        async def sleeper(name, dt):
            await asyncio.sleep(dt)
            order.append((name, now()))

        await asyncio.gather(sleeper("c", 0.5), sleeper("a", 10), sleeper("b", 2))
        return order

    order = vrun(main())
    assert order == [("c", 0.5), ("b", 2), ("a", 10)]


def test_two_runs_identical_trace():
    async def scenario():
        trace = []

        async def worker(i):
            await asyncio.sleep(i * 0.1)
            trace.append((i, now()))
            await asyncio.sleep(0.05)
            trace.append((i, now()))

        await asyncio.gather(*(worker(i) for i in range(20)))
        return trace

    assert vrun(scenario()) == vrun(scenario())


def test_cancelled_timers_are_skipped():
    async def main():
        task = asyncio.ensure_future(asyncio.sleep(10_000))
        await asyncio.sleep(0.1)
        task.cancel()
        try:
            await task
        except asyncio.CancelledError:
            pass
        await asyncio.sleep(1)
        return now()

    # the cancelled 10k-second timer must not drag the clock forward
    assert vrun(main()) == 1.1
