import pytest

from bankftl.sched import ActorFailed, CorePool, Scheduler, SchedulerHang


def test_sleep_ordering_deterministic():
    seen = []

    def actor(name, delay):
        yield delay
        seen.append((name, None))
        yield delay
        seen.append((name, None))

    for _ in range(3):
        seen.clear()
        sched = Scheduler(7)
        sched.spawn(actor("a", 10), "a")
        sched.spawn(actor("b", 10), "b")
        sched.spawn(actor("c", 5), "c")
        sched.run_until_idle()
        first = list(seen)
    assert [n for n, _ in first] == ["c", "a", "b", "c", "a", "b"]


def test_event_wakeup_and_value():
    sched = Scheduler(0)
    ev = sched.event()
    got = []

    def waiter():
        yield ev
        got.append(ev.value)

    def firer():
        yield 50
        ev.fire("ping")

    sched.spawn(waiter(), "w")
    sched.spawn(firer(), "f")
    sched.run_until_idle()
    assert got == ["ping"]
    assert sched.now == 50


def test_yield_on_fired_event_resumes():
    sched = Scheduler(0)
    ev = sched.event()
    ev.fire(1)

    def waiter():
        yield ev
        return "done"

    actor = sched.spawn(waiter(), "w")
    assert sched.join(actor) == "done"


def test_join_propagates_actor_errors():
    sched = Scheduler(0)

    def boom():
        yield 1
        raise ValueError("nope")

    actor = sched.spawn(boom(), "boom")
    with pytest.raises(ActorFailed):
        sched.join(actor)


def test_pump_detects_lost_wakeup():
    sched = Scheduler(0)
    never = sched.event()
    with pytest.raises(SchedulerHang):
        sched.pump(never)


def test_time_never_goes_backwards():
    sched = Scheduler(0)
    stamps = []

    def actor(d):
        for _ in range(5):
            stamps.append(sched.now)
            yield d

    sched.spawn(actor(3), "a")
    sched.spawn(actor(7), "b")
    sched.run_until_idle()
    assert stamps == sorted(stamps)


def test_core_pool_serializes_beyond_capacity():
    sched = Scheduler(0)
    pool = CorePool(sched, 2)
    # three simultaneous 100us charges on two cores: two run, one queues
    delays = [pool.charge(100) for _ in range(3)]
    assert delays == [100, 100, 200]


def test_core_pool_idle_cores_run_parallel():
    sched = Scheduler(0)
    pool = CorePool(sched, 4)
    assert [pool.charge(50) for _ in range(4)] == [50, 50, 50, 50]
