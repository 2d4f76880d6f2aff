"""Deterministic virtual-time event loop.

Engine workers, GC threads, the flush daemon and benchmark clients all run
as cooperative actors (generators) on one Scheduler. An actor yields either
a non-negative delay in microseconds or an Event to park on. Time is integer
microseconds; ties are broken by submission order, so a fixed seed plus a
fixed workload gives bit-identical runs.
"""

import heapq
import itertools
import random


class SchedulerHang(RuntimeError):
    """Raised when a pump exceeds its event budget (lost wakeup / livelock)."""


class ActorFailed(RuntimeError):
    def __init__(self, actor, exc):
        super().__init__(f"actor {actor.name!r} failed: {exc!r}")
        self.actor = actor
        self.exc = exc


class Event:
    """One-shot signal. Yielding a fired event resumes immediately."""

    __slots__ = ("_sched", "_waiters", "fired", "value")

    def __init__(self, sched):
        self._sched = sched
        self._waiters = []
        self.fired = False
        self.value = None

    def fire(self, value=None):
        if self.fired:
            return
        self.fired = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for actor in waiters:
            self._sched._schedule(actor, self._sched.now)


class Actor:
    __slots__ = ("name", "gen", "done", "result", "error", "done_event")

    def __init__(self, sched, gen, name):
        self.name = name
        self.gen = gen
        self.done = False
        self.result = None
        self.error = None
        self.done_event = Event(sched)

    def __repr__(self):
        state = "done" if self.done else "live"
        return f"<Actor {self.name} {state}>"


class Scheduler:
    def __init__(self, seed=0):
        self.now = 0
        self.rng = random.Random(seed)
        self._heap = []
        self._seq = itertools.count()
        self._live = 0
        self.events_processed = 0

    def event(self):
        return Event(self)

    def spawn(self, gen, name="actor"):
        actor = Actor(self, gen, name)
        self._live += 1
        self._schedule(actor, self.now)
        return actor

    def _schedule(self, actor, at):
        heapq.heappush(self._heap, (at, next(self._seq), actor))

    def _step(self):
        at, _, actor = heapq.heappop(self._heap)
        if at > self.now:
            self.now = at
        self.events_processed += 1
        try:
            yielded = actor.gen.send(None)
        except StopIteration as stop:
            actor.done = True
            actor.result = stop.value
            self._live -= 1
            actor.done_event.fire(stop.value)
            return
        except Exception as exc:
            actor.done = True
            actor.error = exc
            self._live -= 1
            actor.done_event.fire(None)
            raise ActorFailed(actor, exc) from exc
        if isinstance(yielded, Event):
            if yielded.fired:
                self._schedule(actor, self.now)
            else:
                yielded._waiters.append(actor)
        else:
            # numeric delay in microseconds
            delay = int(yielded)
            if delay < 0:
                delay = 0
            self._schedule(actor, self.now + delay)

    def pump(self, event, max_events=200_000_000):
        """Run until `event` fires. Budget guards against lost wakeups."""
        budget = max_events
        while not event.fired:
            if not self._heap:
                raise SchedulerHang(
                    f"no runnable actors at t={self.now}us but event never fired")
            if budget <= 0:
                raise SchedulerHang(f"event budget exhausted at t={self.now}us")
            self._step()
            budget -= 1
        return event.value

    def run_until_idle(self, max_events=200_000_000):
        budget = max_events
        while self._heap:
            if budget <= 0:
                raise SchedulerHang(f"event budget exhausted at t={self.now}us")
            self._step()
            budget -= 1

    def join(self, actor, max_events=200_000_000):
        self.pump(actor.done_event, max_events)
        if actor.error is not None:
            raise ActorFailed(actor, actor.error)
        return actor.result


class CorePool:
    """Host CPU model: every worker/collector compute charge occupies one of
    a fixed set of cores, so threads contend for cycles like kthreads on the
    modeled host. charge() books the earliest-free core and returns the
    delay the caller should yield."""

    def __init__(self, sched, cores):
        self.sched = sched
        self.free_at = [0] * max(1, cores)

    def charge(self, duration_us):
        best = 0
        for i in range(1, len(self.free_at)):
            if self.free_at[i] < self.free_at[best]:
                best = i
        start = max(self.sched.now, self.free_at[best])
        done = start + duration_us
        self.free_at[best] = done
        return done - self.sched.now


def run_actor(gen, seed=0):
    """Drive a single generator to completion on a fresh scheduler (test aid)."""
    sched = Scheduler(seed)
    actor = sched.spawn(gen, "main")
    return sched.join(actor)
