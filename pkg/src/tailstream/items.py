"""Items that flow through the queues of a running job.

Data records travel as :class:`Event`; everything else is a control item
that the tasklets interpret themselves and never hand to a processor inbox.
"""

from __future__ import annotations

from typing import NamedTuple


class Event:
    """A data record with its event time (epoch milliseconds)."""

    __slots__ = ("payload", "event_time", "key_hash")

    def __init__(self, payload, event_time=0, key_hash=None):
        self.payload = payload
        self.event_time = event_time
        self.key_hash = key_hash

    def __eq__(self, other):
        return (
            type(other) is Event
            and self.payload == other.payload
            and self.event_time == other.event_time
        )

    def __hash__(self):
        return hash((self.payload, self.event_time))

    def __repr__(self):
        return f"Event({self.payload!r}, t={self.event_time})"

    def __reduce__(self):
        return (Event, (self.payload, self.event_time, self.key_hash))


class ControlItem:
    __slots__ = ()


class Watermark(ControlItem):
    """Asserts that no later event on this channel has a smaller event time."""

    __slots__ = ("time",)

    def __init__(self, time):
        self.time = time

    def __eq__(self, other):
        return type(other) is Watermark and other.time == self.time

    def __hash__(self):
        return hash(("wm", self.time))

    def __repr__(self):
        return f"Watermark({self.time})"

    def __reduce__(self):
        return (Watermark, (self.time,))


class Barrier(ControlItem):
    """Snapshot barrier; ``terminal`` marks the last snapshot before a graceful stop."""

    __slots__ = ("snapshot_id", "terminal")

    def __init__(self, snapshot_id, terminal=False):
        self.snapshot_id = snapshot_id
        self.terminal = terminal

    def __eq__(self, other):
        return (
            type(other) is Barrier
            and other.snapshot_id == self.snapshot_id
            and other.terminal == self.terminal
        )

    def __hash__(self):
        return hash(("barrier", self.snapshot_id, self.terminal))

    def __repr__(self):
        return f"Barrier({self.snapshot_id}{', terminal' if self.terminal else ''})"

    def __reduce__(self):
        return (Barrier, (self.snapshot_id, self.terminal))


class _Done(ControlItem):
    """End-of-stream marker for one channel."""

    __slots__ = ()

    def __repr__(self):
        return "DONE"

    def __reduce__(self):
        return "DONE"


DONE = _Done()

# Sentinel watermark values.
MIN_TIME = float("-inf")
MAX_TIME = float("inf")


class BroadcastKey(NamedTuple):
    """Snapshot state key whose entry is restored to every instance of the vertex."""

    key: object
