"""Receive-window flow control for network edges.

The receiver periodically tells the sender how far it may go: after
processing item ``n`` it grants items up to ``n + window_size``. The window
tracks the measured processing rate so that it holds about three ack periods
worth of data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

ACK_PERIOD_S = 0.1
WINDOW_FLOOR = 256
WINDOW_CEILING = 1 << 20
RATE_SMOOTHING = 0.5
# the window covers this many ack periods of data (300 ms at a 100 ms cadence)
WINDOW_ACK_PERIODS = 3


class AckMessage(NamedTuple):
    ordinal: int
    acked_seq: int
    window_size: int
    sender_instance: int = 0


@dataclass
class ReceiveWindowState:
    acked_seq: int = 0
    window_size: int = WINDOW_FLOOR
    observed_rate: Optional[float] = None
    ack_period: float = ACK_PERIOD_S
    floor: int = WINDOW_FLOOR
    ceiling: int = WINDOW_CEILING
    smoothing: float = RATE_SMOOTHING
    ordinal: int = 0
    sender_instance: int = 0

    def __post_init__(self):
        if self.floor < 1 or self.ceiling < self.floor:
            raise ValueError("need 1 <= floor <= ceiling")
        self.window_size = min(max(self.window_size, self.floor), self.ceiling)

    def grant_limit(self) -> int:
        return self.acked_seq + self.window_size


def update_receive_window(
    state: ReceiveWindowState, items_processed_since_last_ack: int, elapsed: float
) -> AckMessage:
    """Fold one ack period's progress into ``state`` and produce the ack to send."""
    if items_processed_since_last_ack < 0:
        raise ValueError("processed item count cannot be negative")
    rate = items_processed_since_last_ack / elapsed if elapsed > 0 else 0.0
    if state.observed_rate is None:
        state.observed_rate = rate
    else:
        a = state.smoothing
        state.observed_rate = a * rate + (1.0 - a) * state.observed_rate
    target = WINDOW_ACK_PERIODS * state.observed_rate * state.ack_period
    window = int(math.floor(target + 0.5))
    state.window_size = min(max(window, state.floor), state.ceiling)
    state.acked_seq += items_processed_since_last_ack
    return AckMessage(state.ordinal, state.acked_seq, state.window_size, state.sender_instance)


def sender_gate(state: ReceiveWindowState, next_seq: int) -> bool:
    """True iff the item numbered ``next_seq`` (1-based) may be transmitted now."""
    return next_seq <= state.acked_seq + state.window_size


class SenderWindow:
    """Sender-side view of the grant, updated from ack messages.

    The grant is a single int replaced atomically by the connection reader
    thread, so the sending tasklet can read it without a lock.
    """

    __slots__ = ("limit", "acked_seq", "window_size")

    def __init__(self, initial_window: int = WINDOW_FLOOR):
        self.acked_seq = 0
        self.window_size = initial_window
        self.limit = initial_window

    def on_ack(self, ack: AckMessage):
        if ack.acked_seq < self.acked_seq:
            return  # stale
        self.acked_seq = ack.acked_seq
        self.window_size = ack.window_size
        self.limit = ack.acked_seq + ack.window_size

    def may_send(self, next_seq: int) -> bool:
        return next_seq <= self.limit

    def allowance(self, next_seq: int) -> int:
        """How many items starting at ``next_seq`` may be sent now."""
        return max(0, self.limit - next_seq + 1)
