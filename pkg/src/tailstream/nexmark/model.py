"""NEXMark events and generator configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import NamedTuple


class Person(NamedTuple):
    id: int
    name: str
    state: str
    event_time: int


class Auction(NamedTuple):
    id: int
    seller: int
    category: int
    expires: int
    event_time: int


class Bid(NamedTuple):
    auction: int
    bidder: int
    price: int
    event_time: int


STATES = ("AZ", "CA", "ID", "OR", "WA", "WY")
CATEGORIES = 20


@dataclass(frozen=True)
class GeneratorConfig:
    distinct_keys: int = 10_000
    events_per_second: int = 100_000
    duration_s: float = 60.0
    warmup_s: float = 5.0
    seed: int = 42
    # persons : auctions : bids
    proportions: tuple = (1, 3, 46)
    # events are released this long after their predetermined occurrence time
    source_delay_ms: int = 0
    # watermarks advance in steps of this size (use the window slide)
    watermark_granularity_ms: int = 1

    def __post_init__(self):
        if self.distinct_keys < 1:
            raise ValueError("distinct_keys must be positive")
        if self.events_per_second < 1:
            raise ValueError("events_per_second must be positive")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if len(self.proportions) != 3 or min(self.proportions) < 0 or sum(self.proportions) < 1:
            raise ValueError("proportions must be three non-negative counts")

    @property
    def total_events(self) -> int:
        return int(self.events_per_second * self.duration_s)

    def event_time(self, i: int) -> int:
        """Predetermined occurrence time of event ``i``, ms after the start."""
        return i * 1000 // self.events_per_second

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proportions"] = list(self.proportions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "proportions" in d:
            d["proportions"] = tuple(d["proportions"])
        return cls(**d)

    def with_(self, **kw) -> "GeneratorConfig":
        return replace(self, **kw)


# named profiles: the desk default and the full-scale reference setup
PROFILES = {
    "desk": GeneratorConfig(),
    "reference": GeneratorConfig(events_per_second=1_000_000, duration_s=240.0, warmup_s=20.0),
}
