"""Log-bucketed latency histogram with microsecond resolution.

Values below 256 µs get a bucket each. Above that every power of two is
split into 128 equal buckets, so a bucket is never wider than 1/128 of its
lower bound (under 0.8 % relative error). Values are clamped to one hour.
"""

from __future__ import annotations

import math
from typing import Iterable

LINEAR_LIMIT = 256
SUB_BUCKETS = 128
MAX_VALUE_US = 3_600_000_000
PERCENTILES = (50.0, 90.0, 99.0, 99.9, 99.99)


def bucket_index(value_us: int) -> int:
    if value_us < LINEAR_LIMIT:
        return value_us
    m = value_us.bit_length()
    shift = m - 8
    top = value_us >> shift
    return LINEAR_LIMIT + (m - 9) * SUB_BUCKETS + (top - SUB_BUCKETS)


def bucket_bounds(index: int):
    """Inclusive ``(lowest, highest)`` value held by bucket ``index``."""
    if index < LINEAR_LIMIT:
        return index, index
    m = (index - LINEAR_LIMIT) // SUB_BUCKETS + 9
    top = (index - LINEAR_LIMIT) % SUB_BUCKETS + SUB_BUCKETS
    shift = m - 8
    low = top << shift
    return low, low + (1 << shift) - 1


class InsufficientSamples(UserWarning):
    pass


class LatencyHistogram:
    def __init__(self):
        self.counts = {}
        self.total = 0
        self.min = None
        self.max = None

    def record(self, value_us):
        v = int(value_us)
        if v < 0:
            v = 0
        elif v > MAX_VALUE_US:
            v = MAX_VALUE_US
        i = bucket_index(v)
        self.counts[i] = self.counts.get(i, 0) + 1
        self.total += 1
        if self.min is None or v < self.min:
            self.min = v
        if self.max is None or v > self.max:
            self.max = v

    def record_all(self, values: Iterable):
        for v in values:
            self.record(v)

    def merge(self, other: "LatencyHistogram") -> "LatencyHistogram":
        for i, c in other.counts.items():
            self.counts[i] = self.counts.get(i, 0) + c
        self.total += other.total
        for attr, pick in (("min", min), ("max", max)):
            mine, theirs = getattr(self, attr), getattr(other, attr)
            if theirs is not None:
                setattr(self, attr, theirs if mine is None else pick(mine, theirs))
        return self

    def __len__(self):
        return self.total

    def percentile(self, q: float) -> int:
        """Nearest-rank percentile in µs, reported as the bucket's highest value.

        Never exceeds the recorded maximum.
        """
        if not self.total:
            raise ValueError("empty histogram")
        if not 0 < q <= 100:
            raise ValueError("percentile must be in (0, 100]")
        rank = max(1, math.ceil(q / 100.0 * self.total))
        seen = 0
        for i in sorted(self.counts):
            seen += self.counts[i]
            if seen >= rank:
                return min(bucket_bounds(i)[1], self.max)
        return self.max

    def percentiles(self, qs=PERCENTILES) -> dict:
        return {_label(q): self.percentile(q) for q in qs}

    def buckets(self):
        """``[(lowest_us, highest_us, count), ...]`` for every non-empty bucket."""
        return [(*bucket_bounds(i), self.counts[i]) for i in sorted(self.counts)]

    def to_dict(self) -> dict:
        return {"total": self.total, "min": self.min, "max": self.max,
                "buckets": [list(b) for b in self.buckets()]}

    @classmethod
    def from_dict(cls, d) -> "LatencyHistogram":
        h = cls()
        for low, _high, count in d["buckets"]:
            h.counts[bucket_index(low)] = count
        h.total, h.min, h.max = d["total"], d["min"], d["max"]
        return h


def _label(q: float) -> str:
    return "p" + (f"{q:g}")


def bucket_width(value_us: int) -> int:
    low, high = bucket_bounds(bucket_index(int(value_us)))
    return high - low + 1
