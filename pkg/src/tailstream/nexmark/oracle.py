"""Reference results for the NEXMark queries, computed directly from events.

These share no code with the engine's windowing: Q5 recounts each window
with numpy vectors and Q8 enumerates persons and auctions per window.
Results are multisets (``Counter``) of canonical rows:

* Q1, Q2: the output :class:`Bid` tuples.
* Q5: ``(window_end, None, ((auction, count), ...))``.
* Q8: ``(window_end, person_id, (auction_id, ...))``.
* Q13: ``(auction, side_value)``.
"""

from __future__ import annotations

from collections import Counter, defaultdict

import numpy as np

from .model import Auction, Bid, Person
from .queries import QueryParams, convert_price, side_table


def q1(events, params=QueryParams()) -> Counter:
    return Counter(
        Bid(e.auction, e.bidder, convert_price(e.price, params.q1_rate), e.event_time)
        for e in events if type(e) is Bid
    )


def q2(events, params=QueryParams()) -> Counter:
    return Counter(e for e in events if type(e) is Bid and e.auction % params.q2_modulus == 0)


def q5(events, params=QueryParams(), distinct_keys=None) -> Counter:
    """Sliding-window hottest auctions, ties included."""
    bids = [(e.auction, e.event_time) for e in events if type(e) is Bid]
    if not bids:
        return Counter()
    size, slide = params.window_ms, params.slide_ms
    keys = np.fromiter((a for a, _ in bids), dtype=np.int64, count=len(bids))
    times = np.fromiter((t for _, t in bids), dtype=np.int64, count=len(bids))
    n_keys = int(keys.max()) + 1 if distinct_keys is None else distinct_keys
    frame = (times // slide + 1) * slide
    order = np.argsort(frame, kind="stable")
    frame, keys = frame[order], keys[order]
    frame_ends, starts = np.unique(frame, return_index=True)
    bounds = list(starts) + [len(frame)]
    per_frame = {
        int(fe): np.bincount(keys[bounds[i]:bounds[i + 1]], minlength=n_keys)
        for i, fe in enumerate(frame_ends)
    }
    first, last = int(frame_ends[0]), int(frame_ends[-1]) + size - slide
    counts = np.zeros(n_keys, dtype=np.int64)
    out = Counter()
    for end in range(first, last + slide, slide):
        if end in per_frame:
            counts += per_frame[end]
        leaving = per_frame.get(end - size)
        if leaving is not None:
            counts -= leaving
        best = int(counts.max())
        if best > 0:
            hot = np.flatnonzero(counts == best)
            out[(end, None, tuple((int(k), best) for k in hot))] += 1
    return out


def q8(events, params=QueryParams()) -> Counter:
    """Persons with the auctions they created inside the same tumbling window."""
    size = params.q8_window_ms
    persons = defaultdict(set)  # window end -> person ids
    auctions = defaultdict(list)  # (window end, seller) -> auction ids
    for e in events:
        end = (e.event_time // size + 1) * size
        if type(e) is Person:
            persons[end].add(e.id)
        elif type(e) is Auction:
            auctions[(end, e.seller)].append(e.id)
    out = Counter()
    for (end, seller), ids in auctions.items():
        if seller in persons[end]:
            out[(end, seller, tuple(sorted(ids)))] += 1
    return out


def q13(events, side=None) -> Counter:
    table = defaultdict(list)
    for key, value in side if side is not None else side_table():
        table[key].append((key, value))
    out = Counter()
    for e in events:
        if type(e) is Auction:
            for row in table.get(e.category, ()):
                out[(e, row)] += 1
    return out


def run_oracle(query: str, events, params=QueryParams(), distinct_keys=None) -> Counter:
    if query == "q1":
        return q1(events, params)
    if query == "q2":
        return q2(events, params)
    if query == "q5":
        return q5(events, params, distinct_keys)
    if query == "q8":
        return q8(events, params)
    if query == "q13":
        return q13(events)
    raise ValueError(f"unknown query {query!r}")
