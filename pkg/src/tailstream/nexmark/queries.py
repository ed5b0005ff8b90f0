"""NEXMark queries 1, 2, 5, 8 and 13 as pipelines.

Each builder takes the event source and the sink and returns a
:class:`~tailstream.pipeline.Pipeline`. Output shapes:

* Q1: :class:`Bid` with the converted price.
* Q2: the :class:`Bid` items that pass the auction filter.
* Q5: ``WindowResult(end, None, ((auction, bids), ...))``, every auction
  tied for the most bids in the window.
* Q8: ``WindowResult(end, person_id, (auction_id, ...))`` for every person
  who created at least one auction in the same tumbling window.
* Q13: ``(auction, side_value)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..pipeline import Pipeline, SinkDef, SourceDef, Sources
from ..windows import AggregateOperation, counting, max_with_ties, sliding, tumbling
from .model import CATEGORIES, Auction, Bid, Person

QUERIES = ("q1", "q2", "q5", "q8", "q13")


@dataclass(frozen=True)
class QueryParams:
    q1_rate: float = 0.908
    q2_modulus: int = 123
    window_ms: int = 10_000
    slide_ms: int = 10
    # Q8 uses tumbling windows of this size
    q8_window_ms: int = 10_000
    allowed_lag: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def convert_price(price: int, rate: float) -> int:
    """Currency conversion rounded half up."""
    return int(math.floor(price * rate + 0.5))


def is_bid(e) -> bool:
    return type(e) is Bid


def is_person(e) -> bool:
    return type(e) is Person


def is_auction(e) -> bool:
    return type(e) is Auction


def is_person_or_auction(e) -> bool:
    return type(e) is Person or type(e) is Auction


def bid_auction(b) -> int:
    return b.auction


def person_or_seller(e) -> int:
    return e.id if type(e) is Person else e.seller


class _Q1Map:
    def __init__(self, rate):
        self.rate = rate

    def __call__(self, b):
        return b._replace(price=convert_price(b.price, self.rate))


class _Q2Filter:
    def __init__(self, modulus):
        self.modulus = modulus

    def __call__(self, b):
        return b.auction % self.modulus == 0


# Q8 accumulator: (person ids seen, auction ids created) for one key in one window


def _q8_create():
    return ((), ())


def _q8_accumulate(acc, e):
    persons, auctions = acc
    if type(e) is Person:
        return (persons + (e.id,), auctions)
    return (persons, auctions + (e.id,))


def _q8_combine(a, b):
    return (a[0] + b[0], a[1] + b[1])


def _q8_finish(acc):
    persons, auctions = acc
    return tuple(sorted(auctions)) if persons else ()


def q8_join() -> AggregateOperation:
    return AggregateOperation(_q8_create, _q8_accumulate, _q8_combine, None, _q8_finish, None, "q8_join")


def _non_empty_value(r) -> bool:
    return bool(r.value)


def side_table():
    """Q13 side input: a name for every category except each fifth one."""
    return [(c, f"category-{c}") for c in range(CATEGORIES) if c % 5 != 4]


def _first(x):
    return x[0]


def _category(a):
    return a.category


def build_query(name: str, source: SourceDef, sink: SinkDef, params: QueryParams = QueryParams(),
                side=None) -> Pipeline:
    p = Pipeline()
    events = p.read_from(source)
    if name == "q1":
        events.filter(is_bid).map(_Q1Map(params.q1_rate)).write_to(sink)
    elif name == "q2":
        events.filter(is_bid).filter(_Q2Filter(params.q2_modulus)).write_to(sink)
    elif name == "q5":
        (events.filter(is_bid)
            .grouping_key(bid_auction)
            .window(sliding(params.window_ms, params.slide_ms), params.allowed_lag)
            .aggregate(counting(), window_reducer=max_with_ties())
            .write_to(sink))
    elif name == "q8":
        (events.filter(is_person_or_auction)
            .grouping_key(person_or_seller)
            .window(tumbling(params.q8_window_ms), params.allowed_lag)
            .aggregate(q8_join())
            .filter(_non_empty_value)
            .write_to(sink))
    elif name == "q13":
        table = p.read_from(Sources.batch(side if side is not None else side_table(), name="side-input"))
        events.filter(is_auction).hash_join(table, _category, _first).write_to(sink)
    else:
        raise ValueError(f"unknown query {name!r}; choose from {', '.join(QUERIES)}")
    return p


def run_query(name: str, events, params: QueryParams = QueryParams(), threads: int = 2,
              partitions: int = 8, side=None, timeout: float = 600.0):
    """Run a query over a recorded event list in-process, without pacing.

    Returns the output as a multiset comparable with the oracle's.
    """
    from ..pipeline import Sinks, comparable
    from ..runtime import run_job

    out = []
    src = Sources.stream([(e, e.event_time) for e in events], partitions=partitions, batch_size=512)
    run_job(build_query(name, src, Sinks.list(out), params, side).compile(), threads=threads, timeout=timeout)
    return comparable(out)
