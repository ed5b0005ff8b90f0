"""Random pipeline generator shared by the pipeline tests and the acceptance run."""

import random

from tailstream.pipeline import Pipeline, Sinks, Sources
from tailstream.windows import counting, sliding, summing, tumbling

STATELESS_OPS = [
    ("map", lambda x: x * 3 + 1),
    ("map", lambda x: x % 17),
    ("map", lambda x: -x),
    ("filter", lambda x: x % 2 == 0),
    ("filter", lambda x: x % 5 != 3),
    ("flat_map", lambda x: (x, x + 1)),
    ("flat_map", lambda x: range(x % 3)),
]

KEY_FNS = [lambda x: x % 7, lambda x: x % 2, lambda x: x]


def random_recipe(rng: random.Random) -> dict:
    """A description of a random pipeline; ``build_pipeline`` turns it into stages."""
    stream = rng.random() < 0.5
    n = rng.randrange(0, 400)
    items = [rng.randrange(1000) for _ in range(n)]
    return {
        "stream": stream,
        # event times ascend within the trace, so no event is late with zero allowed lag
        "items": [(x, t) for x, t in zip(items, sorted(rng.randrange(2000) for _ in items))] if stream else items,
        "chain": [rng.randrange(len(STATELESS_OPS)) for _ in range(rng.randrange(1, 6))],
        "branch_at": rng.choice([None, 0, 1]),
        "terminal": rng.choice(["none", "aggregate", "join"]),
        "key": rng.randrange(len(KEY_FNS)),
        "sum": rng.random() < 0.5,
        "window": rng.choice([(100, 100), (200, 50), (300, 100)]),
        "build": [(k, f"b{k}-{i}") for i in range(rng.randrange(0, 4)) for k in rng.sample(range(7), 4)],
        "partitions": rng.choice([1, 2, 4]),
    }


def _apply(stage, op_index):
    kind, fn = STATELESS_OPS[op_index]
    return getattr(stage, kind)(fn)


def build_pipeline(recipe: dict):
    """Returns ``(pipeline, sink lists)`` for a recipe; each call builds fresh sinks."""
    p = Pipeline()
    if recipe["stream"]:
        src = p.read_from(Sources.stream(recipe["items"], partitions=recipe["partitions"]))
    else:
        src = p.read_from(Sources.batch(recipe["items"]))
    sinks = []
    stage = src
    for i, op in enumerate(recipe["chain"]):
        stage = _apply(stage, op)
        if recipe["branch_at"] == i:
            # a second consumer of this stage ends the fused chain here
            side = []
            stage.map(lambda x: ("side", x)).write_to(Sinks.list(side))
            sinks.append(side)
    key_fn = KEY_FNS[recipe["key"]]
    agg = summing(lambda x: x) if recipe["sum"] else counting()
    terminal = recipe["terminal"]
    if terminal == "aggregate":
        keyed = stage.grouping_key(key_fn)
        if recipe["stream"]:
            size, slide = recipe["window"]
            wdef = tumbling(size) if size == slide else sliding(size, slide)
            stage = keyed.window(wdef).aggregate(agg)
        else:
            stage = keyed.aggregate(agg)
    elif terminal == "join":
        build = p.read_from(Sources.batch(recipe["build"], name="build"))
        stage = stage.hash_join(build, lambda x: x % 7, lambda row: row[0])
    out = []
    stage.write_to(Sinks.list(out))
    sinks.append(out)
    return p, sinks
