"""JSON job configurations and the DAG factories they name.

A job config is a JSON object::

    {
      "name": "q5",
      "dag_factory": "tailstream.cluster.jobs:nexmark_dag",
      "config": {...},                  # handed to the factory
      "guarantee": "exactly_once",      # or "at_least_once" / "none"
      "snapshot_interval_ms": 1000,     # 0 disables snapshots
      "snapshot_timeout_s": 60,
      "timeout_s": 600
    }

Every member calls the factory itself, so a factory must build the same
DAG from the same config on any node.
"""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass, field

from ..connectors import TransactionalSinkP
from ..dag import DagSpec
from ..pipeline import Sinks, Sources
from ..snapshot import DEFAULT_SNAPSHOT_TIMEOUT_S
from ..tasklets import EXACTLY_ONCE, GUARANTEES, NONE


class InvalidJobConfig(ValueError):
    pass


GUARANTEE_NAMES = {
    "none": NONE,
    "at-least-once": "at_least_once",
    "at_least_once": "at_least_once",
    "exactly-once": EXACTLY_ONCE,
    "exactly_once": EXACTLY_ONCE,
}


def parse_guarantee(name: str) -> str:
    try:
        return GUARANTEE_NAMES[name.lower()]
    except KeyError:
        raise InvalidJobConfig(f"unknown guarantee {name!r}; use one of {sorted(GUARANTEE_NAMES)}") from None


@dataclass
class JobConfig:
    dag_factory: str
    config: dict = field(default_factory=dict)
    name: str = "job"
    guarantee: str = NONE
    snapshot_interval_ms: int = 0
    snapshot_timeout_s: float = DEFAULT_SNAPSHOT_TIMEOUT_S
    timeout_s: float = 600.0

    def __post_init__(self):
        self.guarantee = parse_guarantee(self.guarantee)
        if ":" not in self.dag_factory:
            raise InvalidJobConfig("dag_factory must look like 'package.module:function'")
        if self.snapshot_interval_ms < 0:
            raise InvalidJobConfig("snapshot_interval_ms must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "JobConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidJobConfig(f"unknown job config fields: {sorted(unknown)}")
        if "dag_factory" not in d:
            raise InvalidJobConfig("job config needs a dag_factory")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "JobConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dag_factory": self.dag_factory,
            "config": self.config,
            "guarantee": self.guarantee,
            "snapshot_interval_ms": self.snapshot_interval_ms,
            "snapshot_timeout_s": self.snapshot_timeout_s,
            "timeout_s": self.timeout_s,
        }

    @property
    def snapshots_enabled(self) -> bool:
        return self.guarantee != NONE and self.snapshot_interval_ms > 0

    def build_dag(self) -> DagSpec:
        module_name, _, func_name = self.dag_factory.partition(":")
        try:
            func = getattr(importlib.import_module(module_name), func_name)
        except (ImportError, AttributeError) as e:
            raise InvalidJobConfig(f"cannot load dag factory {self.dag_factory!r}: {e}") from e
        dag = func(self.config)
        if not isinstance(dag, DagSpec):
            raise InvalidJobConfig(f"{self.dag_factory} returned {type(dag).__name__}, not a DagSpec")
        return dag


assert set(GUARANTEE_NAMES.values()) <= set(GUARANTEES)


# ------------------------------------------------------------------ factories


class _NexmarkSource:
    def __init__(self, generator, start_wall, cooperative, source_partitions):
        self.generator = generator
        self.start_wall = start_wall
        self.cooperative = cooperative
        self.source_partitions = source_partitions

    def __call__(self):
        from ..nexmark.generator import NexmarkSourceP

        return NexmarkSourceP(self.generator, self.start_wall, cooperative=self.cooperative,
                              source_partitions=self.source_partitions)


class _LatencySink:
    def __init__(self, start_wall, warmup_ms, until_ms):
        self.start_wall = start_wall
        self.warmup_ms = warmup_ms
        self.until_ms = until_ms

    def __call__(self):
        from ..nexmark.measure import LatencySinkP

        return LatencySinkP(None, start_wall=self.start_wall, warmup_ms=self.warmup_ms,
                            until_ms=self.until_ms)


class _TxnSink:
    def __init__(self, path):
        self.path = path

    def __call__(self):
        return TransactionalSinkP(self.path)


def nexmark_dag(config: dict) -> DagSpec:
    """A NEXMark query over the paced generator.

    Config keys: ``query``, ``generator`` (GeneratorConfig fields),
    ``params`` (QueryParams fields), ``start_wall`` (epoch seconds at which
    event time 0 occurs), ``sink`` (``{"kind": "latency"}`` or
    ``{"kind": "txn", "path": ...}``), ``cooperative_source``,
    ``source_parallelism`` and ``source_partitions``.
    """
    from ..nexmark.model import GeneratorConfig
    from ..nexmark.queries import QueryParams, build_query

    gen = GeneratorConfig.from_dict(config.get("generator", {}))
    params = QueryParams(**config.get("params", {}))
    start_wall = float(config["start_wall"])
    cooperative = bool(config.get("cooperative_source", False))
    source = Sources.custom(
        _NexmarkSource(gen, start_wall, cooperative, int(config.get("source_partitions", 16))), "stream",
        name="nexmark", blocking=not cooperative, local_parallelism=int(config.get("source_parallelism", 1)),
    )
    sink_cfg = config.get("sink", {"kind": "latency"})
    kind = sink_cfg.get("kind", "latency")
    if kind == "latency":
        sink = Sinks.custom(_LatencySink(start_wall, gen.warmup_s * 1000.0, gen.duration_s * 1000.0), name="latency-sink")
    elif kind == "txn":
        sink = Sinks.custom(_TxnSink(sink_cfg["path"]), name="txn-sink")
    else:
        raise InvalidJobConfig(f"unknown sink kind {kind!r}")
    return build_query(config.get("query", "q5"), source, sink, params).compile()
