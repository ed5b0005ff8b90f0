"""tailstream: an embeddable stream-processing engine built for tail latency."""

__version__ = "0.1.0"
