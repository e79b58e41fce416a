"""kvlab: a desk-scale laboratory for KV-cache eviction and head gating."""

__version__ = "0.1.0"
