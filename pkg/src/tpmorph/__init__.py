"""Deterministic simulator for cross-instance tensor-parallelism
transformation in LLM serving: paged KV-cache migration, in-place weight
repartitioning, layer-staggered orchestration, a transformation-aware
cluster scheduler and a trace-driven discrete-event harness."""

__version__ = "0.1.0"
