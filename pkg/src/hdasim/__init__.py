"""Analytical design-space exploration and serving simulation for
heterogeneous-dataflow LLM accelerators (systolic arrays + MAC trees)."""

__version__ = "0.1.0"
