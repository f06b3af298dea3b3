"""Desk-scale audio scene generation sandbox.

Structured multi-view captions, a small reverse-mode autodiff core, a
conditional flow-matching generator over synthetic latents, an expert-track
mixing baseline, objective metrics, paired nonparametric statistics, and an
LLM endpoint client for prompt refinement and acoustic-fidelity judging.
"""

__version__ = "0.1.0"

SCHEMA_VERSIONS = {
    "checkpoint": "diffcore-v1",
    "embedding": "emb-v1",
    "task": "task-v1",
    "manifest": "manifest-v1",
    "metrics": "metrics-v1",
    "stats": "stats-v1",
    "report": "report-v1",
}
