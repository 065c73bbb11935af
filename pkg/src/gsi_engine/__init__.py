"""Domain-knowledge enhancement engine for GSI question answering.

Ships the full pipeline: instruction-record store, corpus segmentation,
vector retrieval, model gateway (live + deterministic stub), evaluation
metrics, SFT record factory, agent orchestration, eval harness, and the
HTTP service / CLI front ends.
"""

__version__ = "0.1.0"
