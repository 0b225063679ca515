"""slicectl: declarative multi-domain, multi-cluster slice orchestration.

A single YAML slice descriptor is parsed, validated, placed onto registered
deployment domains, compiled into a dependency-ordered task graph, and
executed by a discrete-event reconciler that drives per-node and per-cluster
digital-twin state machines over simulated infrastructure backends.
"""

__version__ = "0.1.0"
