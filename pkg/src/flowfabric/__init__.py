"""flowfabric: a self-hosted automation fabric for instrument-to-compute flows.

Flows are acyclic graphs of actions (transfer, compute, search, review)
executed by an orchestration service that drives uniform asynchronous
action providers with exponential-backoff polling. File-event triggers
batch detector output into flow runs, and the metrics module computes
per-step runtime/overhead breakdowns from run event logs.
"""

__version__ = "0.1.0"
