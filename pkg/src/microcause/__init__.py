"""Root-cause analysis for microservice latency graphs.

The toolkit reconstructs the RPC dependency tree from span traces, derives a
causal DAG over per-RPC latencies and per-service resource metrics, fits one
small conditional VAE per service wired along that DAG, and answers
counterfactual queries ("would the frontend tail have met its target had this
service's metrics been normal?") to rank root causes of tail-latency
violations.  A deterministic cluster simulator provides spans, metrics,
injected faults, and actuation effects, and doubles as the ground-truth
oracle for the benchmark harness.
"""

__version__ = "0.1.0"
