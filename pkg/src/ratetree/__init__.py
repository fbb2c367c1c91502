"""ratetree: congestion-control policy distillation toolkit.

Simulates bottleneck links in monitor intervals, trains a neural
rate-control teacher with PPO, distills it into typed symbolic decision
trees, partitions network conditions into branches with per-branch trees,
and benchmarks the results against an AIMD baseline.
"""

__version__ = "0.1.0"
