"""harness.py - scenario runner, per-second traces, metrics, baselines.

A Scenario is a piecewise schedule of link configs over a fixed horizon.
run_trace drives one sender across the schedule MI by MI, carrying queue and
observation state over segment changes, and buckets the fluid counters into
per-second samples (an MI straddling a bucket edge is attributed
proportionally, which is exact for a fluid link).  Metrics follow the
per-second samples, with the ideal line taken from the scheduled capacity.

The AIMD baseline halves its rate on any lost packet: a rate controller
cannot tell random loss from queue overflow, and that misreading is exactly
what the lossy comparison is probing.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import symtree as st
from .netsim import (
    HISTORY_LEN, MIN_RATE_PPS, LinkState, NetworkConfig, ObsHistory,
    apply_action, compute_observation, mbps_to_pps, pps_to_mbps, step_mi,
)

TRACE_HEADER = ("t_sec", "throughput_mbps", "send_rate_pps",
                "mean_latency_s", "loss_frac")

# single-condition sweeps around the defaults; bandwidth values are Mbps
SWEEP_DEFAULTS = NetworkConfig(bandwidth=2500.0, latency=0.03,
                               queue_size=1000.0, loss_rate=0.0)
SWEEP_VALUES = {
    "bandwidth": [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
    "latency": [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
    "queue": [2.0, 10.0, 50.0, 100.0, 500.0, 1000.0, 5000.0],
    "loss": [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08],
}


# --- scenarios -----------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    schedule: list            # [(start_sec, NetworkConfig)], starts ascending
    duration: float           # seconds
    seed: int = 0

    def __post_init__(self):
        if not self.schedule:
            raise ValueError("schedule must have at least one segment")
        starts = [s for s, _ in self.schedule]
        if starts[0] != 0.0:
            raise ValueError(f"first segment must start at 0, got {starts[0]}")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("segment starts must be strictly increasing")
        if starts[-1] >= self.duration:
            raise ValueError("last segment starts past the horizon")

    def segments(self) -> list:
        """[(start, end, config)] covering [0, duration]."""
        starts = [s for s, _ in self.schedule] + [self.duration]
        return [(starts[i], starts[i + 1], cfg)
                for i, (_, cfg) in enumerate(self.schedule)]

    def capacity_at(self, t: float) -> float:
        """Scheduled capacity in pps at time t."""
        for start, end, cfg in self.segments():
            if start <= t < end:
                return cfg.bandwidth
        return self.schedule[-1][1].bandwidth


def scenario_lossy(seed: int = 0) -> Scenario:
    cfg = NetworkConfig(bandwidth=2500.0, latency=0.03, queue_size=1000.0,
                        loss_rate=0.02)
    return Scenario("lossy", [(0.0, cfg)], duration=25.0, seed=seed)


def scenario_oscillating(seed: int = 0) -> Scenario:
    capacities_mbps = [20.0, 40.0, 20.0, 40.0, 20.0]
    schedule = [
        (5.0 * i, NetworkConfig(bandwidth=mbps_to_pps(mbps), latency=0.03,
                                queue_size=1000.0, loss_rate=0.0))
        for i, mbps in enumerate(capacities_mbps)
    ]
    return Scenario("oscillating", schedule, duration=25.0, seed=seed)


def scenario_sweep(condition: str, values=None, seed: int = 0) -> list:
    """One constant scenario per value, varying a single condition.

    Bandwidth values are Mbps (converted here); the rest use native units.
    """
    if condition not in SWEEP_VALUES:
        raise ValueError(f"unknown sweep condition {condition!r}; "
                         f"one of {sorted(SWEEP_VALUES)}")
    values = SWEEP_VALUES[condition] if values is None else list(values)
    base = SWEEP_DEFAULTS
    out = []
    for v in values:
        fields_ = {"bandwidth": base.bandwidth, "latency": base.latency,
                   "queue_size": base.queue_size, "loss_rate": base.loss_rate}
        if condition == "bandwidth":
            fields_["bandwidth"] = mbps_to_pps(v)
        elif condition == "latency":
            fields_["latency"] = v
        elif condition == "queue":
            fields_["queue_size"] = v
        else:
            fields_["loss_rate"] = v
        cfg = NetworkConfig(**fields_)
        out.append(Scenario(f"sweep-{condition}-{v:g}", [(0.0, cfg)],
                            duration=25.0, seed=seed))
    return out


# --- trace + metrics -----------------------------------------------------------

@dataclass
class TraceRecord:
    t_sec: np.ndarray                 # bucket start times, 0..duration-1
    throughput_mbps: np.ndarray
    send_rate_pps: np.ndarray
    mean_latency_s: np.ndarray
    loss_frac: np.ndarray
    ideal_capacity_mbps: np.ndarray   # scheduled capacity per bucket

    def __len__(self):
        return len(self.t_sec)


@dataclass
class Metrics:
    mean_thpt: float                  # Mbps
    sum_thpt: float
    delta_opt_sq: float               # Mbps^2 vs the scheduled capacity line
    link_utilization: float
    flops: int = None
    per_decision_runtime: float = None

    def to_json(self) -> dict:
        return {"mean_thpt": self.mean_thpt, "sum_thpt": self.sum_thpt,
                "delta_opt_sq": self.delta_opt_sq,
                "link_utilization": self.link_utilization,
                "flops": self.flops,
                "per_decision_runtime": self.per_decision_runtime}


def compute_metrics(trace: TraceRecord, flops: int = None,
                    per_decision_runtime: float = None) -> Metrics:
    thpt = trace.throughput_mbps
    cap = trace.ideal_capacity_mbps
    return Metrics(
        mean_thpt=float(thpt.mean()),
        sum_thpt=float(thpt.sum()),
        delta_opt_sq=float(((thpt - cap) ** 2).mean()),
        link_utilization=float(thpt.mean() / cap.mean()),
        flops=flops,
        per_decision_runtime=per_decision_runtime,
    )


def save_trace(trace: TraceRecord, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_HEADER)
        for i in range(len(trace)):
            w.writerow([repr(float(col[i])) for col in
                        (trace.t_sec, trace.throughput_mbps,
                         trace.send_rate_pps, trace.mean_latency_s,
                         trace.loss_frac)])


def load_trace(path: str, scenario: Scenario = None) -> TraceRecord:
    """Read a trace CSV; the capacity line is rebuilt from `scenario` if given."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if rows[0] != list(TRACE_HEADER):
        raise ValueError(f"unexpected trace header {rows[0]!r}")
    cols = np.array([[float(v) for v in row] for row in rows[1:]]).T
    if scenario is not None:
        cap = np.array([pps_to_mbps(scenario.capacity_at(t + 0.5))
                        for t in cols[0]])
    else:
        cap = np.full(cols.shape[1], np.nan)
    return TraceRecord(t_sec=cols[0], throughput_mbps=cols[1],
                       send_rate_pps=cols[2], mean_latency_s=cols[3],
                       loss_frac=cols[4], ideal_capacity_mbps=cap)


# --- baseline policies -----------------------------------------------------------

class AimdPolicy:
    """Additive increase on clean MIs, halve on any loss.

    Random loss is indistinguishable from congestion at the sender, so the
    rule reacts to both; that conflation is the classic AIMD failure mode on
    lossy links."""

    def __init__(self, additive_pps: float = 10.0, decrease_factor: float = 0.5):
        self.additive_pps = additive_pps
        self.decrease_factor = decrease_factor

    def next_rate(self, rate: float, last_stats) -> float:
        if last_stats is None:
            return rate
        if last_stats.lost > 0:
            return max(rate * self.decrease_factor, MIN_RATE_PPS)
        return rate + self.additive_pps


def aimd_policy(additive_pps: float = 10.0,
                decrease_factor: float = 0.5) -> AimdPolicy:
    return AimdPolicy(additive_pps, decrease_factor)


class IdealPolicy:
    """Oracle that pins the send rate to the scheduled capacity."""


class FixedRatePolicy:
    """Pins the send rate to a constant; handy for analytic trace checks."""

    def __init__(self, rate_pps: float):
        self.rate_pps = rate_pps


def _tree_like(policy) -> bool:
    return isinstance(policy, (st.ActionNode, st.ConditionNode))


def run_trace(scenario: Scenario, policy,
              history_len: int = HISTORY_LEN,
              init_rate_frac: float = 0.3):
    """Drive `policy` across the schedule; returns (TraceRecord, Metrics).

    Accepts a symbolic tree, a BranchedPolicy, a TeacherPolicy, AimdPolicy,
    IdealPolicy, FixedRatePolicy, or a bare callable mapping a flat (3k,)
    observation vector to an action in [-1, 1].  Queue state, the observation
    window, and the policy's internal state persist across segment changes:
    the sender does not know the link moved under it.
    """
    from .branching import BranchedPolicy   # local import, avoids a cycle

    rng = np.random.default_rng(scenario.seed)
    link = LinkState()
    history = ObsHistory(history_len)
    agent_state = st.AgentState()
    prev_stats = None

    if hasattr(policy, "state_dict"):
        from .teacher import policy_forward
        act = lambda: policy_forward(policy, history.flat())
    elif isinstance(policy, BranchedPolicy):
        act = lambda: policy.act(history, agent_state)
    elif _tree_like(policy):
        act = lambda: st.eval_tree(policy, history, agent_state)
    elif isinstance(policy, (AimdPolicy, IdealPolicy, FixedRatePolicy)):
        act = None
    elif callable(policy):
        act = lambda: float(policy(history.flat()))
    else:
        raise TypeError(f"unsupported policy type {type(policy).__name__}")

    n_buckets = int(round(scenario.duration))
    acked_b = np.zeros(n_buckets)
    sent_b = np.zeros(n_buckets)
    lost_b = np.zeros(n_buckets)
    lat_acked = np.zeros(n_buckets)     # latency weighted by acked volume
    lat_time = np.zeros(n_buckets)      # fallback weight: wall time
    rate_time = np.zeros(n_buckets)
    cap_time = np.zeros(n_buckets)
    time_b = np.zeros(n_buckets)

    segments = scenario.segments()
    rate = init_rate_frac * segments[0][2].bandwidth
    if isinstance(policy, FixedRatePolicy):
        rate = policy.rate_pps

    t = 0.0
    for start, end, cfg in segments:
        t = start
        while t < end - 1e-9:
            mi_dur = min(cfg.mi_duration(), end - t)
            if isinstance(policy, IdealPolicy):
                rate = cfg.bandwidth
            elif isinstance(policy, FixedRatePolicy):
                rate = policy.rate_pps
            elif isinstance(policy, AimdPolicy):
                rate = policy.next_rate(rate, prev_stats)
            else:
                rate = apply_action(rate, act(), MIN_RATE_PPS,
                                    2.0 * cfg.bandwidth)
            stats = step_mi(cfg, link, rate, mi_dur, rng)
            history.push(compute_observation(stats, prev_stats))
            prev_stats = stats

            # fluid counters spread over the per-second buckets the MI spans
            lo = t
            while lo < t + mi_dur - 1e-12:
                b = min(int(lo), n_buckets - 1)
                hi = min(t + mi_dur, float(b + 1))
                frac = (hi - lo) / mi_dur
                acked_b[b] += stats.acked * frac
                sent_b[b] += stats.sent * frac
                lost_b[b] += stats.lost * frac
                lat_acked[b] += stats.mean_latency * stats.acked * frac
                lat_time[b] += stats.mean_latency * (hi - lo)
                rate_time[b] += rate * (hi - lo)
                cap_time[b] += cfg.bandwidth * (hi - lo)
                time_b[b] += hi - lo
                lo = hi
            t += mi_dur

    with np.errstate(invalid="ignore"):
        lat = np.where(acked_b > 0, lat_acked / acked_b, lat_time / time_b)
    trace = TraceRecord(
        t_sec=np.arange(n_buckets, dtype=np.float64),
        throughput_mbps=pps_to_mbps(1.0) * acked_b / time_b,
        send_rate_pps=rate_time / time_b,
        mean_latency_s=lat,
        loss_frac=lost_b / np.maximum(sent_b, 1.0),
        ideal_capacity_mbps=pps_to_mbps(1.0) * cap_time / time_b,
    )
    return trace, compute_metrics(trace, flops=_policy_flops(policy,
                                                             history_len))


def _policy_flops(policy, history_len: int):
    from .branching import BranchedPolicy
    if _tree_like(policy):
        return st.count_flops(policy, history_len)
    if isinstance(policy, BranchedPolicy):
        return policy.flops_report()["flops"]
    if hasattr(policy, "state_dict"):
        from .teacher import forward_flops
        return forward_flops(policy)
    if isinstance(policy, AimdPolicy):
        return 2    # one compare, one add or multiply
    return None


# --- efficiency ------------------------------------------------------------------

def measure_efficiency(policy, n_decisions: int = 100_000,
                       history_len: int = HISTORY_LEN, seed: int = 0):
    """(flops, per-decision runtime in seconds, median over n_decisions).

    Decisions are timed one by one on a fixed pool of seeded observation
    windows; the median resists scheduler noise.
    """
    from .branching import BranchedPolicy

    rng = np.random.default_rng(seed)
    pool_flat = [rng.uniform(-1.0, 3.0, 3 * history_len) for _ in range(256)]
    pool_win = [[tuple(row) for row in f.reshape(-1, 3)] for f in pool_flat]

    if _tree_like(policy):
        state = st.AgentState()
        calls = [(st.eval_tree, (policy, w, state)) for w in pool_win]
    elif isinstance(policy, BranchedPolicy):
        state = st.AgentState()
        calls = [(policy.act, (f, state)) for f in pool_flat]
    elif hasattr(policy, "state_dict"):
        from .teacher import policy_forward
        calls = [(policy_forward, (policy, f)) for f in pool_flat]
    elif isinstance(policy, AimdPolicy):
        stats_like = None
        calls = [(policy.next_rate, (500.0, stats_like))]
    else:
        raise TypeError(f"unsupported policy type {type(policy).__name__}")

    times = np.empty(n_decisions)
    m = len(calls)
    for i in range(n_decisions):
        fn, args = calls[i % m]
        t0 = time.perf_counter_ns()
        fn(*args)
        times[i] = time.perf_counter_ns() - t0
    return _policy_flops(policy, history_len), float(np.median(times)) * 1e-9
