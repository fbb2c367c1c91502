"""netsim.py - fluid-model link simulator driven in monitor intervals (MIs).

A sender pushes packets at a constant rate for the length of one MI; the link
services them at its bandwidth, excess accumulates in a drop-tail queue, queue
overflow is counted as congestion loss, and every serviced packet is dropped
independently with the configured random-loss probability.  Queue evolution
inside an MI is piecewise linear, so each MI is integrated exactly in a few
phase steps instead of being tick-stepped.

Per-packet latency is propagation delay plus queue_occupancy/bandwidth at the
moment of service.  Accounting is windowed: an MI's `acked` counts packets
serviced during that MI, so `sent = acked + lost + (queue growth)` holds
exactly (packets left in the queue at MI end are neither acked nor lost yet).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

PKT_BYTES = 1500
PKT_BITS = PKT_BYTES * 8

# Per-MI reward = C_THPT * throughput_pps - C_LAT * mean_latency_s - C_LOSS * loss_frac
DEFAULT_REWARD_COEFFS = (10.0, 1000.0, 2000.0)

MIN_MI_SEC = 0.05
MIN_RATE_PPS = 1.0
SEND_RATIO_CAP = 100.0
RATE_DELTA = 0.025
HISTORY_LEN = 10
NEUTRAL_OBS = (0.0, 1.0, 1.0)
DEFAULT_EPISODE_MIS = 400

# Config ranges the teacher trains over (bandwidth pps, latency s, queue pkts,
# random loss fraction).  Queue is sampled log-uniform: the interesting regimes
# (a few packets vs thousands) are spread over decades.
BASELINE_RANGES = {
    "bandwidth": (100.0, 500.0),
    "latency": (0.05, 0.5),
    "queue": (2.0, 2981.0),
    "loss": (0.0, 0.05),
}


def mbps_to_pps(mbps: float) -> float:
    return mbps * 1e6 / PKT_BITS


def pps_to_mbps(pps: float) -> float:
    return pps * PKT_BITS / 1e6


@dataclass(frozen=True)
class NetworkConfig:
    """Static link parameters for one simulated connection."""

    bandwidth: float          # service rate, packets/sec
    latency: float            # one-way propagation delay, sec
    queue_size: float         # drop-tail queue capacity, packets
    loss_rate: float          # iid random loss applied to serviced packets

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.latency <= 0:
            raise ValueError(f"latency must be positive, got {self.latency}")
        if self.queue_size < 1:
            raise ValueError(f"queue_size must be >= 1 packet, got {self.queue_size}")
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError(f"loss_rate must be in [0, 1), got {self.loss_rate}")

    def mi_duration(self) -> float:
        # One RTT estimate (2x propagation), floored so tiny-latency links
        # still aggregate enough packets for stable statistics.
        return max(2.0 * self.latency, MIN_MI_SEC)


@dataclass
class LinkState:
    """Mutable bottleneck state carried across MIs."""

    queue: float = 0.0                      # packets currently enqueued
    min_base_latency: float | None = None   # lowest per-MI mean latency seen
    last_mean_latency: float | None = None  # carried forward when an MI acks nothing


@dataclass
class MiStats:
    """Counters for one monitor interval."""

    sent: float
    acked: float
    lost: float
    lost_congestion: float
    lost_random: float
    mean_latency: float
    min_base_latency: float
    queue_start: float
    queue_end: float
    send_rate: float
    duration: float

    @property
    def throughput(self) -> float:
        return self.acked / self.duration

    @property
    def loss_fraction(self) -> float:
        return self.lost / max(self.sent, 1.0)


def step_mi(config: NetworkConfig, state: LinkState, send_rate: float,
            duration: float, rng: np.random.Generator) -> MiStats:
    """Advance the link by one MI at a fixed send rate.

    Mutates `state` (queue occupancy, latency floor).  Fluid quantities are
    real-valued; the random-loss draw is binomial on the rounded serviced
    count, rescaled so conservation stays exact.
    """
    if send_rate <= 0:
        raise ValueError(f"send_rate must be positive, got {send_rate}")
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")

    lam = send_rate
    mu = config.bandwidth
    cap = config.queue_size
    q = state.queue
    q_start = q

    t = 0.0
    serviced = 0.0
    overflow = 0.0
    q_integral = 0.0   # integral of queue occupancy over the MI
    net = lam - mu
    while t < duration - 1e-15:
        rem = duration - t
        if net > 0:
            if q < cap:
                dt = min(rem, (cap - q) / net)
                q_integral += (q + 0.5 * net * dt) * dt
                serviced += mu * dt
                q += net * dt
            else:
                dt = rem
                q_integral += cap * dt
                serviced += mu * dt
                overflow += net * dt
        elif net < 0:
            if q > 0:
                dt = min(rem, q / -net)
                q_integral += (q + 0.5 * net * dt) * dt
                serviced += mu * dt
                q += net * dt
                if q < 1e-12:
                    q = 0.0
            else:
                dt = rem
                serviced += lam * dt
        else:
            dt = rem
            q_integral += q * dt
            serviced += (mu if q > 0 else lam) * dt
        t += dt

    sent = lam * duration
    lost_random = 0.0
    if config.loss_rate > 0.0 and serviced > 0.0:
        n = max(1, int(round(serviced)))
        draw = rng.binomial(n, config.loss_rate)
        lost_random = serviced * (draw / n)
    acked = serviced - lost_random

    # Mean latency over serviced packets: wait(t) = q(t)/mu weighted by the
    # service rate mu, which collapses to integral(q)/serviced.
    if serviced > 0:
        mean_latency = config.latency + q_integral / serviced
    else:
        mean_latency = state.last_mean_latency if state.last_mean_latency is not None \
            else config.latency

    state.queue = q
    state.last_mean_latency = mean_latency
    if state.min_base_latency is None or mean_latency < state.min_base_latency:
        state.min_base_latency = mean_latency

    return MiStats(
        sent=sent,
        acked=acked,
        lost=overflow + lost_random,
        lost_congestion=overflow,
        lost_random=lost_random,
        mean_latency=mean_latency,
        min_base_latency=state.min_base_latency,
        queue_start=q_start,
        queue_end=q,
        send_rate=send_rate,
        duration=duration,
    )


def compute_observation(curr: MiStats, prev: MiStats | None) -> tuple[float, float, float]:
    """Scale-free (latency_inflation, latency_ratio, send_ratio) for one MI."""
    if prev is None or prev.mean_latency <= 0:
        inflation = 0.0
    else:
        inflation = (curr.mean_latency - prev.mean_latency) / prev.mean_latency
    ratio = curr.mean_latency / curr.min_base_latency
    send_ratio = min(curr.sent / max(curr.acked, 1.0), SEND_RATIO_CAP)
    return (inflation, ratio, send_ratio)


def compute_reward(stats: MiStats, coeffs=DEFAULT_REWARD_COEFFS) -> float:
    c_thpt, c_lat, c_loss = coeffs
    return (c_thpt * stats.throughput
            - c_lat * stats.mean_latency
            - c_loss * stats.loss_fraction)


def ideal_return(cfg: NetworkConfig, coeffs=DEFAULT_REWARD_COEFFS) -> float:
    """Analytic per-MI reward of a sender holding rate exactly at capacity.

    Throughput (1-p)*bandwidth, latency at the propagation base (empty queue),
    loss fraction p.  Upper bound for any steady policy on the link; used to
    normalize measured returns into a score comparable across conditions.
    """
    c_thpt, c_lat, c_loss = coeffs
    p = cfg.loss_rate
    return (c_thpt * cfg.bandwidth * (1.0 - p)
            - c_lat * cfg.latency
            - c_loss * p)


def apply_action(rate: float, action: float, min_rate: float = MIN_RATE_PPS,
                 max_rate: float = float("inf"), delta: float = RATE_DELTA) -> float:
    """Map a policy action in [-1, 1] to a multiplicative rate change."""
    a = min(1.0, max(-1.0, action))
    if a >= 0:
        rate = rate * (1.0 + delta * a)
    else:
        rate = rate / (1.0 - delta * a)
    return min(max(rate, min_rate), max_rate)


class ObsHistory:
    """Sliding window of the last k observations, oldest first.

    Flattened layout is step-major: column 3*i + j is statistic j of history
    step i, with i = k-1 the most recent MI.  The window starts filled with
    the neutral observation (0, 1, 1).
    """

    __slots__ = ("k", "window")

    def __init__(self, k: int = HISTORY_LEN):
        self.k = k
        self.window = [list(NEUTRAL_OBS) for _ in range(k)]

    def push(self, obs) -> None:
        self.window.pop(0)
        self.window.append([obs[0], obs[1], obs[2]])

    def flat(self) -> np.ndarray:
        return np.asarray(self.window, dtype=np.float64).reshape(-1)

    def series(self, j: int) -> list[float]:
        return [row[j] for row in self.window]


class LinkEnv:
    """Episode wrapper: MI stepping, observation window, reward, rate clamp."""

    def __init__(self, config: NetworkConfig, seed: int,
                 episode_mis: int = DEFAULT_EPISODE_MIS,
                 history_len: int = HISTORY_LEN,
                 reward_coeffs=DEFAULT_REWARD_COEFFS,
                 init_rate: float | None = None,
                 init_rate_frac: tuple[float, float] = (0.05, 0.3),
                 max_rate: float | None = None):
        self.config = config
        self.seed = seed
        self.episode_mis = episode_mis
        self.history_len = history_len
        self.reward_coeffs = reward_coeffs
        self.init_rate = init_rate
        self.init_rate_frac = init_rate_frac
        self.max_rate = 2.0 * config.bandwidth if max_rate is None else max_rate
        self.rng = np.random.default_rng(seed)
        self.history: ObsHistory | None = None

    def reset(self) -> ObsHistory:
        self.link = LinkState()
        self.history = ObsHistory(self.history_len)
        self.prev_stats: MiStats | None = None
        self.mi_index = 0
        if self.init_rate is not None:
            self.rate = self.init_rate
        else:
            lo, hi = self.init_rate_frac
            self.rate = self.rng.uniform(lo, hi) * self.config.bandwidth
        return self.history

    def step(self, action: float):
        """Apply one action, simulate one MI.  Returns (history, reward, done, stats)."""
        self.rate = apply_action(self.rate, action, MIN_RATE_PPS, self.max_rate)
        stats = step_mi(self.config, self.link, self.rate,
                        self.config.mi_duration(), self.rng)
        obs = compute_observation(stats, self.prev_stats)
        self.history.push(obs)
        self.prev_stats = stats
        reward = compute_reward(stats, self.reward_coeffs)
        self.mi_index += 1
        done = self.mi_index >= self.episode_mis
        return self.history, reward, done, stats


def sample_config(rng: np.random.Generator, ranges=None) -> NetworkConfig:
    """Draw one training config; queue log-uniform, the rest uniform."""
    r = dict(BASELINE_RANGES if ranges is None else ranges)
    bw = rng.uniform(*r["bandwidth"])
    lat = rng.uniform(*r["latency"])
    q_lo, q_hi = r["queue"]
    queue = math.exp(rng.uniform(math.log(q_lo), math.log(q_hi)))
    loss = rng.uniform(*r["loss"])
    return NetworkConfig(bandwidth=bw, latency=lat, queue_size=queue, loss_rate=loss)


def run_episodes_batch(envs: list[LinkEnv], batch_policy, collect=None) -> np.ndarray:
    """Run envs of equal length in lockstep.

    batch_policy maps an (n_envs, 3k) observation matrix to an (n_envs,)
    action vector; `collect(env_idx, mi_idx, flat_obs, action, reward)` is
    invoked per step when given.  Returns mean per-MI reward per env.
    """
    n = len(envs)
    if n == 0:
        return np.zeros(0)
    mis = envs[0].episode_mis
    for env in envs:
        if env.episode_mis != mis:
            raise ValueError("lockstep batch requires equal episode lengths")
        env.reset()
    totals = np.zeros(n)
    for mi in range(mis):
        obs_mat = np.stack([env.history.flat() for env in envs])
        actions = np.asarray(batch_policy(obs_mat), dtype=np.float64)
        for i, env in enumerate(envs):
            _, reward, _, _ = env.step(float(actions[i]))
            totals[i] += reward
            if collect is not None:
                collect(i, mi, obs_mat[i], float(actions[i]), reward)
    return totals / mis


def save_config(config: NetworkConfig, path: str, episode_mis: int = DEFAULT_EPISODE_MIS,
                seed: int = 0) -> None:
    payload = {
        "bandwidth_pps": config.bandwidth,
        "latency_s": config.latency,
        "queue_packets": config.queue_size,
        "loss_rate": config.loss_rate,
        "episode_mis": episode_mis,
        "seed": seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_config(path: str) -> tuple[NetworkConfig, int, int]:
    """Read a config JSON; returns (config, episode_mis, seed)."""
    with open(path) as fh:
        payload = json.load(fh)
    config = NetworkConfig(
        bandwidth=float(payload["bandwidth_pps"]),
        latency=float(payload["latency_s"]),
        queue_size=float(payload["queue_packets"]),
        loss_rate=float(payload["loss_rate"]),
    )
    return config, int(payload.get("episode_mis", DEFAULT_EPISODE_MIS)), int(payload.get("seed", 0))
