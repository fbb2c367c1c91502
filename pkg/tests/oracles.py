"""Independent reference implementations used only by tests.

Each oracle recomputes a quantity the package derives analytically, using a
dumber and slower method: per-packet event simulation on a millisecond grid,
exhaustive partition search for kmeans, a linear scan for nearest neighbours,
and direct least squares for the history-slope operator.
"""

from __future__ import annotations

import itertools

import numpy as np

from ratetree.netsim import NetworkConfig


def event_sim(config: NetworkConfig, rates, mi_duration: float, seed: int = 0,
              tick: float = 0.001):
    """Per-packet discrete-event link sim on a fixed tick grid.

    `rates` is one send rate per MI.  Packets are integers: send/service
    credit accumulates per tick and releases whole packets.  Returns
    (acked_per_mi, dropped_per_mi, queue_end).
    """
    rng = np.random.default_rng(seed)
    queue = 0
    send_credit = 0.0
    service_credit = 0.0
    acked = []
    dropped = []
    ticks_per_mi = int(round(mi_duration / tick))
    for rate in rates:
        mi_acked = 0
        mi_dropped = 0
        for _ in range(ticks_per_mi):
            send_credit += rate * tick
            while send_credit >= 1.0:
                send_credit -= 1.0
                if queue < config.queue_size:
                    queue += 1
                else:
                    mi_dropped += 1
            service_credit += config.bandwidth * tick
            while service_credit >= 1.0 and queue > 0:
                service_credit -= 1.0
                queue -= 1
                if config.loss_rate == 0.0 or rng.random() >= config.loss_rate:
                    mi_acked += 1
            if queue == 0:
                # a fluid server cannot bank idle capacity
                service_credit = 0.0
        acked.append(mi_acked)
        dropped.append(mi_dropped)
    return np.asarray(acked, dtype=float), np.asarray(dropped, dtype=float), queue


def brute_force_kmeans(points: np.ndarray, k: int):
    """Globally optimal k-means by enumerating all label assignments.

    Only feasible for tiny instances (<= 8 points).  Returns (inertia,
    labels) with clusters renumbered by ascending centroid.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    best_inertia = np.inf
    best_labels = None
    for assignment in itertools.product(range(k), repeat=n):
        labels = np.asarray(assignment)
        if len(set(assignment)) < k:
            continue
        inertia = 0.0
        for c in range(k):
            member = pts[labels == c]
            inertia += ((member - member.mean(axis=0)) ** 2).sum()
        if inertia < best_inertia - 1e-12:
            best_inertia = inertia
            best_labels = labels
    centroids = np.array([pts[best_labels == c].mean() for c in range(k)])
    order = np.argsort(centroids)
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    return best_inertia, remap[best_labels]


def linear_scan_nn(train_x: np.ndarray, train_y: np.ndarray, query: np.ndarray) -> int:
    """1-nearest-neighbour label by explicit distance loop."""
    best_d = np.inf
    best_label = None
    for row, label in zip(train_x, train_y):
        d = float(np.sum((row - query) ** 2))
        if d < best_d:
            best_d = d
            best_label = int(label)
    return best_label


def lstsq_slope(values) -> float:
    """Least-squares slope of y over x = 0..m-1 via the normal equations."""
    y = np.asarray(values, dtype=float)
    x = np.arange(len(y), dtype=float)
    a = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(coef[0])
