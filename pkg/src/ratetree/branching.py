"""branching.py - context clustering and branched symbolic policies.

The baseline teacher is scored on a regular grid of network conditions, each
condition emulated for a fixed wall-clock window and normalized by its
analytic full-utilization return (see evaluate_grid).  The scores are
clustered with k-means (Lloyd + k-means++ seeding, restarts) into contexts,
one specialist teacher + distilled tree is trained per context, and at
inference a KNN decider over grid observation windows picks the branch,
smoothed against erratic bouncing by a sticky majority over the last W raw
labels.

Queue bounds are forced to the global range in every context: grid returns
show no usable trend against queue size, so queue never separates branches.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import symtree as st
from .netsim import (
    BASELINE_RANGES, NetworkConfig, run_episodes_batch,
    LinkEnv, ideal_return, sample_config,
)

GRID_STEPS = {"bandwidth": 50.0, "latency": 0.1, "loss": 0.01}
QUEUE_RATIO = float(np.exp(2.0))


# --- grid ---------------------------------------------------------------------

def queue_grid_values(lo: float = None, hi: float = None) -> list:
    """Geometric queue ladder: lo, lo*e^2, ... rounded, capped by hi."""
    lo = BASELINE_RANGES["queue"][0] if lo is None else lo
    hi = BASELINE_RANGES["queue"][1] if hi is None else hi
    vals = []
    q = float(lo)
    while round(q) < hi:
        vals.append(int(round(q)))
        q *= QUEUE_RATIO
    vals.append(int(round(hi)))
    return vals


def grid_conditions(ranges=None) -> list:
    """Cartesian grid over the baseline ranges; 1350 configs at defaults."""
    r = dict(BASELINE_RANGES if ranges is None else ranges)
    bws = np.arange(r["bandwidth"][0], r["bandwidth"][1] + 1e-9,
                    GRID_STEPS["bandwidth"])
    lats = np.arange(r["latency"][0], r["latency"][1] - 1e-9,
                     GRID_STEPS["latency"])
    losses = np.arange(r["loss"][0], r["loss"][1] + 1e-9, GRID_STEPS["loss"])
    queues = queue_grid_values(*r["queue"])
    out = []
    for bw in bws:
        for lat in lats:
            for loss in losses:
                for q in queues:
                    out.append(NetworkConfig(bandwidth=round(float(bw), 10),
                                             latency=round(float(lat), 10),
                                             queue_size=float(q),
                                             loss_rate=round(float(loss), 10)))
    return out


@dataclass
class GridResults:
    configs: list                  # NetworkConfig per grid point
    returns: np.ndarray            # (n_configs,) normalized score, see evaluate_grid
    raw_returns: np.ndarray        # (n_configs,) mean per-MI return over episodes
    rows_X: np.ndarray             # (m, 3k) subsampled observation windows
    rows_config: np.ndarray        # (m,) config index per row
    episodes_per_config: int
    history_len: int
    seed: int
    duration_sec: float = None     # wall-clock window, None if episode_mis forced

    def __len__(self):
        return len(self.configs)


def evaluate_grid(policy, configs, episodes_per_config: int = 3, seed: int = 0,
                  duration_sec: float = 30.0, episode_mis: int = None,
                  rows_per_episode: int = 12, chunk: int = 1024) -> GridResults:
    """Score `policy` on every config; keep subsampled observation windows.

    Each config is emulated for a fixed wall-clock window of `duration_sec`
    (so a 0.45 s link gets ~33 MIs where a 0.05 s link gets 300), and the mean
    per-MI return is divided by the config's analytic full-utilization return.
    The resulting dimensionless score is what `returns` holds and what the
    clustering stage consumes: with the per-MI rate step capped at 2.5%, slow
    links cannot finish ramping inside the window, which is exactly the kind
    of conditions a specialist branch exists for.  Pass `episode_mis` to force
    one episode length for every config instead (raw scale, mostly for tests).

    `policy` is either a batch callable ((n, 3k) -> (n,)) or a TeacherPolicy.
    """
    if hasattr(policy, "state_dict"):      # a TeacherPolicy, not a callable
        from .teacher import batch_actions
        net = policy
        policy = lambda X: batch_actions(net, X)
    if episode_mis is not None:
        mis_of = [int(episode_mis)] * len(configs)
        duration_sec = None
    else:
        mis_of = [max(1, round(duration_sec / c.mi_duration())) for c in configs]

    rng = np.random.default_rng(seed)
    jobs = [(ci, ep) for ci in range(len(configs))
            for ep in range(episodes_per_config)]
    env_seeds = rng.integers(0, 2**31 - 1, size=len(jobs))
    keep = [set(rng.choice(mis_of[ci],
                           size=min(rows_per_episode, mis_of[ci]),
                           replace=False).tolist())
            for ci, _ in jobs]

    # lockstep batching needs equal episode lengths: group jobs by MI count
    groups = {}
    for j, (ci, _) in enumerate(jobs):
        groups.setdefault(mis_of[ci], []).append(j)

    totals = np.zeros(len(configs))
    xs, xcfg = [], []
    hist_len = None
    for n_mis, idxs in sorted(groups.items()):
        for lo in range(0, len(idxs), chunk):
            batch = idxs[lo:lo + chunk]
            envs = [LinkEnv(configs[jobs[j][0]], seed=int(env_seeds[j]),
                            episode_mis=n_mis)
                    for j in batch]
            if hist_len is None:
                hist_len = envs[0].history_len

            def collect(i, mi, flat, action, reward):
                if mi in keep[batch[i]]:
                    xs.append(flat.copy())
                    xcfg.append(jobs[batch[i]][0])

            means = run_episodes_batch(envs, policy, collect)
            for i, j in enumerate(batch):
                totals[jobs[j][0]] += means[i]

    raw = totals / episodes_per_config
    if duration_sec is None:
        scores = raw
    else:
        denom = np.array([max(ideal_return(c), 1.0) for c in configs])
        scores = raw / denom
    return GridResults(
        configs=list(configs),
        returns=scores,
        raw_returns=raw,
        rows_X=np.asarray(xs) if xs else np.zeros((0, 0)),
        rows_config=np.asarray(xcfg, dtype=np.int64),
        episodes_per_config=episodes_per_config,
        history_len=hist_len or 0,
        seed=seed,
        duration_sec=duration_sec,
    )


def save_grid(grid: GridResults, path: str) -> None:
    doc = {
        "episodes_per_config": grid.episodes_per_config,
        "history_len": grid.history_len,
        "seed": grid.seed,
        "duration_sec": grid.duration_sec,
        "configs": [{"bandwidth": c.bandwidth, "latency": c.latency,
                     "queue_size": c.queue_size, "loss_rate": c.loss_rate}
                    for c in grid.configs],
        "returns": [repr(float(v)) for v in grid.returns],
        "raw_returns": [repr(float(v)) for v in grid.raw_returns],
        "rows_config": grid.rows_config.tolist(),
        "rows_X": [[repr(float(v)) for v in row] for row in grid.rows_X],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_grid(path: str) -> GridResults:
    with open(path) as f:
        doc = json.load(f)
    configs = [NetworkConfig(bandwidth=c["bandwidth"], latency=c["latency"],
                             queue_size=c["queue_size"],
                             loss_rate=c["loss_rate"])
               for c in doc["configs"]]
    rows = np.array([[float(v) for v in row] for row in doc["rows_X"]],
                    dtype=np.float64)
    if rows.size == 0:
        rows = rows.reshape(0, 0)
    return GridResults(
        configs=configs,
        returns=np.array([float(v) for v in doc["returns"]]),
        raw_returns=np.array([float(v) for v in doc["raw_returns"]]),
        rows_X=rows,
        rows_config=np.asarray(doc["rows_config"], dtype=np.int64),
        episodes_per_config=doc["episodes_per_config"],
        history_len=doc["history_len"],
        seed=doc["seed"],
        duration_sec=doc["duration_sec"],
    )


# --- k-means ------------------------------------------------------------------

@dataclass
class ClusterModel:
    centroids: np.ndarray        # (k,) or (k, d), ascending by first coord
    labels: np.ndarray           # (n,)
    inertia: float
    silhouette: float
    inertia_history: list = field(default_factory=list)


def _as_2d(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        return p.reshape(-1, 1)
    return p


def _kmeanspp(p: np.ndarray, k: int, rng) -> np.ndarray:
    n = p.shape[0]
    centers = np.empty((k, p.shape[1]))
    centers[0] = p[rng.integers(0, n)]
    d2 = ((p - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = p[rng.integers(0, n)]
            continue
        centers[j] = p[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((p - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(p: np.ndarray, centers: np.ndarray, max_iter: int):
    k = centers.shape[0]
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(p.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = p[labels == j]
            if members.size:
                centers[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point worst served
                worst = d2[np.arange(p.shape[0]), labels].argmax()
                centers[j] = p[worst]
    d2 = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(p.shape[0]), labels].sum())
    return centers, labels, inertia, history


def kmeans(points, k: int, seed: int = 0, n_init: int = 10,
           max_iter: int = 100) -> ClusterModel:
    p = _as_2d(points)
    n = p.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeanspp(p.copy(), k, rng)
        centers, labels, inertia, history = _lloyd(p, centers, max_iter)
        if best is None or inertia < best[2]:
            best = (centers, labels, inertia, history)
    centers, labels, inertia, history = best

    order = np.argsort(centers[:, 0], kind="stable")
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    centers = centers[order]
    labels = remap[labels]

    pts_1d = np.asarray(points).ndim == 1
    return ClusterModel(
        centroids=centers[:, 0] if pts_1d else centers,
        labels=labels,
        inertia=inertia,
        silhouette=silhouette_score(points, labels),
        inertia_history=history,
    )


def silhouette_score(points, labels) -> float:
    """Mean silhouette over all points; singleton clusters score 0."""
    p = _as_2d(points)
    labels = np.asarray(labels)
    n = p.shape[0]
    uniq = np.unique(labels)
    if uniq.size < 2 or n < 3:
        return 0.0
    dist = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=2))
    scores = np.zeros(n)
    masks = {c: labels == c for c in uniq}
    for i in range(n):
        own = masks[labels[i]]
        n_own = own.sum()
        if n_own <= 1:
            scores[i] = 0.0
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, masks[c]].mean() for c in uniq if c != labels[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def choose_k(points, k_max: int = 8, seed: int = 0, k_min: int = 2):
    """Silhouette-maximizing k in [k_min, k_max]; ties go to the smaller k.

    Returns (k, report) where report[k] = {"silhouette", "inertia"} so the
    elbow curve can be logged alongside the silhouette decision.
    """
    p = _as_2d(points)
    hi = min(k_max, p.shape[0] - 1)
    if hi < k_min:
        raise ValueError(f"need at least {k_min + 1} points, got {p.shape[0]}")
    report = {}
    best_k, best_s = None, -np.inf
    for k in range(k_min, hi + 1):
        model = kmeans(points, k, seed=seed + k)
        report[k] = {"silhouette": model.silhouette, "inertia": model.inertia}
        if model.silhouette > best_s:
            best_k, best_s = k, model.silhouette
    return best_k, report


# --- contexts -------------------------------------------------------------------

@dataclass
class BranchContext:
    branch: int
    return_centroid: float
    bandwidth: tuple
    latency: tuple
    queue: tuple
    loss: tuple

    def ranges(self) -> dict:
        return {"bandwidth": self.bandwidth, "latency": self.latency,
                "queue": self.queue, "loss": self.loss}

    def to_doc(self) -> dict:
        return {"branch": self.branch, "return_centroid": self.return_centroid,
                "bandwidth": list(self.bandwidth), "latency": list(self.latency),
                "queue": list(self.queue), "loss": list(self.loss)}

    @staticmethod
    def from_doc(doc) -> "BranchContext":
        return BranchContext(
            branch=doc["branch"], return_centroid=doc["return_centroid"],
            bandwidth=tuple(doc["bandwidth"]), latency=tuple(doc["latency"]),
            queue=tuple(doc["queue"]), loss=tuple(doc["loss"]))


def derive_contexts(grid: GridResults, model: ClusterModel) -> list:
    """Per-cluster min/max of each condition; queue forced to global bounds."""
    configs = grid.configs
    q_all = [c.queue_size for c in configs]
    q_bounds = (min(q_all), max(q_all))
    k = int(np.asarray(model.centroids).shape[0])
    out = []
    for c in range(k):
        members = [configs[i] for i in np.flatnonzero(model.labels == c)]
        if not members:
            raise ValueError(f"cluster {c} is empty; re-cluster with a "
                             f"different seed")
        centroid = np.asarray(model.centroids)[c]
        centroid = float(centroid if np.ndim(centroid) == 0 else centroid[0])
        out.append(BranchContext(
            branch=c,
            return_centroid=centroid,
            bandwidth=(min(m.bandwidth for m in members),
                       max(m.bandwidth for m in members)),
            latency=(min(m.latency for m in members),
                     max(m.latency for m in members)),
            queue=q_bounds,
            loss=(min(m.loss_rate for m in members),
                  max(m.loss_rate for m in members)),
        ))
    return out


# --- KNN decider -----------------------------------------------------------------

@dataclass
class KnnDecider:
    features: np.ndarray    # (n, 3k) exemplar observation windows
    labels: np.ndarray      # (n,) branch ids
    k: int = 15

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("features must be (n, d) with matching labels")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def n_branches(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def knn_classify(decider: KnnDecider, feature) -> int:
    """Majority vote among the k nearest exemplars; ties -> lowest label."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError("feature must be a flat vector")
    # same |a-b|^2 expansion and summation order as the batch path
    d2 = (f ** 2).sum() + (decider.features ** 2).sum(axis=1) \
        - 2.0 * (decider.features @ f)
    k = min(decider.k, len(d2))
    # stable full sort: equal distances resolve by exemplar order, so equal
    # inputs classify identically everywhere
    nearest = np.argsort(d2, kind="stable")[:k]
    votes = np.bincount(decider.labels[nearest],
                        minlength=decider.n_branches)
    return int(votes.argmax())


def knn_classify_batch(decider: KnnDecider, F: np.ndarray,
                       chunk: int = 64) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    out = np.empty(len(F), dtype=np.int64)
    feats = decider.features
    sq_e = (feats ** 2).sum(axis=1)
    for lo in range(0, len(F), chunk):
        block = F[lo:lo + chunk]
        # |a-b|^2 expansion keeps memory at chunk * n_exemplars
        d2 = (block ** 2).sum(axis=1)[:, None] + sq_e[None, :] \
            - 2.0 * (block @ feats.T)
        k = min(decider.k, d2.shape[1])
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for i in range(len(block)):
            votes = np.bincount(decider.labels[nearest[i]],
                                minlength=decider.n_branches)
            out[lo + i] = votes.argmax()
    return out


def fit_decider(grid: GridResults, model: ClusterModel, k: int = 15,
                max_per_branch: int = 20000, seed: int = 0) -> KnnDecider:
    """Label grid observation rows by their config's cluster and subsample."""
    if grid.rows_X.size == 0:
        raise ValueError("grid has no stored observation rows")
    labels = model.labels[grid.rows_config]
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) > max_per_branch:
            idx = rng.choice(idx, size=max_per_branch, replace=False)
        keep.append(np.sort(idx))
    keep = np.concatenate(keep)
    return KnnDecider(features=grid.rows_X[keep].copy(),
                      labels=labels[keep].copy(), k=k)


# --- smoothing --------------------------------------------------------------------

def smooth_branch(state: st.AgentState, raw: int, window: int,
                  n_branches: int) -> int:
    """Sticky majority over the last `window` raw labels.

    The current branch is kept unless it vanished from the window or another
    label out-counts it by >= 2; on a switch the window mode wins (ties ->
    lowest id).  A plain windowed mode would flap on alternating raw labels;
    the hysteresis keeps the output constant there.
    """
    h = state.branch_history
    h.append(int(raw))
    if len(h) > window:
        del h[:len(h) - window]
    if state.current_branch is None:
        state.current_branch = int(raw)
        return state.current_branch
    counts = np.bincount(h, minlength=n_branches)
    cur = state.current_branch
    mode = int(counts.argmax())
    if counts[cur] == 0 or counts[mode] >= counts[cur] + 2:
        state.current_branch = mode
    return state.current_branch


# --- branched policy ----------------------------------------------------------------

class BranchedPolicy:
    """One distilled tree per context plus the KNN decider and smoothing."""

    def __init__(self, contexts, trees, decider: KnnDecider, window: int = 5,
                 history_len: int = 10, grid_path: str | None = None):
        if len(contexts) != len(trees):
            raise ValueError("one tree per context required")
        bad = set(np.unique(decider.labels)) - set(range(len(trees)))
        if bad:
            raise ValueError(f"decider labels {sorted(bad)} have no branch")
        self.contexts = list(contexts)
        self.trees = list(trees)
        self.decider = decider
        self.window = window
        self.history_len = history_len
        self.grid_path = grid_path

    @property
    def n_branches(self) -> int:
        return len(self.trees)

    def decide_branch(self, history, state: st.AgentState) -> int:
        # ObsHistory exposes flat() as a method; ndarray.flat is an iterator
        flat = history.flat() if callable(getattr(history, "flat", None)) \
            else np.asarray(history, dtype=np.float64).reshape(-1)
        raw = knn_classify(self.decider, flat)
        return smooth_branch(state, raw, self.window, self.n_branches)

    def act(self, history, state: st.AgentState) -> float:
        branch = self.decide_branch(history, state)
        if not (isinstance(history, list) or hasattr(history, "window")):
            # flat (3k,) vector -> list of (inflation, ratio, send_ratio)
            history = [tuple(row) for row in
                       np.asarray(history, dtype=np.float64).reshape(-1, 3)]
        return st.eval_tree(self.trees[branch], history, state)

    def flops_report(self) -> dict:
        k = self.history_len
        tree_costs = [st.count_flops(t, k) for t in self.trees]
        # headline budget: worst branch + window vote + k-nearest majority;
        # exemplar distance arithmetic is reported separately
        n, d = self.decider.features.shape
        return {
            "per_branch": tree_costs,
            "flops": max(tree_costs) + self.window + self.decider.k,
            "knn_distance_flops": int(n * (3 * d - 1)),
        }


def save_branched(policy: BranchedPolicy, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    branch_files = []
    for i, tree in enumerate(policy.trees):
        name = f"branch_{i}.tree"
        st.save_tree(tree, os.path.join(out_dir, name))
        branch_files.append(name)
    np.savez_compressed(os.path.join(out_dir, "decider.npz"),
                        features=policy.decider.features,
                        labels=policy.decider.labels)
    doc = {
        "history_len": policy.history_len,
        "window": policy.window,
        "knn_k": policy.decider.k,
        "grid_path": policy.grid_path,
        "contexts": [c.to_doc() for c in policy.contexts],
        "branch_files": branch_files,
        "decider_file": "decider.npz",
    }
    with open(os.path.join(out_dir, "contexts.json"), "w") as f:
        json.dump(doc, f, indent=2)


def load_branched(out_dir: str) -> BranchedPolicy:
    with open(os.path.join(out_dir, "contexts.json")) as f:
        doc = json.load(f)
    contexts = [BranchContext.from_doc(c) for c in doc["contexts"]]
    trees = [st.load_tree(os.path.join(out_dir, name))
             for name in doc["branch_files"]]
    dec = np.load(os.path.join(out_dir, doc["decider_file"]))
    decider = KnnDecider(features=dec["features"],
                         labels=dec["labels"].astype(np.int64),
                         k=doc["knn_k"])
    return BranchedPolicy(contexts, trees, decider, window=doc["window"],
                          history_len=doc["history_len"],
                          grid_path=doc.get("grid_path"))


# --- training ------------------------------------------------------------------------

def train_branches(grid: GridResults, model: ClusterModel, contexts,
                   train_cfg=None, bcfg=None, gcfg=None, seed: int = 0,
                   rollout_episodes: int = 60, knn_k: int = 15,
                   window: int = 5, max_exemplars: int = 20000,
                   grid_path: str | None = None,
                   log=None) -> BranchedPolicy:
    """Full per-context pipeline: teacher -> rollouts -> distilled tree.

    Teacher non-convergence in any branch propagates; branch i trains with
    seed + 1000*i so branches are independently reproducible.
    """
    from .teacher import TeacherTrainConfig, collect_rollouts, train_teacher
    from .distill import BuildConfig, GpConfig, distill_policy

    train_cfg = train_cfg or TeacherTrainConfig()
    bcfg = bcfg or BuildConfig()
    gcfg = gcfg or GpConfig()
    trees = []
    for ctx in contexts:
        branch_seed = seed + 1000 * ctx.branch
        policy, result = train_teacher(train_cfg, seed=branch_seed,
                                       ranges=ctx.ranges())
        if log is not None:
            log(f"branch {ctx.branch}: teacher return "
                f"{result.final_return:.1f} (random {result.random_return:.1f})")
        rollouts = collect_rollouts(policy, rollout_episodes,
                                    seed=branch_seed + 17,
                                    ranges=ctx.ranges(),
                                    episode_mis=train_cfg.episode_mis)
        tree, report = distill_policy(rollouts, bcfg, gcfg,
                                      seed=branch_seed + 29)
        if log is not None:
            log(f"branch {ctx.branch}: tree mse {report.mse_holdout:.4f} "
                f"(var {report.var_holdout:.4f}), flops {report.tree_flops}")
        trees.append(tree)
    decider = fit_decider(grid, model, k=knn_k, max_per_branch=max_exemplars,
                          seed=seed + 7)
    return BranchedPolicy(contexts, trees, decider, window=window,
                          history_len=grid.history_len, grid_path=grid_path)


def eval_branched(branched: BranchedPolicy, obs, state: st.AgentState):
    """Spec-shaped wrapper: decide a branch, evaluate its tree, return
    (action, state)."""
    action = branched.act(obs, state)
    return action, state
