"""distill.py - genetic-programming symbolic regression and tree building.

Two engines share one typed GP core:

* `run_sr` evolves a numeric expression minimizing MSE + parsimony * size
  against (X, Y) rows.  Selection is tournament; offspring come from five
  schemes (crossover, subtree mutation, hoist mutation, point mutation,
  reproduction); the best individual survives unchanged each generation, so
  best fitness is non-increasing.  Once per generation the best individual's
  float constants are polished by least squares.

* `synthesize_condition` evolves a boolean expression maximizing information
  gain of the induced split over the action-value entropy, with a small
  FLOP-weighted parsimony so cheap comparisons win unless an expensive
  operator genuinely pays for itself.  Comparison thresholds are seeded from
  empirical quantiles of the feature being compared.

`build_tree` grows a policy tree from rollouts: pop a pending node, resolve
it by entropy gate (mean leaf), split (below the depth cap, with probability
p_split), or - at the cap - symbolic regression / default-action denoising /
backtracking, which dissolves a random condition ancestor and re-opens it.
An iteration budget bounds the whole process; anything still pending at the
end becomes a default-action leaf.

`(state)` never enters GP terminal pools: offline rollout rows carry no
internal-state column to fit against.  Leaves may still set the state flag -
strong-decrease leaves mark the backoff state, strong-increase leaves clear
it - so deployed trees can condition on recent regime if hand-extended.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import least_squares

from . import symtree as st
from .symtree import (
    ActionNode, BatchCtx, ConditionNode, Const, GetObs, SlopeObs,
    count_expr_nodes, count_flops, expr_depth, eval_tree_batch,
)

ENTROPY_BINS = 32
ENTROPY_RANGE = (-1.0, 1.0)


def entropy(values, bins: int = ENTROPY_BINS) -> float:
    """Shannon entropy (nats) of the histogram of action values over [-1, 1]."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return 0.0
    hist, _ = np.histogram(np.clip(v, *ENTROPY_RANGE), bins=bins,
                           range=ENTROPY_RANGE)
    p = hist[hist > 0] / v.size
    return max(0.0, float(-(p * np.log(p)).sum()))


# --- configuration -----------------------------------------------------------

@dataclass
class GpConfig:
    population: int = 1000
    generations: int = 40
    tournament: int = 20
    p_crossover: float = 0.70
    p_subtree: float = 0.10
    p_hoist: float = 0.05
    p_point: float = 0.10
    p_reproduction: float = 0.05
    parsimony: float = 0.001
    max_depth: int = 6
    const_range: tuple = (-1.0, 1.0)
    sr_accept_mse: float = 0.05
    refine_constants: bool = True
    point_const_sigma: float = 0.25


@dataclass
class BuildConfig:
    depth_max: int = 6
    cnt_max: int = 512
    p_split: float = 0.8        # below depth_max: split vs denoise
    p_sr: float = 0.6           # at depth_max: run symbolic regression
    p_denoise: float = 0.2      # at depth_max: default-action leaf
    entropy_threshold: float = 0.5
    default_action: float = 0.0
    sr_max_rows: int = 2048
    condition_population: int = 300
    condition_generations: int = 12
    condition_flop_parsimony: float = 0.002
    set_state_flags: bool = True
    set_state_threshold: float = 0.25

    def __post_init__(self):
        if self.depth_max < 0:
            raise ValueError("depth_max must be >= 0")
        if not 0.0 <= self.p_sr + self.p_denoise <= 1.0:
            raise ValueError("p_sr + p_denoise must be within [0, 1]")


@dataclass
class SrResult:
    expr: st.Expr
    mse: float
    fitness: float
    curve: list          # best fitness per generation, non-increasing
    converged: bool


# --- random typed expressions -------------------------------------------------

def _random_terminal(rng, k: int, cfg: GpConfig):
    r = rng.random()
    if r < 0.45:
        return GetObs(int(rng.integers(0, 3)), int(rng.integers(0, k)))
    if r < 0.75:
        return Const(float(rng.uniform(*cfg.const_range)))
    return SlopeObs(int(rng.integers(0, 3)))


def random_numeric(rng, k: int, cfg: GpConfig, depth: int, full: bool = False):
    if depth <= 1 or (not full and rng.random() < 0.35):
        return _random_terminal(rng, k, cfg)
    if rng.random() < 0.65:
        cls = st.NUM_BINARY[rng.integers(0, len(st.NUM_BINARY))]
        return cls(random_numeric(rng, k, cfg, depth - 1, full),
                   random_numeric(rng, k, cfg, depth - 1, full))
    cls = st.NUM_UNARY[rng.integers(0, len(st.NUM_UNARY))]
    return cls(random_numeric(rng, k, cfg, depth - 1, full))


def random_boolean(rng, k: int, cfg: GpConfig, depth: int):
    if depth <= 2 or rng.random() < 0.6:
        cls = st.CMP_OPS[rng.integers(0, len(st.CMP_OPS))]
        return cls(random_numeric(rng, k, cfg, max(1, depth - 1)),
                   random_numeric(rng, k, cfg, max(1, depth - 1)))
    r = rng.random()
    if r < 0.25:
        return st.Not(random_boolean(rng, k, cfg, depth - 1))
    cls = st.BOOL_BINARY[rng.integers(0, len(st.BOOL_BINARY))]
    return cls(random_boolean(rng, k, cfg, depth - 1),
               random_boolean(rng, k, cfg, depth - 1))


def _ramped_population(rng, k, cfg, size, sort):
    pop = []
    for i in range(size):
        depth = 2 + i % max(1, cfg.max_depth - 1)
        if sort == st.NUM:
            pop.append(random_numeric(rng, k, cfg, depth, full=(i % 2 == 0)))
        else:
            pop.append(random_boolean(rng, k, cfg, depth))
    return pop


# --- structural edits ---------------------------------------------------------

def _nodes_list(expr):
    return list(st.expr_nodes(expr))


def _replace_at(expr, target_idx: int, replacement):
    """Rebuild `expr` with the preorder node `target_idx` swapped out."""
    counter = [0]

    def rec(node):
        idx = counter[0]
        counter[0] += 1
        if idx == target_idx:
            # still must advance past the skipped subtree to keep indices aligned
            counter[0] += count_expr_nodes(node) - 1
            return replacement
        args = node.args
        if not args:
            return node
        return node.with_args(tuple(rec(a) for a in args))

    return rec(expr)


def _pick_index(rng, nodes, sort=None):
    if sort is None:
        return int(rng.integers(0, len(nodes)))
    idxs = [i for i, n in enumerate(nodes) if n.sort == sort]
    if not idxs:
        return -1
    return idxs[int(rng.integers(0, len(idxs)))]


def crossover(rng, parent, donor, cfg: GpConfig):
    p_nodes = _nodes_list(parent)
    for _ in range(8):
        i = int(rng.integers(0, len(p_nodes)))
        sort = p_nodes[i].sort
        d_nodes = _nodes_list(donor)
        j = _pick_index(rng, d_nodes, sort)
        if j < 0:
            continue
        child = _replace_at(parent, i, st.clone_expr(d_nodes[j]))
        if expr_depth(child) <= cfg.max_depth:
            return child
    return st.clone_expr(parent)


def subtree_mutation(rng, parent, k, cfg: GpConfig):
    nodes = _nodes_list(parent)
    i = int(rng.integers(0, len(nodes)))
    sort = nodes[i].sort
    depth_budget = max(1, cfg.max_depth - 2)
    repl = (random_numeric(rng, k, cfg, depth_budget) if sort == st.NUM
            else random_boolean(rng, k, cfg, max(2, depth_budget)))
    child = _replace_at(parent, i, repl)
    if expr_depth(child) > cfg.max_depth:
        return st.clone_expr(parent)
    return child


def hoist_mutation(rng, parent):
    """Replace a subtree by one of its own same-sort proper subtrees.
    Never increases node count."""
    nodes = _nodes_list(parent)
    candidates = [i for i, n in enumerate(nodes) if n.args]
    if not candidates:
        return st.clone_expr(parent)
    i = candidates[int(rng.integers(0, len(candidates)))]
    sub = nodes[i]
    inner = _nodes_list(sub)[1:]   # proper subtrees only
    j = _pick_index(rng, inner, sub.sort)
    if j < 0:
        return st.clone_expr(parent)
    return _replace_at(parent, i, st.clone_expr(inner[j]))


_BINARY_NUM = list(st.NUM_BINARY)
_UNARY_NUM = list(st.NUM_UNARY)
_CMPS = list(st.CMP_OPS)
_BOOLS = list(st.BOOL_BINARY)


def point_mutation(rng, parent, k, cfg: GpConfig):
    nodes = _nodes_list(parent)
    i = int(rng.integers(0, len(nodes)))
    node = nodes[i]
    if isinstance(node, Const):
        if rng.random() < 0.5:
            repl = Const(node.value + float(rng.normal(0, cfg.point_const_sigma)))
        else:
            repl = Const(float(rng.uniform(*cfg.const_range)))
    elif isinstance(node, (GetObs, SlopeObs)):
        repl = _random_terminal(rng, k, cfg)
        while isinstance(repl, Const):
            repl = _random_terminal(rng, k, cfg)
    elif type(node) in _BINARY_NUM:
        cls = _BINARY_NUM[int(rng.integers(0, len(_BINARY_NUM)))]
        repl = cls(node.args[0], node.args[1])
    elif type(node) in _UNARY_NUM:
        cls = _UNARY_NUM[int(rng.integers(0, len(_UNARY_NUM)))]
        repl = cls(node.args[0])
    elif type(node) in _CMPS:
        cls = _CMPS[int(rng.integers(0, len(_CMPS)))]
        repl = cls(node.args[0], node.args[1])
    elif type(node) in _BOOLS:
        cls = _BOOLS[int(rng.integers(0, len(_BOOLS)))]
        repl = cls(node.args[0], node.args[1])
    else:
        return st.clone_expr(parent)
    return _replace_at(parent, i, repl)


def _offspring(rng, pop, fitness, k, cfg: GpConfig):
    """Produce one child via a scheme drawn from the configured mixture."""
    r = rng.random()
    parent = pop[_tournament_pick(rng, fitness, cfg.tournament)]
    if r < cfg.p_crossover:
        donor = pop[_tournament_pick(rng, fitness, cfg.tournament)]
        return crossover(rng, parent, donor, cfg)
    r -= cfg.p_crossover
    if r < cfg.p_subtree:
        return subtree_mutation(rng, parent, k, cfg)
    r -= cfg.p_subtree
    if r < cfg.p_hoist:
        return hoist_mutation(rng, parent)
    r -= cfg.p_hoist
    if r < cfg.p_point:
        return point_mutation(rng, parent, k, cfg)
    return st.clone_expr(parent)


def _tournament_pick(rng, fitness, size):
    idx = rng.integers(0, len(fitness), size=size)
    best = int(idx[0])
    for i in idx[1:]:
        i = int(i)
        if fitness[i] < fitness[best]:
            best = i
    return best


# --- numeric symbolic regression ----------------------------------------------

def _mse_batch(expr, ctx: BatchCtx, y: np.ndarray) -> float:
    pred = expr.eval_batch(ctx)
    if np.isscalar(pred) or pred.ndim == 0:
        pred = np.full(y.shape, float(pred))
    d = pred - y
    return float(np.mean(d * d))


def _refine_constants(expr, ctx: BatchCtx, y: np.ndarray):
    """Least-squares polish of every Const in `expr`; returns refined clone."""
    work = st.clone_expr(expr)
    consts = [n for n in st.expr_nodes(work) if isinstance(n, Const)]
    if not consts:
        return expr
    x0 = np.array([c.value for c in consts], dtype=np.float64)

    def residuals(theta):
        for c, v in zip(consts, theta):
            c.value = float(v)
        pred = work.eval_batch(ctx)
        if np.isscalar(pred) or pred.ndim == 0:
            pred = np.full(y.shape, float(pred))
        return pred - y

    try:
        sol = least_squares(residuals, x0, method="lm", max_nfev=60)
        theta = sol.x
    except Exception:
        theta = x0
    if not np.all(np.isfinite(theta)):
        theta = x0
    for c, v in zip(consts, theta):
        c.value = float(v)
    return work


def run_sr(X: np.ndarray, Y: np.ndarray, cfg: GpConfig = None,
           seed: int = 0) -> SrResult:
    """Symbolic regression of Y against observation-history rows X (n, 3k)."""
    cfg = cfg or GpConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] % 3 != 0:
        raise ValueError("X must be (n, 3k)")
    if Y.shape != (X.shape[0],):
        raise ValueError("Y must be (n,)")
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    k = X.shape[1] // 3
    rng = np.random.default_rng(seed)
    ctx = BatchCtx(X)

    def fit_of(expr):
        return _mse_batch(expr, ctx, Y) + cfg.parsimony * count_expr_nodes(expr)

    pop = _ramped_population(rng, k, cfg, cfg.population, st.NUM)
    fitness = [fit_of(e) for e in pop]
    curve = []
    best_i = int(np.argmin(fitness))
    best_expr, best_fit = pop[best_i], fitness[best_i]

    for _gen in range(cfg.generations):
        if cfg.refine_constants:
            refined = _refine_constants(best_expr, ctx, Y)
            f = fit_of(refined)
            if f < best_fit:
                best_expr, best_fit = refined, f
        new_pop = [best_expr]           # elitism
        new_fit = [best_fit]
        while len(new_pop) < cfg.population:
            child = _offspring(rng, pop, fitness, k, cfg)
            new_pop.append(child)
            new_fit.append(fit_of(child))
        pop, fitness = new_pop, new_fit
        gi = int(np.argmin(fitness))
        if fitness[gi] < best_fit:
            best_expr, best_fit = pop[gi], fitness[gi]
        curve.append(best_fit)

    if cfg.refine_constants:
        refined = _refine_constants(best_expr, ctx, Y)
        f = fit_of(refined)
        if f < best_fit:
            best_expr, best_fit = refined, f
            if curve:
                curve[-1] = best_fit
    mse = _mse_batch(best_expr, ctx, Y)
    return SrResult(expr=best_expr, mse=mse, fitness=best_fit, curve=curve,
                    converged=bool(mse <= cfg.sr_accept_mse))


# --- condition synthesis --------------------------------------------------------

def _split_gain(mask: np.ndarray, Y: np.ndarray, h_parent: float) -> float:
    n = Y.size
    n_t = int(mask.sum())
    if n_t == 0 or n_t == n:
        return 0.0
    h_t = entropy(Y[mask])
    h_f = entropy(Y[~mask])
    return h_parent - (n_t * h_t + (n - n_t) * h_f) / n


def _quantile_comparison(rng, ctx: BatchCtx, k: int):
    """cmp(feature, Const(q)) with q an empirical quantile of that feature."""
    if rng.random() < 0.75:
        feat = GetObs(int(rng.integers(0, 3)), int(rng.integers(0, k)))
    else:
        feat = SlopeObs(int(rng.integers(0, 3)))
    vals = feat.eval_batch(ctx)
    q = float(np.quantile(vals, rng.uniform(0.05, 0.95)))
    cls = st.CMP_OPS[rng.integers(0, len(st.CMP_OPS))]
    return cls(feat, Const(q))


def synthesize_condition(X: np.ndarray, Y: np.ndarray, bcfg: BuildConfig = None,
                         seed: int = 0, fitness_log: list = None):
    """Evolve a boolean split predicate maximizing information gain.

    Returns (expr, gain).  Gain can be ~0 when Y is near-constant; the
    caller decides whether the split is worth keeping.  `fitness_log`, if
    given, receives the best fitness per generation.
    """
    bcfg = bcfg or BuildConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    k = X.shape[1] // 3
    rng = np.random.default_rng(seed)
    ctx = BatchCtx(X)
    h_parent = entropy(Y)
    gcfg = GpConfig(population=bcfg.condition_population,
                    generations=bcfg.condition_generations,
                    tournament=7, max_depth=4)

    def fit_of(expr):
        mask = expr.eval_batch(ctx)
        if np.isscalar(mask) or mask.ndim == 0:
            return 1e9   # constant predicate splits nothing
        gain = _split_gain(mask.astype(bool), Y, h_parent)
        return -gain + bcfg.condition_flop_parsimony * count_flops(expr, k)

    pop = []
    for i in range(gcfg.population):
        if rng.random() < 0.8:
            pop.append(_quantile_comparison(rng, ctx, k))
        else:
            pop.append(random_boolean(rng, k, gcfg, 2 + i % 3))
    fitness = [fit_of(e) for e in pop]
    bi = int(np.argmin(fitness))
    best_expr, best_fit = pop[bi], fitness[bi]

    for _gen in range(gcfg.generations):
        new_pop = [best_expr]
        new_fit = [best_fit]
        while len(new_pop) < gcfg.population:
            if rng.random() < 0.15:
                child = _quantile_comparison(rng, ctx, k)
            else:
                child = _offspring(rng, pop, fitness, k, gcfg)
            new_pop.append(child)
            new_fit.append(fit_of(child))
        pop, fitness = new_pop, new_fit
        gi = int(np.argmin(fitness))
        if fitness[gi] < best_fit:
            best_expr, best_fit = pop[gi], fitness[gi]
        if fitness_log is not None:
            fitness_log.append(best_fit)

    mask = best_expr.eval_batch(ctx)
    gain = 0.0
    if not (np.isscalar(mask) or mask.ndim == 0):
        gain = _split_gain(mask.astype(bool), Y, h_parent)
    return best_expr, float(gain)


# --- tree builder ---------------------------------------------------------------

class _BNode:
    """Mutable scaffolding node; converted to symtree nodes on finalize."""
    __slots__ = ("kind", "mask", "depth", "parent", "pred", "left", "right",
                 "expr", "value", "sets_state")

    def __init__(self, mask, depth, parent):
        self.kind = "open"
        self.mask = mask
        self.depth = depth
        self.parent = parent
        self.pred = None
        self.left = None
        self.right = None
        self.expr = None
        self.value = None
        self.sets_state = None


@dataclass
class BuildReport:
    iterations: int = 0
    splits: int = 0
    mean_leaves: int = 0
    sr_leaves: int = 0
    sr_unconverged: int = 0
    denoise_leaves: int = 0
    backtracks: int = 0
    unresolved_leaves: int = 0


def _condition_ancestors(node):
    out = []
    p = node.parent
    while p is not None:
        out.append(p)
        p = p.parent
    return out


def _collect_open(root):
    out = []
    stack = [root]
    while stack:
        n = stack.pop()
        if n.kind == "open":
            out.append(n)
        elif n.kind == "cond":
            stack.append(n.left)
            stack.append(n.right)
    return out


def _leaf_value_mean(node, Y):
    sel = Y[node.mask]
    return float(np.mean(sel)) if sel.size else None


def _to_symtree(node, bcfg: BuildConfig, Y):
    if node.kind == "cond":
        return ConditionNode(node.pred,
                             _to_symtree(node.left, bcfg, Y),
                             _to_symtree(node.right, bcfg, Y))
    expr = node.expr if node.expr is not None else Const(bcfg.default_action)
    sets = None
    if bcfg.set_state_flags:
        mean_v = node.value
        if mean_v is None:
            mean_v = _leaf_value_mean(node, Y)
        if mean_v is not None:
            if mean_v <= -bcfg.set_state_threshold:
                sets = 1
            elif mean_v >= bcfg.set_state_threshold:
                sets = 0
    return ActionNode(expr, set_state=sets)


def build_tree(X: np.ndarray, Y: np.ndarray, bcfg: BuildConfig = None,
               gcfg: GpConfig = None, seed: int = 0, fitness_log: list = None):
    """Grow a policy tree over rollout rows.  Returns (tree, BuildReport).

    The pending-node worklist is consumed in random order; each iteration
    resolves one node or backtracks one subtree.  `cnt_max` bounds total
    iterations, which also bounds backtracking loops.  `fitness_log`, if
    given, collects (iteration, kind, generation, best_fitness) rows from
    every GP run, both split predicates and SR leaves.
    """
    bcfg = bcfg or BuildConfig()
    gcfg = gcfg or GpConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] % 3 != 0 or Y.shape != (X.shape[0],):
        raise ValueError("X must be (n, 3k) with Y of length n")
    rng = np.random.default_rng(seed)
    rep = BuildReport()

    root = _BNode(np.ones(X.shape[0], dtype=bool), 0, None)
    worklist = [root]

    while worklist and rep.iterations < bcfg.cnt_max:
        rep.iterations += 1
        node = worklist.pop(int(rng.integers(0, len(worklist))))
        ysub = Y[node.mask]

        if ysub.size == 0:
            node.kind = "leaf"
            node.expr = Const(bcfg.default_action)
            node.value = bcfg.default_action
            rep.denoise_leaves += 1
            continue

        h = entropy(ysub)
        if h < bcfg.entropy_threshold:
            node.kind = "leaf"
            node.value = float(np.mean(ysub))
            node.expr = Const(node.value)
            rep.mean_leaves += 1
            continue

        if node.depth < bcfg.depth_max:
            if rng.random() < bcfg.p_split:
                xsub = X[node.mask]
                cond_curve = None if fitness_log is None else []
                pred, gain = synthesize_condition(
                    xsub, ysub, bcfg, seed=int(rng.integers(0, 2**31)),
                    fitness_log=cond_curve)
                if cond_curve:
                    fitness_log.extend(
                        (rep.iterations, "cond", g, f)
                        for g, f in enumerate(cond_curve))
                local = pred.eval_batch(BatchCtx(xsub))
                if np.isscalar(local) or local.ndim == 0 or gain <= 0.0:
                    # degenerate predicate: fall back to a mean leaf
                    node.kind = "leaf"
                    node.value = float(np.mean(ysub))
                    node.expr = Const(node.value)
                    rep.mean_leaves += 1
                    continue
                mask_t = node.mask.copy()
                mask_t[node.mask] = local.astype(bool)
                mask_f = node.mask & ~mask_t
                node.kind = "cond"
                node.pred = pred
                node.left = _BNode(mask_t, node.depth + 1, node)
                node.right = _BNode(mask_f, node.depth + 1, node)
                worklist.append(node.left)
                worklist.append(node.right)
                rep.splits += 1
            else:
                node.kind = "leaf"
                node.expr = Const(bcfg.default_action)
                node.value = bcfg.default_action
                rep.denoise_leaves += 1
            continue

        # at max depth
        u = rng.random()
        if u < bcfg.p_sr:
            xsub = X[node.mask]
            if xsub.shape[0] > bcfg.sr_max_rows:
                pick = rng.choice(xsub.shape[0], bcfg.sr_max_rows,
                                  replace=False)
                res = run_sr(xsub[pick], ysub[pick], gcfg,
                             seed=int(rng.integers(0, 2**31)))
            else:
                res = run_sr(xsub, ysub, gcfg,
                             seed=int(rng.integers(0, 2**31)))
            node.kind = "leaf"
            node.expr = res.expr
            node.value = float(np.mean(ysub))
            rep.sr_leaves += 1
            if not res.converged:
                rep.sr_unconverged += 1
            if fitness_log is not None:
                fitness_log.extend((rep.iterations, "sr", g, f)
                                   for g, f in enumerate(res.curve))
        elif u < bcfg.p_sr + bcfg.p_denoise:
            node.kind = "leaf"
            node.expr = Const(bcfg.default_action)
            node.value = bcfg.default_action
            rep.denoise_leaves += 1
        else:
            anc = _condition_ancestors(node)
            if not anc:
                node.kind = "leaf"
                node.expr = Const(bcfg.default_action)
                node.value = bcfg.default_action
                rep.denoise_leaves += 1
                continue
            target = anc[int(rng.integers(0, len(anc)))]
            evicted = set(id(n) for n in _collect_open(target))
            worklist = [n for n in worklist if id(n) not in evicted]
            # the popped node and everything under target dangle now; the
            # re-opened ancestor subsumes their data slices
            target.kind = "open"
            target.pred = None
            target.left = None
            target.right = None
            worklist.append(target)
            rep.backtracks += 1

    for n in _collect_open(root):
        n.kind = "leaf"
        n.expr = Const(bcfg.default_action)
        n.value = bcfg.default_action
        rep.unresolved_leaves += 1
    if root.kind == "open":
        root.kind = "leaf"
        root.expr = Const(bcfg.default_action)
        root.value = bcfg.default_action
        rep.unresolved_leaves += 1

    tree = _to_symtree(root, bcfg, Y)
    st.validate_tree(tree)
    return tree, rep


# --- end-to-end distillation -----------------------------------------------------

@dataclass
class DistillReport:
    mse_holdout: float
    var_holdout: float
    agreement: float          # fraction of holdout rows with |pred - y| < 0.1
    tree_flops: int
    tree_depth: int
    n_leaves: int
    n_conditions: int
    build: dict
    n_train_rows: int
    n_holdout_rows: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _episode_split(returns: np.ndarray, holdout_frac: float, rng):
    """Split row indices into train/holdout by episode id (column content)."""
    episodes = np.unique(returns)
    # returns are constant within an episode; group rows by that value
    order = rng.permutation(len(episodes))
    n_hold = max(1, int(round(len(episodes) * holdout_frac)))
    hold_vals = set(episodes[order[:n_hold]].tolist())
    return hold_vals


def distill_policy(dataset, bcfg: BuildConfig = None, gcfg: GpConfig = None,
                   seed: int = 0, holdout_frac: float = 0.2,
                   fitness_log: list = None):
    """Build a tree from a RolloutDataset and score fidelity on held-out rows.

    Rows are split by episode (dataset.episode) so holdout rows come from
    trajectories the builder never saw.
    """
    bcfg = bcfg or BuildConfig()
    gcfg = gcfg or GpConfig()
    rng = np.random.default_rng(seed)
    X = np.asarray(dataset.X, dtype=np.float64)
    Y = np.asarray(dataset.y, dtype=np.float64)
    eps = np.asarray(dataset.episode, dtype=np.int64)

    uniq = np.unique(eps)
    if uniq.size < 2:
        hold_mask = np.zeros(len(Y), dtype=bool)
        hold_mask[rng.permutation(len(Y))[:max(1, int(len(Y) * holdout_frac))]] = True
    else:
        order = rng.permutation(uniq.size)
        n_hold = max(1, int(round(uniq.size * holdout_frac)))
        hold_eps = set(uniq[order[:n_hold]].tolist())
        hold_mask = np.isin(eps, list(hold_eps))

    X_tr, Y_tr = X[~hold_mask], Y[~hold_mask]
    X_ho, Y_ho = X[hold_mask], Y[hold_mask]

    tree, build_rep = build_tree(X_tr, Y_tr, bcfg, gcfg,
                                 seed=int(rng.integers(0, 2**31)),
                                 fitness_log=fitness_log)

    pred = eval_tree_batch(tree, BatchCtx(X_ho))
    diff = pred - Y_ho
    mse = float(np.mean(diff * diff))
    agreement = float(np.mean(np.abs(diff) < 0.1))
    k = X.shape[1] // 3
    report = DistillReport(
        mse_holdout=mse,
        var_holdout=float(np.var(Y_ho)),
        agreement=agreement,
        tree_flops=count_flops(tree, k),
        tree_depth=st.tree_depth(tree),
        n_leaves=sum(1 for _ in st.tree_leaves(tree)),
        n_conditions=sum(1 for _ in _iter_conditions(tree)),
        build=asdict(build_rep),
        n_train_rows=int(X_tr.shape[0]),
        n_holdout_rows=int(X_ho.shape[0]),
        seed=seed,
    )
    return tree, report


def _iter_conditions(node):
    if isinstance(node, ConditionNode):
        yield node
        yield from _iter_conditions(node.left)
        yield from _iter_conditions(node.right)


def save_report(report: DistillReport, path) -> None:
    with open(path, "w") as f:
        f.write(report.to_json())
        f.write("\n")


def save_fitness_log(rows, path) -> None:
    """Per-generation GP fitness CSV: one row per (builder iteration, gen)."""
    with open(path, "w") as f:
        f.write("iteration,kind,generation,best_fitness\n")
        for it, kind, gen, fit in rows:
            f.write(f"{it},{kind},{gen},{repr(float(fit))}\n")
