"""symtree.py - typed symbolic expressions and rate-control policy trees.

Two sorts: numeric and boolean.  Numeric expressions are built from observation
accessors, float constants, the agent's internal-state flag, arithmetic
operators, and two history operators (least-squares slope of a series, value
at a history index).  Boolean expressions are comparisons combined with
and/or/not.  A policy tree alternates boolean condition nodes with action
leaves whose numeric expression yields the rate action, clamped to [-1, 1];
a leaf may also set the internal-state flag.

All operators are total: division by ~0 yields 1, log of a non-positive
yields 0, sqrt takes |x|, and every numeric result is clamped to +/-1e6, so
evaluation never produces NaN/inf and fitness code never sees one.

Per-operator costs (used for worst-path FLOP accounting):
  +, -, *, abs, square, comparisons, and/or/not ... 1
  cube ............................................ 2
  /, sqrt ......................................... 4
  sin, cos, tan, cot, exp, log .................... 8
  slope over a length-m series .................... 2m + 2
  constants, observation reads, state reads ....... 0

Scalar evaluation is deliberately lean (slot classes, no dispatch tables):
a distilled tree must evaluate in a few microseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NUM = "num"
BOOL = "bool"

SERIES_NAMES = ("obs_inflation", "obs_ratio", "obs_send")
SERIES_INDEX = {name: j for j, name in enumerate(SERIES_NAMES)}

CLAMP = 1e6
DIV_EPS = 1e-9
EQ_TOL = 1e-9

_SLOPE_W: dict[int, np.ndarray] = {}


def slope_weights(m: int) -> np.ndarray:
    """Least-squares slope of y over x=0..m-1 is a fixed dot product w.y."""
    w = _SLOPE_W.get(m)
    if w is None:
        x = np.arange(m, dtype=np.float64)
        xc = x - x.mean()
        w = xc / (xc * xc).sum()
        _SLOPE_W[m] = w
    return w


def _clip(v: float) -> float:
    if v > CLAMP:
        return CLAMP
    if v < -CLAMP:
        return -CLAMP
    return v


class BatchCtx:
    """Shared context for vectorized evaluation over a rollout matrix.

    X has one flattened observation window per row (step-major: column
    3*i + j is statistic j at history step i).  Offline datasets carry no
    internal-state column, so `(state)` evaluates to 0 in batch mode.
    """

    __slots__ = ("X", "k", "n", "_series", "_zeros")

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] % 3 != 0:
            raise ValueError(f"expected (n, 3k) observation matrix, got {X.shape}")
        self.X = X
        self.k = X.shape[1] // 3
        self.n = X.shape[0]
        self._series = {}
        self._zeros = None

    def series(self, j: int) -> np.ndarray:
        s = self._series.get(j)
        if s is None:
            s = np.ascontiguousarray(self.X[:, j::3])
            self._series[j] = s
        return s

    def zeros(self) -> np.ndarray:
        if self._zeros is None:
            self._zeros = np.zeros(self.n)
        return self._zeros


class Expr:
    """Base class; subclasses define sort, token, arity and evaluation."""

    __slots__ = ()
    sort = NUM
    token = "?"
    flop_cost = 0

    @property
    def args(self) -> tuple:
        return ()

    def with_args(self, args):
        return self

    def eval(self, w, state):
        raise NotImplementedError

    def eval_batch(self, ctx: BatchCtx) -> np.ndarray:
        raise NotImplementedError


# --- numeric terminals ------------------------------------------------------

class Const(Expr):
    __slots__ = ("value",)
    token = "<float>"

    def __init__(self, value: float):
        self.value = float(value)

    def eval(self, w, state):
        return self.value

    def eval_batch(self, ctx):
        return np.full(ctx.n, self.value)

    def with_args(self, args):
        return Const(self.value)


class GetObs(Expr):
    """Value of one statistic at one history index (0 = oldest)."""

    __slots__ = ("series", "index")
    token = "get"

    def __init__(self, series: int, index: int):
        if not 0 <= series < 3:
            raise ValueError(f"series must be 0..2, got {series}")
        if index < 0:
            raise ValueError(f"history index must be >= 0, got {index}")
        self.series = series
        self.index = index

    def eval(self, w, state):
        return w[self.index][self.series]

    def eval_batch(self, ctx):
        if self.index >= ctx.k:
            raise IndexError(f"history index {self.index} >= window {ctx.k}")
        return ctx.X[:, 3 * self.index + self.series]

    def with_args(self, args):
        return GetObs(self.series, self.index)


class SlopeObs(Expr):
    """Least-squares slope of one statistic across the history window."""

    __slots__ = ("series",)
    token = "slope"

    def __init__(self, series: int):
        if not 0 <= series < 3:
            raise ValueError(f"series must be 0..2, got {series}")
        self.series = series

    def eval(self, w, state):
        wts = slope_weights(len(w))
        j = self.series
        total = 0.0
        for i in range(len(w)):
            total += wts[i] * w[i][j]
        return total

    def eval_batch(self, ctx):
        return ctx.series(self.series) @ slope_weights(ctx.k)

    def with_args(self, args):
        return SlopeObs(self.series)


class StateRef(Expr):
    __slots__ = ()
    token = "state"

    def eval(self, w, state):
        return float(state.internal_state)

    def eval_batch(self, ctx):
        return ctx.zeros()


# --- numeric operators ------------------------------------------------------

class _Binary(Expr):
    __slots__ = ("a", "b")
    arg_sorts = (NUM, NUM)

    def __init__(self, a: Expr, b: Expr):
        if a.sort != self.arg_sorts[0] or b.sort != self.arg_sorts[1]:
            raise TypeError(f"{self.token} expects {self.arg_sorts}, "
                            f"got ({a.sort}, {b.sort})")
        self.a = a
        self.b = b

    @property
    def args(self):
        return (self.a, self.b)

    def with_args(self, args):
        return type(self)(args[0], args[1])


class _Unary(Expr):
    __slots__ = ("a",)
    arg_sorts = (NUM,)

    def __init__(self, a: Expr):
        if a.sort != self.arg_sorts[0]:
            raise TypeError(f"{self.token} expects {self.arg_sorts[0]}, got {a.sort}")
        self.a = a

    @property
    def args(self):
        return (self.a,)

    def with_args(self, args):
        return type(self)(args[0])


class Add(_Binary):
    __slots__ = ()
    token = "+"
    flop_cost = 1

    def eval(self, w, state):
        return _clip(self.a.eval(w, state) + self.b.eval(w, state))

    def eval_batch(self, ctx):
        return np.clip(self.a.eval_batch(ctx) + self.b.eval_batch(ctx), -CLAMP, CLAMP)


class Sub(_Binary):
    __slots__ = ()
    token = "-"
    flop_cost = 1

    def eval(self, w, state):
        return _clip(self.a.eval(w, state) - self.b.eval(w, state))

    def eval_batch(self, ctx):
        return np.clip(self.a.eval_batch(ctx) - self.b.eval_batch(ctx), -CLAMP, CLAMP)


class Mul(_Binary):
    __slots__ = ()
    token = "*"
    flop_cost = 1

    def eval(self, w, state):
        return _clip(self.a.eval(w, state) * self.b.eval(w, state))

    def eval_batch(self, ctx):
        return np.clip(self.a.eval_batch(ctx) * self.b.eval_batch(ctx), -CLAMP, CLAMP)


class Div(_Binary):
    """Protected: x/0 -> 1."""

    __slots__ = ()
    token = "/"
    flop_cost = 4

    def eval(self, w, state):
        den = self.b.eval(w, state)
        if -DIV_EPS < den < DIV_EPS:
            return 1.0
        return _clip(self.a.eval(w, state) / den)

    def eval_batch(self, ctx):
        num = self.a.eval_batch(ctx)
        den = self.b.eval_batch(ctx)
        bad = np.abs(den) < DIV_EPS
        out = num / np.where(bad, 1.0, den)
        out[bad] = 1.0
        return np.clip(out, -CLAMP, CLAMP)


class Sin(_Unary):
    __slots__ = ()
    token = "sin"
    flop_cost = 8

    def eval(self, w, state):
        return math.sin(self.a.eval(w, state))

    def eval_batch(self, ctx):
        return np.sin(self.a.eval_batch(ctx))


class Cos(_Unary):
    __slots__ = ()
    token = "cos"
    flop_cost = 8

    def eval(self, w, state):
        return math.cos(self.a.eval(w, state))

    def eval_batch(self, ctx):
        return np.cos(self.a.eval_batch(ctx))


class Tan(_Unary):
    __slots__ = ()
    token = "tan"
    flop_cost = 8

    def eval(self, w, state):
        return _clip(math.tan(self.a.eval(w, state)))

    def eval_batch(self, ctx):
        return np.clip(np.tan(self.a.eval_batch(ctx)), -CLAMP, CLAMP)


class Cot(_Unary):
    """cos/sin with a zero-sine guard; clamped like tan."""

    __slots__ = ()
    token = "cot"
    flop_cost = 8

    def eval(self, w, state):
        x = self.a.eval(w, state)
        s = math.sin(x)
        if -DIV_EPS < s < DIV_EPS:
            return CLAMP
        return _clip(math.cos(x) / s)

    def eval_batch(self, ctx):
        x = self.a.eval_batch(ctx)
        s = np.sin(x)
        bad = np.abs(s) < DIV_EPS
        out = np.cos(x) / np.where(bad, 1.0, s)
        out[bad] = CLAMP
        return np.clip(out, -CLAMP, CLAMP)


class Square(_Unary):
    __slots__ = ()
    token = "square"
    flop_cost = 1

    def eval(self, w, state):
        v = self.a.eval(w, state)
        return _clip(v * v)

    def eval_batch(self, ctx):
        v = self.a.eval_batch(ctx)
        return np.clip(v * v, -CLAMP, CLAMP)


class Cube(_Unary):
    __slots__ = ()
    token = "cube"
    flop_cost = 2

    def eval(self, w, state):
        v = self.a.eval(w, state)
        return _clip(v * v * v)

    def eval_batch(self, ctx):
        v = self.a.eval_batch(ctx)
        return np.clip(v * v * v, -CLAMP, CLAMP)


class Sqrt(_Unary):
    """Protected: sqrt(|x|)."""

    __slots__ = ()
    token = "sqrt"
    flop_cost = 4

    def eval(self, w, state):
        return math.sqrt(abs(self.a.eval(w, state)))

    def eval_batch(self, ctx):
        return np.sqrt(np.abs(self.a.eval_batch(ctx)))


class Exp(_Unary):
    __slots__ = ()
    token = "exp"
    flop_cost = 8

    def eval(self, w, state):
        return _clip(math.exp(min(self.a.eval(w, state), 700.0)))

    def eval_batch(self, ctx):
        return np.clip(np.exp(np.minimum(self.a.eval_batch(ctx), 700.0)), -CLAMP, CLAMP)


class Log(_Unary):
    """Protected: log(x <= 0) -> 0."""

    __slots__ = ()
    token = "log"
    flop_cost = 8

    def eval(self, w, state):
        v = self.a.eval(w, state)
        if v <= 0.0:
            return 0.0
        return _clip(math.log(v))

    def eval_batch(self, ctx):
        v = self.a.eval_batch(ctx)
        pos = v > 0.0
        out = np.log(np.where(pos, v, 1.0))
        out[~pos] = 0.0
        return np.clip(out, -CLAMP, CLAMP)


class Abs(_Unary):
    __slots__ = ()
    token = "abs"
    flop_cost = 1

    def eval(self, w, state):
        return abs(self.a.eval(w, state))

    def eval_batch(self, ctx):
        return np.abs(self.a.eval_batch(ctx))


# --- boolean operators ------------------------------------------------------

class IsLt(_Binary):
    __slots__ = ()
    sort = BOOL
    token = "is_lt"
    flop_cost = 1

    def eval(self, w, state):
        return self.a.eval(w, state) < self.b.eval(w, state)

    def eval_batch(self, ctx):
        return self.a.eval_batch(ctx) < self.b.eval_batch(ctx)


class IsLe(_Binary):
    __slots__ = ()
    sort = BOOL
    token = "is_le"
    flop_cost = 1

    def eval(self, w, state):
        return self.a.eval(w, state) <= self.b.eval(w, state)

    def eval_batch(self, ctx):
        return self.a.eval_batch(ctx) <= self.b.eval_batch(ctx)


class IsEq(_Binary):
    """Equality within 1e-9 (exact float equality is useless mid-pipeline)."""

    __slots__ = ()
    sort = BOOL
    token = "is_eq"
    flop_cost = 1

    def eval(self, w, state):
        return abs(self.a.eval(w, state) - self.b.eval(w, state)) <= EQ_TOL

    def eval_batch(self, ctx):
        return np.abs(self.a.eval_batch(ctx) - self.b.eval_batch(ctx)) <= EQ_TOL


class And(_Binary):
    __slots__ = ()
    sort = BOOL
    token = "and"
    arg_sorts = (BOOL, BOOL)
    flop_cost = 1

    def eval(self, w, state):
        return self.a.eval(w, state) and self.b.eval(w, state)

    def eval_batch(self, ctx):
        return np.logical_and(self.a.eval_batch(ctx), self.b.eval_batch(ctx))


class Or(_Binary):
    __slots__ = ()
    sort = BOOL
    token = "or"
    arg_sorts = (BOOL, BOOL)
    flop_cost = 1

    def eval(self, w, state):
        return self.a.eval(w, state) or self.b.eval(w, state)

    def eval_batch(self, ctx):
        return np.logical_or(self.a.eval_batch(ctx), self.b.eval_batch(ctx))


class Not(_Unary):
    __slots__ = ()
    sort = BOOL
    token = "not"
    arg_sorts = (BOOL,)
    flop_cost = 1

    def eval(self, w, state):
        return not self.a.eval(w, state)

    def eval_batch(self, ctx):
        return np.logical_not(self.a.eval_batch(ctx))


NUM_BINARY = (Add, Sub, Mul, Div)
NUM_UNARY = (Sin, Cos, Tan, Cot, Square, Cube, Sqrt, Exp, Log, Abs)
CMP_OPS = (IsLt, IsLe, IsEq)
BOOL_BINARY = (And, Or)

_OP_BY_TOKEN = {cls.token: cls for cls in
                NUM_BINARY + NUM_UNARY + CMP_OPS + BOOL_BINARY + (Not,)}


# --- policy tree ------------------------------------------------------------

@dataclass
class AgentState:
    """Mutable per-connection state shared by tree and branch logic."""

    internal_state: int = 0
    branch_history: list = field(default_factory=list)  # recent raw decider labels
    current_branch: int | None = None


class ActionNode:
    """Leaf: numeric expression -> action in [-1, 1]; may set the state flag."""

    __slots__ = ("expr", "set_state")

    def __init__(self, expr: Expr, set_state: int | None = None):
        if expr.sort != NUM:
            raise TypeError(f"action expression must be numeric, got {expr.sort}")
        if set_state not in (None, 0, 1):
            raise ValueError(f"set_state must be None, 0 or 1, got {set_state}")
        self.expr = expr
        self.set_state = set_state


class ConditionNode:
    """Internal node: boolean predicate gates left (true) / right (false)."""

    __slots__ = ("pred", "left", "right")

    def __init__(self, pred: Expr, left, right):
        if pred.sort != BOOL:
            raise TypeError(f"condition must be boolean, got {pred.sort}")
        self.pred = pred
        self.left = left
        self.right = right


def eval_tree(tree, history, state: AgentState) -> float:
    """Evaluate one decision: descend conditions, clamp the leaf action."""
    w = history if isinstance(history, list) else history.window
    node = tree
    while type(node) is ConditionNode:
        node = node.left if node.pred.eval(w, state) else node.right
    v = node.expr.eval(w, state)
    if v > 1.0:
        v = 1.0
    elif v < -1.0:
        v = -1.0
    if node.set_state is not None:
        state.internal_state = node.set_state
    return v


def eval_tree_batch(tree, ctx: BatchCtx) -> np.ndarray:
    """Vectorized tree evaluation over a rollout matrix (state flags inert)."""
    if isinstance(ctx, np.ndarray):
        ctx = BatchCtx(ctx)
    out = np.empty(ctx.n)

    def rec(node, mask):
        if not mask.any():
            return
        if type(node) is ActionNode:
            vals = np.clip(node.expr.eval_batch(ctx), -1.0, 1.0)
            out[mask] = vals[mask]
            return
        cond = node.pred.eval_batch(ctx)
        rec(node.left, mask & cond)
        rec(node.right, mask & ~cond)

    rec(tree, np.ones(ctx.n, dtype=bool))
    return out


# --- inspection -------------------------------------------------------------

def expr_nodes(expr: Expr):
    """Yield every node of an expression, preorder."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.args))


def count_expr_nodes(expr: Expr) -> int:
    return sum(1 for _ in expr_nodes(expr))


def expr_depth(expr: Expr) -> int:
    args = expr.args
    if not args:
        return 1
    return 1 + max(expr_depth(a) for a in args)


def expr_flops(expr: Expr, k: int = 10) -> int:
    total = 0
    for node in expr_nodes(expr):
        if isinstance(node, SlopeObs):
            total += 2 * k + 2
        else:
            total += node.flop_cost
    return total


def count_flops(node, k: int = 10) -> int:
    """Worst-case FLOPs per decision: max root-to-leaf path of a tree, or
    the total cost of a bare expression."""
    if isinstance(node, Expr):
        return expr_flops(node, k)
    if type(node) is ActionNode:
        return expr_flops(node.expr, k)
    here = expr_flops(node.pred, k)
    return here + max(count_flops(node.left, k), count_flops(node.right, k))


def tree_leaves(tree):
    stack = [tree]
    while stack:
        node = stack.pop()
        if type(node) is ActionNode:
            yield node
        else:
            stack.append(node.right)
            stack.append(node.left)


def tree_depth(tree) -> int:
    if type(node := tree) is ActionNode:
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def clone_expr(expr: Expr) -> Expr:
    return expr.with_args(tuple(clone_expr(a) for a in expr.args))


def clone_tree(tree):
    if type(tree) is ActionNode:
        return ActionNode(clone_expr(tree.expr), tree.set_state)
    return ConditionNode(clone_expr(tree.pred), clone_tree(tree.left),
                         clone_tree(tree.right))


def validate_tree(node, k: int | None = None) -> None:
    """Re-check sort and index constraints on a loaded tree (construction
    already enforces sorts; this guards hand-edited files)."""
    if type(node) is ActionNode:
        _validate_expr(node.expr, NUM, k)
        return
    if type(node) is ConditionNode:
        _validate_expr(node.pred, BOOL, k)
        validate_tree(node.left, k)
        validate_tree(node.right, k)
        return
    raise TypeError(f"not a tree node: {node!r}")


def _validate_expr(expr: Expr, want_sort: str, k: int | None) -> None:
    if expr.sort != want_sort:
        raise TypeError(f"expected {want_sort} expression, got {expr.sort} "
                        f"({expr.token})")
    if k is not None and isinstance(expr, GetObs) and expr.index >= k:
        raise ValueError(f"history index {expr.index} out of range for k={k}")
    if isinstance(expr, _Binary):
        _validate_expr(expr.a, expr.arg_sorts[0], k)
        _validate_expr(expr.b, expr.arg_sorts[1], k)
    elif isinstance(expr, _Unary):
        _validate_expr(expr.a, expr.arg_sorts[0], k)


# --- serialization ----------------------------------------------------------

class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


def serialize_expr(expr: Expr) -> str:
    if isinstance(expr, Const):
        return repr(expr.value)
    if isinstance(expr, GetObs):
        return f"(get {SERIES_NAMES[expr.series]} {expr.index})"
    if isinstance(expr, SlopeObs):
        return f"(slope {SERIES_NAMES[expr.series]})"
    if isinstance(expr, StateRef):
        return "(state)"
    parts = " ".join(serialize_expr(a) for a in expr.args)
    return f"({expr.token} {parts})"


def serialize_tree(tree, indent: int = 0) -> str:
    """Canonical text form: deterministic spacing, one condition per line."""
    pad = "  " * indent
    if type(tree) is ActionNode:
        if tree.set_state is None:
            return f"{pad}(act {serialize_expr(tree.expr)})"
        return f"{pad}(act {serialize_expr(tree.expr)} set {tree.set_state})"
    left = serialize_tree(tree.left, indent + 1)
    right = serialize_tree(tree.right, indent + 1)
    return f"{pad}(if {serialize_expr(tree.pred)}\n{left}\n{right})"


def _tokenize(text: str):
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
        elif ch in " \t\r":
            col += 1
            i += 1
        elif ch in "()":
            tokens.append((ch, line, col))
            col += 1
            i += 1
        else:
            j = i
            while j < n and text[j] not in " \t\r\n()":
                j += 1
            tokens.append((text[i:j], line, col))
            col += j - i
            i = j
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def error(self, message: str, at=None):
        if at is None:
            at = self.tokens[self.pos] if self.pos < len(self.tokens) else None
        if at is None:
            last = self.tokens[-1] if self.tokens else ("", 1, 1)
            raise ParseError(message + " (unexpected end of input)", last[1], last[2])
        raise ParseError(message, at[1], at[2])

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self, expect: str | None = None):
        tok = self.peek()
        if tok is None:
            self.error(f"expected {expect or 'token'}")
        self.pos += 1
        if expect is not None and tok[0] != expect:
            self.error(f"expected '{expect}', found '{tok[0]}'", tok)
        return tok

    def parse_tree_node(self):
        self.next("(")
        head = self.next()
        if head[0] == "if":
            pred = self.parse_expr(BOOL)
            left = self.parse_tree_node()
            right = self.parse_tree_node()
            self.next(")")
            return ConditionNode(pred, left, right)
        if head[0] == "act":
            expr = self.parse_expr(NUM)
            set_state = None
            tok = self.peek()
            if tok is not None and tok[0] == "set":
                self.next()
                flag = self.next()
                if flag[0] not in ("0", "1"):
                    self.error(f"set flag must be 0 or 1, found '{flag[0]}'", flag)
                set_state = int(flag[0])
            self.next(")")
            return ActionNode(expr, set_state)
        self.error(f"expected 'if' or 'act', found '{head[0]}'", head)

    def parse_series(self):
        tok = self.next()
        if tok[0] not in SERIES_INDEX:
            self.error(f"expected one of {SERIES_NAMES}, found '{tok[0]}'", tok)
        return SERIES_INDEX[tok[0]]

    def parse_expr(self, want_sort: str):
        tok = self.peek()
        if tok is None:
            self.error(f"expected {want_sort} expression")
        if tok[0] != "(":
            self.next()
            if want_sort != NUM:
                self.error(f"expected boolean expression, found '{tok[0]}'", tok)
            try:
                return Const(float(tok[0]))
            except ValueError:
                self.error(f"expected a float constant, found '{tok[0]}'", tok)
        self.next("(")
        head = self.next()
        name = head[0]
        if name == "get":
            series = self.parse_series()
            idx_tok = self.next()
            try:
                index = int(idx_tok[0])
            except ValueError:
                index = -1
            if index < 0:
                self.error(f"expected a non-negative index, found '{idx_tok[0]}'",
                           idx_tok)
            self.next(")")
            node = GetObs(series, index)
        elif name == "slope":
            series = self.parse_series()
            self.next(")")
            node = SlopeObs(series)
        elif name == "state":
            self.next(")")
            node = StateRef()
        elif name in _OP_BY_TOKEN:
            cls = _OP_BY_TOKEN[name]
            try:
                if issubclass(cls, _Unary):
                    node = cls(self.parse_expr(cls.arg_sorts[0]))
                else:
                    a = self.parse_expr(cls.arg_sorts[0])
                    b = self.parse_expr(cls.arg_sorts[1])
                    node = cls(a, b)
            except TypeError as exc:
                self.error(str(exc), head)
            self.next(")")
        else:
            self.error(f"unknown operator '{name}'", head)
        if node.sort != want_sort:
            self.error(f"expected {want_sort} expression, got {node.sort} "
                       f"('{name}')", head)
        return node


def parse_tree(text: str):
    parser = _Parser(text)
    if parser.peek() is None:
        raise ParseError("empty input", 1, 1)
    tree = parser.parse_tree_node()
    trailing = parser.peek()
    if trailing is not None:
        parser.error(f"trailing input '{trailing[0]}'", trailing)
    return tree


def parse_expr(text: str, sort: str = NUM) -> Expr:
    parser = _Parser(text)
    expr = parser.parse_expr(sort)
    trailing = parser.peek()
    if trailing is not None:
        parser.error(f"trailing input '{trailing[0]}'", trailing)
    return expr


def save_tree(tree, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_tree(tree))
        fh.write("\n")


def load_tree(path: str):
    with open(path) as fh:
        return parse_tree(fh.read())
