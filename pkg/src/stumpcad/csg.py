"""Boolean solid modeling: expression trees, three-layer stumps, and the
executable normalization between them.

A *stump* is the fixed-depth normal form used throughout this package: a
complement layer (one bit per primitive), an intersection layer (one column
per constituent solid) and a single union node on top, encoded by the three
binary matrices ``w_c`` (K), ``w_i`` (K×C) and ``w_u`` (C). Arbitrary
expression trees convert into this form without changing occupancy anywhere;
:func:`tree_to_stump` performs the construction and the test suite checks it
bit-for-bit against direct tree evaluation.

Occupancy algebra on bits: complement is ``1−O``, intersection ``min``,
union ``max``, difference ``min(O_a, 1−O_b)``. The soft evaluator replaces
bits with sigmoid occupancies and min/max with softmax-weighted averages so
the whole pipeline is differentiable in every primitive parameter and
connection weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import Primitive, Sharpness, sigmoid


# ---------------------------------------------------------------------------
# Expression trees
# ---------------------------------------------------------------------------

class CsgExpr:
    """Base class for expression nodes. Leaves index a shared primitive table."""

    __slots__ = ()


@dataclass(frozen=True)
class Leaf(CsgExpr):
    index: int


@dataclass(frozen=True)
class Union(CsgExpr):
    left: CsgExpr
    right: CsgExpr


@dataclass(frozen=True)
class Intersection(CsgExpr):
    left: CsgExpr
    right: CsgExpr


@dataclass(frozen=True)
class Difference(CsgExpr):
    left: CsgExpr
    right: CsgExpr


@dataclass(frozen=True)
class Complement(CsgExpr):
    child: CsgExpr


@dataclass(frozen=True)
class Universe(CsgExpr):
    pass


@dataclass(frozen=True)
class Empty(CsgExpr):
    pass


UNIVERSE = Universe()
EMPTY = Empty()


def validate_expr(expr: CsgExpr, prims: list[Primitive]) -> None:
    """Raise ValueError on out-of-range leaf indices."""
    k = len(prims)
    for node in walk(expr):
        if isinstance(node, Leaf) and not (0 <= node.index < k):
            raise ValueError(f"leaf index {node.index} out of range for table of {k}")


def walk(expr: CsgExpr):
    """Yield every node of the tree, parents before children."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, (Union, Intersection, Difference)):
            stack.append(node.right)
            stack.append(node.left)
        elif isinstance(node, Complement):
            stack.append(node.child)


def eval_tree_hard(expr: CsgExpr, prims: list[Primitive], points) -> np.ndarray:
    """Hard occupancy bits of the tree at ``points`` (N,3) → (N,) uint8."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]

    def rec(node: CsgExpr) -> np.ndarray:
        if isinstance(node, Leaf):
            return geometry.occupancy_hard(prims[node.index], pts)
        if isinstance(node, Union):
            return np.maximum(rec(node.left), rec(node.right))
        if isinstance(node, Intersection):
            return np.minimum(rec(node.left), rec(node.right))
        if isinstance(node, Difference):
            return np.minimum(rec(node.left), 1 - rec(node.right))
        if isinstance(node, Complement):
            return 1 - rec(node.child)
        if isinstance(node, Universe):
            return np.ones(n, dtype=np.uint8)
        if isinstance(node, Empty):
            return np.zeros(n, dtype=np.uint8)
        raise TypeError(f"not a CSG node: {node!r}")

    return rec(expr).astype(np.uint8)


# ---------------------------------------------------------------------------
# Stumps
# ---------------------------------------------------------------------------

def _binary_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a)
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} entries must be 0 or 1")
    m = m.astype(np.uint8)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class Stump:
    """K primitives plus binary connection matrices w_c (K), w_i (K×C), w_u (C)."""

    primitives: tuple[Primitive, ...]
    w_c: np.ndarray
    w_i: np.ndarray
    w_u: np.ndarray

    def __post_init__(self):
        prims = tuple(self.primitives)
        w_c = _binary_matrix(self.w_c, "w_c")
        w_i = _binary_matrix(self.w_i, "w_i")
        w_u = _binary_matrix(self.w_u, "w_u")
        k = len(prims)
        if w_i.ndim != 2:
            raise ValueError(f"w_i must be 2-d, got shape {w_i.shape}")
        c = w_i.shape[1]
        if w_c.shape != (k,) or w_i.shape != (k, c) or w_u.shape != (c,):
            raise ValueError(
                f"inconsistent stump dims: K={k}, w_c{w_c.shape}, w_i{w_i.shape}, w_u{w_u.shape}"
            )
        object.__setattr__(self, "primitives", prims)
        object.__setattr__(self, "w_c", w_c)
        object.__setattr__(self, "w_i", w_i)
        object.__setattr__(self, "w_u", w_u)

    @property
    def k(self) -> int:
        return len(self.primitives)

    @property
    def c(self) -> int:
        return self.w_i.shape[1]


def _unit_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if not np.isfinite(m).all() or (m < 0).any() or (m > 1).any():
        raise ValueError(f"{name} entries must lie in [0, 1]")
    m = m.copy()
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class SoftStump:
    """Stump with weights relaxed to [0,1] and explicit sharpness."""

    primitives: tuple[Primitive, ...]
    w_c: np.ndarray
    w_i: np.ndarray
    w_u: np.ndarray
    sharpness: Sharpness = field(default_factory=Sharpness)

    def __post_init__(self):
        prims = tuple(self.primitives)
        w_c = _unit_matrix(self.w_c, "w_c")
        w_i = _unit_matrix(self.w_i, "w_i")
        w_u = _unit_matrix(self.w_u, "w_u")
        k = len(prims)
        if w_i.ndim != 2:
            raise ValueError(f"w_i must be 2-d, got shape {w_i.shape}")
        c = w_i.shape[1]
        if w_c.shape != (k,) or w_i.shape != (k, c) or w_u.shape != (c,):
            raise ValueError(
                f"inconsistent stump dims: K={k}, w_c{w_c.shape}, w_i{w_i.shape}, w_u{w_u.shape}"
            )
        object.__setattr__(self, "primitives", prims)
        object.__setattr__(self, "w_c", w_c)
        object.__setattr__(self, "w_i", w_i)
        object.__setattr__(self, "w_u", w_u)

    @property
    def k(self) -> int:
        return len(self.primitives)

    @property
    def c(self) -> int:
        return self.w_i.shape[1]


def soft_lift(s: Stump, low: float = 0.01, high: float = 0.99,
              sharpness: Sharpness | None = None) -> SoftStump:
    """Binary stump → soft stump with weights mapped {0,1} → {low, high}."""
    span = high - low

    def lift(m):
        return low + span * m.astype(np.float64)

    return SoftStump(s.primitives, lift(s.w_c), lift(s.w_i), lift(s.w_u),
                     sharpness or Sharpness())


def binarize(s: SoftStump, threshold: float = 0.5) -> Stump:
    """Threshold every weight (``>= threshold`` → 1); primitives unchanged."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    b = lambda m: (m >= threshold).astype(np.uint8)
    return Stump(s.primitives, b(s.w_c), b(s.w_i), b(s.w_u))


def stump_eval_hard(s: Stump, points) -> np.ndarray:
    """Hard stump occupancy at ``points`` → (N,) uint8.

    Per-primitive bits flow through the complement layer
    F_i = w_c·(1−O_i) + (1−w_c)·O_i, each intersection column takes the min
    over its selected rows (empty selection ⇒ 1), and the union node the max
    over selected columns (empty selection ⇒ 0).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    if s.c == 0 or s.w_u.sum() == 0:
        return np.zeros(n, dtype=np.uint8)
    if s.k == 0:
        sel = np.ones((n, s.c), dtype=np.uint8)
    else:
        occ = np.stack([geometry.occupancy_hard(p, pts) for p in s.primitives], axis=1)
        f = np.where(s.w_c.astype(bool), 1 - occ, occ)
        sel = np.min(np.where(s.w_i.astype(bool)[None, :, :], f[:, :, None], 1), axis=1)
    return np.max(np.where(s.w_u.astype(bool)[None, :], sel, 0), axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# Soft evaluation (forward + analytic backward)
# ---------------------------------------------------------------------------

@dataclass
class SoftTrace:
    """Intermediates of one soft forward pass, kept for the backward pass."""

    stump: SoftStump
    points: np.ndarray       # (N,3)
    d: np.ndarray            # (N,K) signed distances
    f: np.ndarray            # (N,K) complement-layer occupancies
    g: np.ndarray            # (N,K,C) gated column inputs
    a: np.ndarray            # (N,K,C) softmax weights of min*
    s: np.ndarray            # (N,C) column values
    u: np.ndarray            # (N,C) union-gated column values
    b: np.ndarray            # (N,C) softmax weights of max*
    t: np.ndarray            # (N,) final occupancy


@dataclass
class StumpGrads:
    """Gradients w.r.t. every stump parameter (lists indexed by primitive)."""

    d_q: list[np.ndarray]
    d_t: list[np.ndarray]
    d_r: list[np.ndarray]
    d_w_c: np.ndarray
    d_w_i: np.ndarray
    d_w_u: np.ndarray


def softmin_weights(values: np.ndarray, psi: float, axis: int) -> np.ndarray:
    return _softmax(-psi * values, axis)


def softmax_weights(values: np.ndarray, psi: float, axis: int) -> np.ndarray:
    return _softmax(psi * values, axis)


def _softmax(scores: np.ndarray, axis: int) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def soft_forward(s: SoftStump, points) -> SoftTrace:
    """Differentiable stump occupancy; returns the full trace."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    eta, psi = s.sharpness.eta, s.sharpness.psi
    if s.k == 0:
        d = np.zeros((n, 0))
        f = np.zeros((n, 0))
        g = np.ones((n, 0, s.c))
        a = np.ones((n, 0, s.c))
        col = np.ones((n, s.c))
    else:
        d = np.stack([geometry.sdf(p, pts) for p in s.primitives], axis=1)
        # complemented entries use the sign-flipped sigmoid directly
        f = s.w_c[None, :] * sigmoid(eta * d) + (1.0 - s.w_c[None, :]) * sigmoid(-eta * d)
        g = s.w_i[None, :, :] * f[:, :, None] + (1.0 - s.w_i[None, :, :])
        a = softmin_weights(g, psi, axis=1)
        col = np.einsum("nkc,nkc->nc", a, g)
    u = s.w_u[None, :] * col
    if s.c == 0:
        t = np.zeros(n)
        b = np.ones((n, 0))
    else:
        b = softmax_weights(u, psi, axis=1)
        t = np.einsum("nc,nc->n", b, u)
    return SoftTrace(stump=s, points=pts, d=d, f=f, g=g, a=a, s=col, u=u, b=b, t=t)


def stump_eval_soft(s: SoftStump, points) -> np.ndarray:
    """Soft stump occupancy in [0,1] at ``points`` → (N,)."""
    return soft_forward(s, points).t


def soft_backward(trace: SoftTrace, d_t: np.ndarray) -> StumpGrads:
    """Pull per-point cotangents ``d_t`` (N,) back to all stump parameters.

    The softened extrema are weighted averages y = Σ a_i v_i with
    a = softmax(±psi·v), whose exact Jacobian is
    ∂y/∂v_i = a_i·(1 ± psi·(v_i − y)).
    """
    s = trace.stump
    psi = s.sharpness.psi
    eta = s.sharpness.eta
    d_t = np.asarray(d_t, dtype=np.float64)

    if s.c > 0:
        d_u = d_t[:, None] * trace.b * (1.0 + psi * (trace.u - trace.t[:, None]))
        d_w_u = np.einsum("nc,nc->c", d_u, trace.s)
        d_col = d_u * s.w_u[None, :]
    else:
        d_w_u = np.zeros(0)
        d_col = np.zeros((trace.points.shape[0], 0))

    if s.k == 0:
        return StumpGrads([], [], [], np.zeros(0), np.zeros((0, s.c)), d_w_u)

    d_g = d_col[:, None, :] * trace.a * (1.0 - psi * (trace.g - trace.s[:, None, :]))
    d_f = np.einsum("nkc,kc->nk", d_g, s.w_i)
    d_w_i = np.einsum("nkc,nk->kc", d_g, trace.f - 1.0)

    occ_neg = sigmoid(-eta * trace.d)
    occ_pos = sigmoid(eta * trace.d)
    d_w_c = np.einsum("nk,nk->k", d_f, occ_pos - occ_neg)
    phi_prime = occ_pos * occ_neg  # Φ'(x) = Φ(x)·Φ(−x), symmetric in the sign
    d_d = d_f * (eta * phi_prime) * (2.0 * s.w_c[None, :] - 1.0)

    d_q, d_tr, d_r = [], [], []
    for k, prim in enumerate(s.primitives):
        _, grads = geometry.sdf_with_grads(prim, trace.points)
        ck = d_d[:, k]
        d_q.append(ck @ grads.d_q)
        d_tr.append(ck @ grads.d_t)
        d_r.append(ck @ grads.d_r)
    return StumpGrads(d_q=d_q, d_t=d_tr, d_r=d_r, d_w_c=d_w_c, d_w_i=d_w_i, d_w_u=d_w_u)


# ---------------------------------------------------------------------------
# Tree → stump normalization
# ---------------------------------------------------------------------------

class ColumnBudgetError(Exception):
    """Normalization produced more intersection columns than the cap allows."""


# a term maps primitive index -> complemented? ; stored as sorted tuples
_Term = tuple[tuple[int, bool], ...]


def _merge(a: _Term, b: _Term) -> _Term | None:
    """Intersect two terms; None when a literal meets its own complement."""
    lits = dict(a)
    for idx, neg in b:
        if lits.get(idx, neg) != neg:
            return None
        lits[idx] = neg
    return tuple(sorted(lits.items()))


def _dedup(terms: list[_Term]) -> list[_Term]:
    seen = set()
    out = []
    for t in terms:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def _to_terms(expr: CsgExpr, cap: int) -> list[_Term]:
    if isinstance(expr, Leaf):
        return [((expr.index, False),)]
    if isinstance(expr, Empty):
        return []
    if isinstance(expr, Universe):
        return [()]
    if isinstance(expr, Union):
        return _check_cap(_dedup(_to_terms(expr.left, cap) + _to_terms(expr.right, cap)), cap)
    if isinstance(expr, Intersection):
        left = _to_terms(expr.left, cap)
        right = _to_terms(expr.right, cap)
        # second operand outer, first inner: γ₁η₁ … γ_mη₁, γ₁η₂ …
        merged = []
        for eta_t in right:
            for gamma in left:
                m = _merge(gamma, eta_t)
                if m is not None:
                    merged.append(m)
        return _check_cap(_dedup(merged), cap)
    if isinstance(expr, Difference):
        left = _to_terms(expr.left, cap)
        right = _to_terms(expr.right, cap)
        # complement of a union of terms: pick one negated literal per term
        out = []
        for gamma in left:
            partial = [gamma]
            for eta_t in right:
                if not eta_t:  # ηᶜ of the universe term is empty: drop everything
                    partial = []
                    break
                nxt = []
                for base in partial:
                    for idx, neg in eta_t:
                        m = _merge(base, ((idx, not neg),))
                        if m is not None:
                            nxt.append(m)
                partial = _dedup(nxt)
                _check_cap(partial, cap)
            out.extend(partial)
        return _check_cap(_dedup(out), cap)
    if isinstance(expr, Complement):
        return _to_terms(Difference(UNIVERSE, expr.child), cap)
    raise TypeError(f"not a CSG node: {expr!r}")


def _check_cap(terms: list, cap: int) -> list:
    if len(terms) > cap:
        raise ColumnBudgetError(
            f"normalization exceeded the column cap ({len(terms)} > {cap})"
        )
    return terms


def tree_to_stump(expr: CsgExpr, prims: list[Primitive], max_columns: int = 4096) -> Stump:
    """Flatten an expression tree into an equivalent stump.

    The construction unions one intersection column per disjunctive term.
    The complement bit is global per table entry, so a primitive required in
    both polarities appears twice in the output table (same geometry, one
    row per polarity). Occupancy is preserved exactly everywhere.
    """
    validate_expr(expr, prims)
    terms = _to_terms(expr, max_columns)

    used_pos = set()
    used_neg = set()
    for term in terms:
        for idx, neg in term:
            (used_neg if neg else used_pos).add(idx)

    rows: list[tuple[int, bool]] = []
    for idx in range(len(prims)):
        if idx in used_pos:
            rows.append((idx, False))
        if idx in used_neg:
            rows.append((idx, True))
    row_of = {key: i for i, key in enumerate(rows)}

    k, c = len(rows), len(terms)
    w_c = np.array([1 if neg else 0 for _, neg in rows], dtype=np.uint8)
    w_i = np.zeros((k, c), dtype=np.uint8)
    for j, term in enumerate(terms):
        for lit in term:
            w_i[row_of[lit], j] = 1
    w_u = np.ones(c, dtype=np.uint8)
    table = tuple(prims[idx] for idx, _ in rows)
    return Stump(table, w_c, w_i, w_u)


def stump_as_tree(s: Stump) -> tuple[CsgExpr, list[Primitive]]:
    """Unfold a stump into a right-associated expression tree."""

    def fold(items: list[CsgExpr], op, empty: CsgExpr) -> CsgExpr:
        if not items:
            return empty
        out = items[-1]
        for node in reversed(items[:-1]):
            out = op(node, out)
        return out

    columns = []
    for j in range(s.c):
        if not s.w_u[j]:
            continue
        lits: list[CsgExpr] = []
        for i in range(s.k):
            if s.w_i[i, j]:
                leaf: CsgExpr = Leaf(i)
                lits.append(Complement(leaf) if s.w_c[i] else leaf)
        columns.append(fold(lits, Intersection, UNIVERSE))
    return fold(columns, Union, EMPTY), list(s.primitives)


# ---------------------------------------------------------------------------
# Sample-faithful pruning
# ---------------------------------------------------------------------------

def simplify_stump(s: Stump, points) -> Stump:
    """Drop columns and primitives that cannot change occupancy on ``points``.

    Accepts an (N,3) array or any object with a ``points`` attribute.
    Inactive columns (w_u = 0) go first, then columns whose removal leaves
    the evaluation unchanged on every test point, then unreferenced
    primitives. Output occupancy on ``points`` matches the input bit-for-bit.
    """
    pts = getattr(points, "points", points)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))

    if s.k:
        occ = np.stack([geometry.occupancy_hard(p, pts) for p in s.primitives], axis=1)
        f = np.where(s.w_c.astype(bool), 1 - occ, occ)
        col = np.min(np.where(s.w_i.astype(bool)[None, :, :], f[:, :, None], 1), axis=1)
    else:
        col = np.ones((pts.shape[0], s.c), dtype=np.uint8)

    keep = [j for j in range(s.c) if s.w_u[j]]
    target = col[:, keep].max(axis=1) if keep else np.zeros(pts.shape[0], dtype=np.uint8)

    for j in list(keep):
        trial = [x for x in keep if x != j]
        t = col[:, trial].max(axis=1) if trial else np.zeros_like(target)
        if np.array_equal(t, target):
            keep = trial

    w_i = s.w_i[:, keep]
    live_rows = [i for i in range(s.k) if w_i[i].any()]
    return Stump(
        tuple(s.primitives[i] for i in live_rows),
        s.w_c[live_rows],
        w_i[live_rows],
        np.ones(len(keep), dtype=np.uint8),
    )
