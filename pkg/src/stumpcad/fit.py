"""Connection-matrix recovery and continuous refinement.

The discrete side treats fitting as binary programming: given per-point
primitive occupancies and target bits, choose the complement / intersection
/ union connection bits minimizing mean absolute occupancy error. Three
solvers cover different regimes: exact enumeration for tiny instances, the
signature (minterm) construction as a fast constructive bound, and seeded
simulated annealing for everything else.

The continuous side optimizes a soft stump's primitive parameters and
connection weights jointly by Adam on analytic gradients, with intrinsics
log-parameterized, weights logit-parameterized and quaternions re-normalized
after every step.
"""

from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import csg, geometry
from .csg import SoftStump, Stump
from .geometry import Primitive
from .sampling import TestPointSet


class Solver(enum.Enum):
    EXHAUSTIVE = "exhaustive"
    MINTERM = "minterm"
    ANNEAL = "anneal"
    CONTINUOUS = "continuous"


class BudgetExceededError(Exception):
    """Instance is too large for the exhaustive search cap."""


class NonFiniteLossError(Exception):
    """Continuous refinement hit a NaN/inf; carries the iteration and culprit."""

    def __init__(self, iteration: int, parameter: str):
        super().__init__(f"non-finite loss at iteration {iteration} (suspect: {parameter})")
        self.iteration = iteration
        self.parameter = parameter


@dataclass
class FitReport:
    """Outcome of one solver run. ``objective`` is the final mean absolute
    occupancy error; the trace's last entry always equals it."""

    objective: float
    objective_trace: list[float]
    iterations: int
    wall_time: float
    solver: Solver
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.objective <= 1.0:
            raise ValueError(f"objective must be in [0,1], got {self.objective}")
        if not self.objective_trace or self.objective_trace[-1] != self.objective:
            raise ValueError("trace must be non-empty and end at the objective")

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "objective_trace": list(self.objective_trace),
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "solver": self.solver.value,
            "extras": dict(self.extras),
        }


@dataclass(frozen=True)
class StumpMatrices:
    """Connection-matrix triple over rows that reference instance primitives.

    ``prim_index[i]`` names the instance primitive behind row i. The
    identity mapping is the strict one-row-per-primitive format; the minterm
    construction may widen the table so one primitive appears in both
    polarities (one row per polarity).
    """

    w_c: np.ndarray
    w_i: np.ndarray
    w_u: np.ndarray
    prim_index: np.ndarray

    def __post_init__(self):
        w_c = np.asarray(self.w_c, dtype=np.uint8)
        w_i = np.asarray(self.w_i, dtype=np.uint8)
        if w_i.ndim != 2:
            w_i = w_i.reshape(w_c.shape[0], -1) if w_c.shape[0] else w_i.reshape(0, 0)
        w_u = np.asarray(self.w_u, dtype=np.uint8)
        idx = np.asarray(self.prim_index, dtype=np.int64)
        if w_u.shape != (w_i.shape[1],) or idx.shape != (w_c.shape[0],):
            raise ValueError("inconsistent matrix dimensions")
        for name, m in (("w_c", w_c), ("w_i", w_i), ("w_u", w_u)):
            if m.size and m.max() > 1:
                raise ValueError(f"{name} entries must be 0 or 1")
        object.__setattr__(self, "w_c", w_c)
        object.__setattr__(self, "w_i", w_i)
        object.__setattr__(self, "w_u", w_u)
        object.__setattr__(self, "prim_index", idx)

    @property
    def rows(self) -> int:
        return self.w_c.shape[0]

    @property
    def cols(self) -> int:
        return self.w_i.shape[1]

    def to_stump(self, primitives: list[Primitive]) -> Stump:
        table = tuple(primitives[i] for i in self.prim_index)
        return Stump(table, self.w_c, self.w_i, self.w_u)


def identity_matrices(k: int, c: int) -> StumpMatrices:
    return StumpMatrices(np.zeros(k, dtype=np.uint8), np.zeros((k, c), dtype=np.uint8),
                         np.zeros(c, dtype=np.uint8), np.arange(k))


@dataclass(frozen=True)
class BpInstance:
    """Binary-programming instance: primitive occupancy bits against targets."""

    primitive_occ: np.ndarray  # (N,K) uint8
    target: np.ndarray         # (N,) uint8
    C: int
    allow_complement: bool = True

    def __post_init__(self):
        occ = np.asarray(self.primitive_occ)
        tgt = np.asarray(self.target)
        if occ.ndim != 2:
            raise ValueError(f"primitive_occ must be (N,K), got {occ.shape}")
        if tgt.shape != (occ.shape[0],):
            raise ValueError(f"target length {tgt.shape} does not match N={occ.shape[0]}")
        for name, m in (("primitive_occ", occ), ("target", tgt)):
            if m.size and not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} entries must be 0 or 1")
        if self.C < 0:
            raise ValueError("C must be non-negative")
        occ = occ.astype(np.uint8)
        tgt = tgt.astype(np.uint8)
        occ.setflags(write=False)
        tgt.setflags(write=False)
        object.__setattr__(self, "primitive_occ", occ)
        object.__setattr__(self, "target", tgt)

    @property
    def n(self) -> int:
        return self.primitive_occ.shape[0]

    @property
    def k(self) -> int:
        return self.primitive_occ.shape[1]


def instance_from_points(prims: list[Primitive], pts: TestPointSet, c: int,
                         allow_complement: bool = True) -> BpInstance:
    """Hard primitive occupancies at the test points → instance."""
    occ = np.stack([geometry.occupancy_hard(p, pts.points) for p in prims], axis=1) \
        if prims else np.zeros((pts.n, 0), dtype=np.uint8)
    return BpInstance(occ, pts.target, c, allow_complement)


def _predict(occ: np.ndarray, m: StumpMatrices) -> np.ndarray:
    """Hard stump output computed from occupancy bits alone (no SDFs)."""
    if m.rows == 0 or m.cols == 0 or not m.w_u.any():
        return np.zeros(occ.shape[0], dtype=np.uint8)
    f = occ[:, m.prim_index] ^ m.w_c[None, :]
    zero_hit = ((1 - f)[:, :, None] & m.w_i[None, :, :]).max(axis=1)
    s = 1 - zero_hit
    return (s & m.w_u[None, :]).max(axis=1).astype(np.uint8)


def bp_objective(inst: BpInstance, m: StumpMatrices) -> float:
    """Mean absolute error of the matrices on the instance, in [0,1]."""
    if m.prim_index.size and (m.prim_index.min() < 0 or m.prim_index.max() >= inst.k):
        raise ValueError(f"prim_index out of range for K={inst.k}")
    t = _predict(inst.primitive_occ, m)
    return float(np.abs(t.astype(np.int16) - inst.target.astype(np.int16)).mean())


# ---------------------------------------------------------------------------
# Exhaustive enumeration
# ---------------------------------------------------------------------------

def solve_exhaustive(inst: BpInstance, max_bits: int = 24) -> tuple[StumpMatrices, FitReport]:
    """Globally optimal matrices by enumerating every bit assignment.

    Assignments are scanned in lexicographic bit-string order (w_c, then
    w_i row-major, then w_u), and the first optimum wins, which makes ties
    deterministic. Refuses instances with K·C + K + C beyond ``max_bits``.
    """
    start = time.perf_counter()
    k, c, n = inst.k, inst.C, inst.n
    budget = k * c + k + c
    if budget > max_bits:
        raise BudgetExceededError(
            f"instance needs {budget} bits (K·C+K+C), cap is {max_bits}")
    free_c = k if inst.allow_complement else 0
    nbits = free_c + k * c + c
    total = 1 << nbits
    occ = inst.primitive_occ
    tgt = inst.target.astype(np.uint8)

    shifts = np.arange(nbits - 1, -1, -1, dtype=np.uint64)
    batch = max(1, (32 << 20) // max(1, n * max(k, 1) * max(c, 1)))
    best_err = n + 1
    best_index = -1
    for lo_idx in range(0, total, batch):
        ids = np.arange(lo_idx, min(lo_idx + batch, total), dtype=np.uint64)
        bits = ((ids[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
        m = len(ids)
        pos = 0
        if inst.allow_complement:
            w_c = bits[:, :k]
            pos = k
        else:
            w_c = np.zeros((m, k), dtype=np.uint8)
        w_i = bits[:, pos:pos + k * c].reshape(m, k, c)
        w_u = bits[:, pos + k * c:]
        if k == 0:
            s = np.ones((m, n, c), dtype=np.uint8)
        else:
            f = occ[None, :, :] ^ w_c[:, None, :]
            zero_hit = ((1 - f)[:, :, :, None] & w_i[:, None, :, :]).max(axis=2)
            s = 1 - zero_hit
        if c == 0:
            t = np.zeros((m, n), dtype=np.uint8)
        else:
            t = (s & w_u[:, None, :]).max(axis=2)
        errs = (t != tgt[None, :]).sum(axis=1)
        idx = int(np.argmin(errs))
        if errs[idx] < best_err:
            best_err = int(errs[idx])
            best_index = lo_idx + idx
        if best_err == 0 and best_index >= 0:
            break

    bits = np.array([(best_index >> int(sh)) & 1 for sh in shifts], dtype=np.uint8)
    pos = 0
    if inst.allow_complement:
        w_c = bits[:k]
        pos = k
    else:
        w_c = np.zeros(k, dtype=np.uint8)
    sol = StumpMatrices(w_c, bits[pos:pos + k * c].reshape(k, c),
                        bits[pos + k * c:], np.arange(k))
    objective = best_err / n
    report = FitReport(objective, [objective], iterations=best_index + 1 if best_err == 0 else total,
                       wall_time=time.perf_counter() - start, solver=Solver.EXHAUSTIVE)
    return sol, report


# ---------------------------------------------------------------------------
# Minterm construction
# ---------------------------------------------------------------------------

def _signatures(inst: BpInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(unique sigs as K-bit ints, inside count, outside count) sorted by sig."""
    if inst.k > 62:
        raise ValueError("signature packing supports at most 62 primitives")
    weights = (1 << np.arange(inst.k, dtype=np.int64))
    sig = inst.primitive_occ.astype(np.int64) @ weights
    uniq, inv = np.unique(sig, return_inverse=True)
    n_in = np.bincount(inv, weights=inst.target, minlength=len(uniq)).astype(np.int64)
    n_all = np.bincount(inv, minlength=len(uniq)).astype(np.int64)
    return uniq, n_in, n_all - n_in


def _sig_bits(sig: int, k: int) -> tuple[int, ...]:
    return tuple((sig >> i) & 1 for i in range(k))


def solve_minterm(inst: BpInstance) -> tuple[StumpMatrices, FitReport]:
    """One full-conjunction column per distinct inside signature.

    Columns are ranked by (inside covered − outside wrongly covered) and
    greedily kept up to the C budget; non-positive columns never help and
    are dropped. Because a conjunction may need a primitive in either
    polarity per column, the returned matrices widen the table (one row per
    used polarity); ``prim_index`` maps rows back to instance primitives.

    The objective is exactly 0 when C covers every distinct inside
    signature and no outside point shares a signature with an inside point.
    """
    if not inst.allow_complement:
        raise ValueError("minterm construction requires allow_complement=true")
    start = time.perf_counter()
    uniq, n_in, n_out = _signatures(inst)
    k = inst.k

    cols = [(int(s), int(i), int(o)) for s, i, o in zip(uniq, n_in, n_out) if i > 0]
    required = len(cols)
    # score desc, ties by bit-string order
    cols.sort(key=lambda t: (-(t[1] - t[2]), _sig_bits(t[0], k)))
    selected = [t for t in cols if t[1] - t[2] > 0][: inst.C]

    rows: list[tuple[int, bool]] = []
    for prim in range(k):
        if any((sig >> prim) & 1 for sig, _, _ in selected):
            rows.append((prim, False))
        if any(not (sig >> prim) & 1 for sig, _, _ in selected):
            rows.append((prim, True))
    row_of = {key: i for i, key in enumerate(rows)}

    w_c = np.array([1 if neg else 0 for _, neg in rows], dtype=np.uint8)
    w_i = np.zeros((len(rows), len(selected)), dtype=np.uint8)
    for j, (sig, _, _) in enumerate(selected):
        for prim in range(k):
            neg = not (sig >> prim) & 1
            w_i[row_of[(prim, neg)], j] = 1
    w_u = np.ones(len(selected), dtype=np.uint8)
    sol = StumpMatrices(w_c, w_i, w_u, np.array([p for p, _ in rows], dtype=np.int64))

    covered = {sig for sig, _, _ in selected}
    err = sum(o for s, _, o in ((int(s), i, o) for s, i, o in zip(uniq, n_in, n_out))
              if s in covered)
    err += sum(int(i) for s, i in zip(uniq, n_in) if int(s) not in covered)
    objective = err / inst.n
    report = FitReport(
        objective, [objective], iterations=1,
        wall_time=time.perf_counter() - start, solver=Solver.MINTERM,
        extras={
            "required_columns": required,
            "conflicted_points": int(np.minimum(n_in, n_out).sum()),
        },
    )
    return sol, report


# ---------------------------------------------------------------------------
# Simulated annealing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnnealConfig:
    restarts: int = 8
    sweeps: int = 600
    decay: float = 0.995            # temperature factor per sweep
    initial_acceptance: float = 0.8  # calibrates T0 from sampled uphill moves
    seed: int = 0
    threads: int = 1
    audit_every: int = 0             # recompute the objective from scratch every n flips


class _AnnealState:
    """Strict-format matrices with O(N)-per-flip incremental error updates."""

    def __init__(self, inst: BpInstance, w_c, w_i, w_u):
        self.inst = inst
        self.occ = inst.primitive_occ
        self.tgt = inst.target
        self.w_c = w_c.astype(np.uint8).copy()
        self.w_i = w_i.astype(np.uint8).copy()
        self.w_u = w_u.astype(np.uint8).copy()
        self.k, self.c = self.w_i.shape
        self._rebuild()

    def _rebuild(self):
        self.f = self.occ ^ self.w_c[None, :]
        self.z = ((1 - self.f)[:, :, None] * self.w_i[None, :, :]).sum(axis=1).astype(np.int32)
        self.s = (self.z == 0).astype(np.int8)
        self.a = (self.s * self.w_u[None, :]).sum(axis=1).astype(np.int32)
        self.err = int(((self.a > 0).astype(np.uint8) != self.tgt).sum())

    def scratch_err(self) -> int:
        m = StumpMatrices(self.w_c, self.w_i, self.w_u, np.arange(self.k))
        return int(round(bp_objective(self.inst, m) * self.inst.n))

    def _apply_col(self, j: int, s_new: np.ndarray):
        if self.w_u[j]:
            diff = s_new.astype(np.int32) - self.s[:, j].astype(np.int32)
            hit = np.flatnonzero(diff)
            if hit.size:
                t_old = self.a[hit] > 0
                self.a[hit] += diff[hit]
                t_new = self.a[hit] > 0
                tgt = self.tgt[hit].astype(bool)
                self.err += int((t_new != tgt).sum()) - int((t_old != tgt).sum())
        self.s[:, j] = s_new

    def flip(self, move: tuple):
        kind = move[0]
        if kind == "i":
            _, k, j = move
            zk = (self.f[:, k] == 0).astype(np.int32)
            if self.w_i[k, j]:
                self.z[:, j] -= zk
                self.w_i[k, j] = 0
            else:
                self.z[:, j] += zk
                self.w_i[k, j] = 1
            self._apply_col(j, (self.z[:, j] == 0).astype(np.int8))
        elif kind == "u":
            _, j = move
            s_j = self.s[:, j].astype(np.int32)
            hit = np.flatnonzero(s_j)
            sign = -1 if self.w_u[j] else 1
            self.w_u[j] ^= 1
            if hit.size:
                t_old = self.a[hit] > 0
                self.a[hit] += sign * s_j[hit]
                t_new = self.a[hit] > 0
                tgt = self.tgt[hit].astype(bool)
                self.err += int((t_new != tgt).sum()) - int((t_old != tgt).sum())
        else:  # complement bit: touches every column selecting this row
            _, k = move
            zk_old = (self.f[:, k] == 0).astype(np.int32)
            self.f[:, k] ^= 1
            self.w_c[k] ^= 1
            sel = np.flatnonzero(self.w_i[k, :])
            if sel.size:
                self.z[:, sel] += (1 - 2 * zk_old)[:, None]
                for j in sel:
                    self._apply_col(int(j), (self.z[:, j] == 0).astype(np.int8))

    def snapshot(self) -> StumpMatrices:
        return StumpMatrices(self.w_c.copy(), self.w_i.copy(), self.w_u.copy(),
                             np.arange(self.k))


def _minterm_strict_init(inst: BpInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project the minterm truncation into strict one-row-per-primitive form.

    The global complement bit takes the majority polarity over the selected
    signatures; literals that disagree with it are dropped from their
    column, which keeps the column a superset of its signature.
    """
    k, c = inst.k, inst.C
    uniq, n_in, n_out = _signatures(inst)
    cols = [(int(s), int(i), int(o)) for s, i, o in zip(uniq, n_in, n_out) if i > 0]
    cols.sort(key=lambda t: (-(t[1] - t[2]), _sig_bits(t[0], k)))
    selected = [t[0] for t in cols if t[1] - t[2] > 0][:c]

    w_c = np.zeros(k, dtype=np.uint8)
    if inst.allow_complement and selected:
        for prim in range(k):
            neg_votes = sum(1 for sig in selected if not (sig >> prim) & 1)
            if 2 * neg_votes > len(selected):
                w_c[prim] = 1
    w_i = np.zeros((k, c), dtype=np.uint8)
    for j, sig in enumerate(selected):
        for prim in range(k):
            wants_neg = not (sig >> prim) & 1
            if wants_neg == bool(w_c[prim]):
                w_i[prim, j] = 1
    w_u = np.zeros(c, dtype=np.uint8)
    w_u[: len(selected)] = 1
    return w_c, w_i, w_u


def _anneal_once(inst: BpInstance, cfg: AnnealConfig, restart: int):
    rng = np.random.default_rng([cfg.seed, restart])
    w_c, w_i, w_u = _minterm_strict_init(inst)
    state = _AnnealState(inst, w_c, w_i, w_u)
    if restart > 0:
        # diversify later restarts around the projected start
        n_shuffle = min(restart, state.k * state.c + state.c)
        for _ in range(n_shuffle):
            state.flip(_random_move(rng, inst, state))

    moves_per_sweep = state.k * state.c + state.k + state.c
    best_err = state.err
    best = state.snapshot()
    trace = [best_err / inst.n]
    if best_err == 0:
        return best, best_err, trace, 0

    # temperature from sampled uphill deltas
    ups = []
    for _ in range(min(64, 4 * moves_per_sweep)):
        mv = _random_move(rng, inst, state)
        before = state.err
        state.flip(mv)
        delta = state.err - before
        state.flip(mv)
        if delta > 0:
            ups.append(delta)
    t0 = (float(np.mean(ups)) / -math.log(cfg.initial_acceptance)) if ups else 1.0 / inst.n
    temp = max(t0, 1e-12)

    flips = 0
    for sweep in range(cfg.sweeps):
        for _ in range(moves_per_sweep):
            mv = _random_move(rng, inst, state)
            before = state.err
            state.flip(mv)
            flips += 1
            delta = state.err - before
            if delta > 0 and rng.random() >= math.exp(-delta / temp):
                state.flip(mv)  # reject: flip back
            elif state.err < best_err:
                best_err = state.err
                best = state.snapshot()
            if cfg.audit_every and flips % cfg.audit_every == 0:
                fresh = state.scratch_err()
                if fresh != state.err:
                    raise AssertionError(
                        f"incremental error drifted: {state.err} != {fresh}")
            if best_err == 0:
                trace.append(0.0)
                return best, best_err, trace, flips
        temp *= cfg.decay
        trace.append(best_err / inst.n)
    return best, best_err, trace, flips


def _random_move(rng, inst: BpInstance, state: _AnnealState) -> tuple:
    k, c = state.k, state.c
    n_i = k * c
    n_total = n_i + c + (k if inst.allow_complement else 0)
    pick = int(rng.integers(n_total))
    if pick < n_i:
        return ("i", pick // c, pick % c)
    if pick < n_i + c:
        return ("u", pick - n_i)
    return ("c", pick - n_i - c)


def solve_anneal(inst: BpInstance, cfg: AnnealConfig | None = None) -> tuple[StumpMatrices, FitReport]:
    """Simulated annealing over strict connection bits, minterm-seeded.

    Monotone in the best-so-far (never returns anything worse than its
    initialization) and reproducible for a fixed seed, independent of how
    many worker threads run the restarts.
    """
    cfg = cfg or AnnealConfig()
    start = time.perf_counter()
    if inst.k == 0 or inst.C == 0:
        sol = identity_matrices(inst.k, inst.C)
        obj = bp_objective(inst, sol)
        return sol, FitReport(obj, [obj], 0, time.perf_counter() - start, Solver.ANNEAL)

    def run(restart):
        return _anneal_once(inst, cfg, restart)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, range(cfg.restarts)))
    else:
        results = []
        for i in range(cfg.restarts):
            results.append(run(i))
            if results[-1][1] == 0:
                break

    best_err = None
    best = None
    trace: list[float] = []
    flips = 0
    for restart, (sol, err, sub_trace, n_flips) in enumerate(results):
        trace.extend(sub_trace)
        flips += n_flips
        if best_err is None or err < best_err:
            best_err = err
            best = sol
        if best_err == 0:
            break

    objective = best_err / inst.n
    trace.append(objective)
    report = FitReport(objective, trace, iterations=flips,
                       wall_time=time.perf_counter() - start, solver=Solver.ANNEAL,
                       extras={"restarts": cfg.restarts, "sweeps": cfg.sweeps})
    return best, report


# ---------------------------------------------------------------------------
# Continuous losses
# ---------------------------------------------------------------------------

def loss_recon(s: SoftStump, pts: TestPointSet) -> float:
    """Mean squared error between soft occupancy and target bits."""
    if pts.n == 0:
        raise ValueError("empty point set")
    t = csg.stump_eval_soft(s, pts.points)
    return float(np.mean((t - pts.target.astype(np.float64)) ** 2))


def loss_primitive(s: SoftStump, pts: TestPointSet) -> float:
    """Mean over primitives of the squared SDF at the closest test point."""
    if pts.n == 0:
        raise ValueError("empty point set")
    if s.k == 0:
        return 0.0
    d = np.stack([geometry.sdf(p, pts.points) for p in s.primitives], axis=1)
    return float(np.mean(np.min(d * d, axis=0)))


def loss_total(s: SoftStump, pts: TestPointSet, lam: float = 0.001) -> float:
    """loss_recon + lam · loss_primitive (lam defaults to 1e-3)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return loss_recon(s, pts) + lam * loss_primitive(s, pts)


# ---------------------------------------------------------------------------
# Continuous refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimConfig:
    iters: int = 2000
    lr: float = 1e-3
    lam: float = 0.001
    freeze_weights: bool = False
    freeze_primitives: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


_W_EPS = 1e-7
_CONE_MAX = math.pi / 2 - 1e-6


def _logit(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, _W_EPS, 1.0 - _W_EPS)
    return np.log(w / (1.0 - w))


class _Adam:
    def __init__(self, shape, cfg: OptimConfig):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.cfg = cfg
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        self.t += 1
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad * grad
        mh = self.m / (1 - cfg.beta1 ** self.t)
        vh = self.v / (1 - cfg.beta2 ** self.t)
        return cfg.lr * mh / (np.sqrt(vh) + cfg.eps)


@dataclass
class _Params:
    logq: list[np.ndarray]
    t: list[np.ndarray]
    r: list[np.ndarray]
    lw_c: np.ndarray
    lw_i: np.ndarray
    lw_u: np.ndarray

    def build(self, template: SoftStump) -> SoftStump:
        prims = []
        for k, p in enumerate(template.primitives):
            q = np.exp(self.logq[k])
            if p.kind is geometry.Kind.CONE:
                q = np.minimum(q, _CONE_MAX)
            prims.append(Primitive(p.kind, q, geometry.Pose(self.t[k], self.r[k])))
        sig = geometry.sigmoid
        return SoftStump(tuple(prims), sig(self.lw_c), sig(self.lw_i), sig(self.lw_u),
                         template.sharpness)

    def copy(self) -> "_Params":
        return _Params([a.copy() for a in self.logq], [a.copy() for a in self.t],
                       [a.copy() for a in self.r], self.lw_c.copy(),
                       self.lw_i.copy(), self.lw_u.copy())


def _primitive_loss_grads(s: SoftStump, pts: TestPointSet, d: np.ndarray):
    """Gradient pieces of loss_primitive; d is the (N,K) distance matrix."""
    grads = []
    for k, p in enumerate(s.primitives):
        n_star = int(np.argmin(d[:, k] ** 2))
        dk, g = geometry.sdf_with_grads(p, pts.points[n_star:n_star + 1])
        coef = 2.0 * dk[0] / s.k
        grads.append((coef * g.d_q[0], coef * g.d_t[0], coef * g.d_r[0]))
    return grads


def refine_continuous(init: SoftStump, pts: TestPointSet,
                      cfg: OptimConfig | None = None) -> tuple[SoftStump, FitReport]:
    """Adam on analytic gradients of the total loss; returns the best iterate.

    Primitive intrinsics move in log space (always positive; cone angles
    additionally clamp below π/2), translations are free, quaternions
    re-normalize after every step, and connection weights move in logit
    space. ``freeze_weights`` / ``freeze_primitives`` restrict the update to
    one group. Never returns a higher total loss than the initialization.
    """
    cfg = cfg or OptimConfig()
    start = time.perf_counter()
    target = pts.target.astype(np.float64)

    if cfg.iters == 0:
        t = csg.stump_eval_soft(init, pts.points)
        obj = float(np.mean(np.abs(t - target)))
        return init, FitReport(obj, [obj], 0, time.perf_counter() - start,
                               Solver.CONTINUOUS)

    params = _Params(
        logq=[np.log(p.q) for p in init.primitives],
        t=[p.pose.t.copy() for p in init.primitives],
        r=[p.pose.r.copy() for p in init.primitives],
        lw_c=_logit(init.w_c), lw_i=_logit(init.w_i), lw_u=_logit(init.w_u),
    )
    adams = {
        "logq": [_Adam(a.shape, cfg) for a in params.logq],
        "t": [_Adam(a.shape, cfg) for a in params.t],
        "r": [_Adam(a.shape, cfg) for a in params.r],
        "lw_c": _Adam(params.lw_c.shape, cfg),
        "lw_i": _Adam(params.lw_i.shape, cfg),
        "lw_u": _Adam(params.lw_u.shape, cfg),
    }

    best_loss = math.inf
    best_params = params.copy()
    best_abs = 1.0
    trace: list[float] = []

    for it in range(cfg.iters):
        s = params.build(init)
        tr = csg.soft_forward(s, pts.points)
        diff = tr.t - target
        l_rec = float(np.mean(diff ** 2))
        l_prim = float(np.mean(np.min(tr.d ** 2, axis=0))) if s.k else 0.0
        l_tot = l_rec + cfg.lam * l_prim
        if not math.isfinite(l_tot):
            culprit = _first_nonfinite(params)
            raise NonFiniteLossError(it, culprit)
        mean_abs = float(np.mean(np.abs(diff)))
        trace.append(mean_abs)
        if l_tot < best_loss:
            best_loss = l_tot
            best_params = params.copy()
            best_abs = mean_abs
            best_extras = {"l_total": l_tot, "l_recon": l_rec, "l_primitive": l_prim}

        g = csg.soft_backward(tr, 2.0 * diff / pts.n)
        if cfg.lam > 0 and s.k and not cfg.freeze_primitives:
            for k, (gq, gt, gr) in enumerate(_primitive_loss_grads(s, pts, tr.d)):
                g.d_q[k] = g.d_q[k] + cfg.lam * gq
                g.d_t[k] = g.d_t[k] + cfg.lam * gt
                g.d_r[k] = g.d_r[k] + cfg.lam * gr

        if not cfg.freeze_primitives:
            for k in range(s.k):
                q = np.exp(params.logq[k])
                params.logq[k] -= adams["logq"][k].step(g.d_q[k] * q)
                params.logq[k] = np.minimum(params.logq[k], math.log(_CONE_MAX))
                params.t[k] -= adams["t"][k].step(g.d_t[k])
                params.r[k] -= adams["r"][k].step(g.d_r[k])
                params.r[k] /= np.linalg.norm(params.r[k])
        if not cfg.freeze_weights:
            for name, garr in (("lw_c", g.d_w_c), ("lw_i", g.d_w_i), ("lw_u", g.d_w_u)):
                lw = getattr(params, name)
                w = geometry.sigmoid(lw)
                lw -= adams[name].step(garr * w * (1.0 - w))

    trace.append(best_abs)
    report = FitReport(best_abs, trace, cfg.iters, time.perf_counter() - start,
                       Solver.CONTINUOUS, extras=best_extras)
    return best_params.build(init), report


def _first_nonfinite(params: _Params) -> str:
    for k, a in enumerate(params.logq):
        if not np.isfinite(a).all():
            return f"logq[{k}]"
    for k, a in enumerate(params.t):
        if not np.isfinite(a).all():
            return f"t[{k}]"
    for k, a in enumerate(params.r):
        if not np.isfinite(a).all():
            return f"r[{k}]"
    for name in ("lw_c", "lw_i", "lw_u"):
        if not np.isfinite(getattr(params, name)).all():
            return name
    return "loss"


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float        # over parameters with |analytic| below abs_floor
    worst_param: str
    per_class: dict
    passed: bool


def _total_loss_and_grads(s: SoftStump, pts: TestPointSet, lam: float):
    tr = csg.soft_forward(s, pts.points)
    diff = tr.t - pts.target.astype(np.float64)
    g = csg.soft_backward(tr, 2.0 * diff / pts.n)
    if lam > 0 and s.k:
        for k, (gq, gt, gr) in enumerate(_primitive_loss_grads(s, pts, tr.d)):
            g.d_q[k] = g.d_q[k] + lam * gq
            g.d_t[k] = g.d_t[k] + lam * gt
            g.d_r[k] = g.d_r[k] + lam * gr
    return g


def grad_check(s: SoftStump, pts: TestPointSet, h: float = 1e-5,
               lam: float = 0.001, rel_tol: float = 1e-4,
               abs_tol: float = 1e-7, abs_floor: float = 1e-3) -> GradCheckReport:
    """Analytic vs central-difference gradients of the total loss.

    Relative error applies where gradients exceed ``abs_floor``; below it the
    absolute difference must stay under ``abs_tol``. Weight entries sitting
    exactly on 0 or 1 use a one-sided difference.
    """
    analytic = _total_loss_and_grads(s, pts, lam)

    def rebuild_weights(name, i, j, delta):
        mats = {"w_c": s.w_c.copy(), "w_i": s.w_i.copy(), "w_u": s.w_u.copy()}
        if j is None:
            mats[name][i] += delta
        else:
            mats[name][i, j] += delta
        return SoftStump(s.primitives, mats["w_c"], mats["w_i"], mats["w_u"], s.sharpness)

    def rebuild_prim(k, attr, i, delta):
        p = s.primitives[k]
        q, t, r = p.q.copy(), p.pose.t.copy(), p.pose.r.copy()
        if attr == "q":
            q[i] += delta
        elif attr == "t":
            t[i] += delta
        else:
            r[i] += delta
        prims = list(s.primitives)
        prims[k] = Primitive(p.kind, q, geometry.Pose(t, r))
        return SoftStump(tuple(prims), s.w_c, s.w_i, s.w_u, s.sharpness)

    checks = []
    for k, p in enumerate(s.primitives):
        for i in range(p.q.shape[0]):
            checks.append((f"q[{k}][{i}]", "q", analytic.d_q[k][i],
                           lambda d, k=k, i=i: rebuild_prim(k, "q", i, d)))
        for i in range(3):
            checks.append((f"t[{k}][{i}]", "t", analytic.d_t[k][i],
                           lambda d, k=k, i=i: rebuild_prim(k, "t", i, d)))
        for i in range(4):
            checks.append((f"r[{k}][{i}]", "r", analytic.d_r[k][i],
                           lambda d, k=k, i=i: rebuild_prim(k, "r", i, d)))
    for i in range(s.k):
        checks.append((f"w_c[{i}]", "w_c", analytic.d_w_c[i],
                       lambda d, i=i: rebuild_weights("w_c", i, None, d)))
        for j in range(s.c):
            checks.append((f"w_i[{i}][{j}]", "w_i", analytic.d_w_i[i, j],
                           lambda d, i=i, j=j: rebuild_weights("w_i", i, j, d)))
    for j in range(s.c):
        checks.append((f"w_u[{j}]", "w_u", analytic.d_w_u[j],
                       lambda d, j=j: rebuild_weights("w_u", j, None, d)))

    max_rel = 0.0
    max_abs = 0.0
    worst = ""
    per_class: dict[str, float] = {}
    passed = True
    for name, cls, a, make in checks:
        try:
            f_plus = loss_total(make(+h), pts, lam)
            f_minus = loss_total(make(-h), pts, lam)
            fd = (f_plus - f_minus) / (2 * h)
        except ValueError:
            # boundary weight: one-sided difference
            base = loss_total(s, pts, lam)
            try:
                fd = (loss_total(make(+h), pts, lam) - base) / h
            except ValueError:
                fd = (base - loss_total(make(-h), pts, lam)) / h
        scale = max(abs(a), abs(fd))
        if scale >= abs_floor:
            rel = abs(a - fd) / scale
            per_class[cls] = max(per_class.get(cls, 0.0), rel)
            if rel > max_rel:
                max_rel = rel
                worst = name
            if rel > rel_tol:
                passed = False
        else:
            diff = abs(a - fd)
            max_abs = max(max_abs, diff)
            if diff > abs_tol:
                passed = False
                worst = worst or name
    return GradCheckReport(max_rel, max_abs, worst, per_class, passed)
