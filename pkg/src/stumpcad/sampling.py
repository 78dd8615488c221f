"""Labeled test-point generation and reconstruction metrics.

Samplers label points with hard tree occupancy and are deterministic per
seed. The balanced sampler guarantees an exact 1:1 inside/outside split or
raises; it never silently approximates the ratio. Chamfer distance runs on
a uniform spatial hash grid; the test suite pins it to an O(n²) brute-force
oracle, so the acceleration structure carries no correctness burden.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import csg, geometry
from .geometry import DEFAULT_WORLD_BOX


class Provenance(enum.Enum):
    ANALYTIC_TREE = "analytic_tree"
    LOADED_FILE = "loaded_file"


class InfeasibleBalanceError(Exception):
    """Balanced sampling could not find enough points of one class."""

    def __init__(self, deficient: str, found: int, needed: int):
        super().__init__(
            f"could not draw {needed} {deficient} points (found {found}); "
            f"shape is too {'empty' if deficient == 'inside' else 'full'} in this bbox"
        )
        self.deficient = deficient


@dataclass(frozen=True)
class TestPointSet:
    """N sample points with target occupancy bits and their sampling bounds."""

    points: np.ndarray   # (N,3)
    target: np.ndarray   # (N,) uint8
    bbox: tuple[np.ndarray, np.ndarray]
    provenance: Provenance = Provenance.ANALYTIC_TREE

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        tgt = np.asarray(self.target).astype(np.uint8)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (N,3) with N >= 1, got {pts.shape}")
        if tgt.shape != (pts.shape[0],):
            raise ValueError(f"target length {tgt.shape} does not match {pts.shape[0]} points")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bbox)
        if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
            raise ValueError("points fall outside the declared bbox")
        pts.setflags(write=False)
        tgt.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "bbox", (lo, hi))

    @property
    def n(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# Bounding boxes
# ---------------------------------------------------------------------------

def bbox_of_expr(expr: csg.CsgExpr, prims, world_box=DEFAULT_WORLD_BOX,
                 inflate: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Analytic world bounds of an expression, inflated by ``inflate``.

    Boxes and spheres give tight bounds; infinite cylinders and cones clamp
    to ``world_box``. Provably empty expressions fall back to ``world_box``.
    """

    def rec(node):
        if isinstance(node, csg.Leaf):
            return geometry.primitive_bbox(prims[node.index], world_box)
        if isinstance(node, csg.Universe) or isinstance(node, csg.Complement):
            return tuple(np.asarray(b, dtype=np.float64) for b in world_box)
        if isinstance(node, csg.Empty):
            return None
        if isinstance(node, csg.Union):
            a, b = rec(node.left), rec(node.right)
            if a is None:
                return b
            if b is None:
                return a
            return np.minimum(a[0], b[0]), np.maximum(a[1], b[1])
        if isinstance(node, csg.Intersection):
            a, b = rec(node.left), rec(node.right)
            if a is None or b is None:
                return None
            lo, hi = np.maximum(a[0], b[0]), np.minimum(a[1], b[1])
            return None if np.any(lo >= hi) else (lo, hi)
        if isinstance(node, csg.Difference):
            return rec(node.left)
        raise TypeError(f"not a CSG node: {node!r}")

    got = rec(expr)
    if got is None:
        got = tuple(np.asarray(b, dtype=np.float64) for b in world_box)
    lo, hi = got
    pad = inflate * (hi - lo)
    return lo - pad, hi + pad


def stump_bbox(s: csg.Stump, world_box=DEFAULT_WORLD_BOX,
               inflate: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    expr, prims = csg.stump_as_tree(s)
    return bbox_of_expr(expr, prims, world_box, inflate)


def _check_bbox(bbox):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ValueError(f"degenerate bbox: {lo} .. {hi}")
    return lo, hi


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def sample_uniform(expr: csg.CsgExpr, prims, n: int, bbox=None, seed: int = 0) -> TestPointSet:
    """n i.i.d. uniform points in the bbox, labeled by hard tree occupancy."""
    if n < 1:
        raise ValueError(f"need n >= 1 points, got {n}")
    lo, hi = _check_bbox(bbox if bbox is not None else bbox_of_expr(expr, prims))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n, 3))
    labels = csg.eval_tree_hard(expr, prims, pts)
    return TestPointSet(pts, labels, (lo, hi))


def sample_balanced(expr: csg.CsgExpr, prims, n: int, bbox=None, seed: int = 0,
                    attempt_factor: int = 1000) -> TestPointSet:
    """Exactly n/2 inside and n/2 outside points via rejection sampling.

    Draws batches until both classes are filled; gives up after
    ``attempt_factor * n`` candidate draws and raises
    :class:`InfeasibleBalanceError` naming the class that came up short.
    """
    if n < 2 or n % 2:
        raise ValueError(f"balanced sampling needs an even n >= 2, got {n}")
    lo, hi = _check_bbox(bbox if bbox is not None else bbox_of_expr(expr, prims))
    rng = np.random.default_rng(seed)
    half = n // 2
    inside, outside = [], []
    n_in = n_out = 0
    drawn = 0
    cap = attempt_factor * n
    while (n_in < half or n_out < half) and drawn < cap:
        batch = min(4 * n, cap - drawn)
        pts = rng.uniform(lo, hi, size=(batch, 3))
        drawn += batch
        labels = csg.eval_tree_hard(expr, prims, pts).astype(bool)
        if n_in < half:
            inside.append(pts[labels])
            n_in += int(labels.sum())
        if n_out < half:
            outside.append(pts[~labels])
            n_out += int((~labels).sum())
    if n_in < half or n_out < half:
        if n_in < half:
            raise InfeasibleBalanceError("inside", n_in, half)
        raise InfeasibleBalanceError("outside", n_out, half)
    pts = np.concatenate([np.concatenate(inside)[:half], np.concatenate(outside)[:half]])
    labels = np.concatenate([np.ones(half, dtype=np.uint8), np.zeros(half, dtype=np.uint8)])
    perm = rng.permutation(n)
    return TestPointSet(pts[perm], labels[perm], (lo, hi))


def sample_surface(shape, n: int, resolution: int = 128, seed: int = 0,
                   bbox=None, world_box=DEFAULT_WORLD_BOX) -> np.ndarray:
    """n points on the extracted isosurface, triangle-area-weighted.

    ``shape`` is a :class:`~stumpcad.csg.Stump` or an ``(expr, prims)``
    pair. The surface comes from rasterizing at ``resolution`` per axis and
    meshing the 0.5 level set; raises when the isosurface is empty.
    """
    from . import export

    if n < 1:
        raise ValueError(f"need n >= 1 surface points, got {n}")
    if bbox is None:
        if isinstance(shape, (csg.Stump, csg.SoftStump)):
            binary = shape if isinstance(shape, csg.Stump) else csg.binarize(shape)
            bbox = stump_bbox(binary, world_box)
        else:
            expr, prims = shape
            bbox = bbox_of_expr(expr, prims, world_box)
    grid = export.rasterize(shape, (resolution, resolution, resolution), bbox)
    mesh = export.marching_cubes(grid, 0.5)
    if mesh.vertices.shape[0] == 0:
        raise ValueError("empty isosurface at this resolution")
    return sample_mesh_surface(mesh.vertices, mesh.faces, n, seed)


def sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray, n: int,
                        seed: int = 0) -> np.ndarray:
    """Area-weighted uniform sampling of a triangle mesh → (n,3)."""
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    total = area.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(area), size=n, p=area / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    t = tri[idx]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


# ---------------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------------

class _HashGrid:
    """Uniform spatial hash over 3-d points, sized to the mean point spacing."""

    def __init__(self, points: np.ndarray):
        self.points = points
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        span = float(np.max(hi - lo))
        per_axis = max(2, round(len(points) ** (1.0 / 3.0)))
        self.cell = span / per_axis if span > 0 else 1.0
        self.lo = lo
        self.key_lo = np.zeros(3, dtype=np.int64)
        self.key_hi = np.floor((hi - lo) / self.cell).astype(np.int64)
        self.buckets: dict[tuple[int, int, int], np.ndarray] = {}
        keys = np.floor((points - lo) / self.cell).astype(np.int64)
        grouped: dict[tuple[int, int, int], list[int]] = {}
        for i, key in enumerate(map(tuple, keys)):
            grouped.setdefault(key, []).append(i)
        for key, idx in grouped.items():
            self.buckets[key] = points[idx]

    def nearest_sq(self, q: np.ndarray) -> float:
        """Squared distance from ``q`` to the closest stored point.

        Rings expand around the query cell (clamped into the occupied index
        range). Any point in a ring-r cell is at least (r−1)·cell away, so
        the scan may stop once that bound exceeds the best hit; visiting
        every bucket also ends the scan, which covers degenerate grids.
        """
        base = np.floor((q - self.lo) / self.cell).astype(np.int64)
        base = np.clip(base, self.key_lo, self.key_hi)
        best = np.inf
        visited = 0
        total = len(self.buckets)
        ring = 0
        while True:
            for pts in self._ring(base, ring):
                visited += 1
                d = np.min(np.sum((pts - q) ** 2, axis=1))
                if d < best:
                    best = d
            if visited == total:
                return float(best)
            if best < np.inf and ((ring - 1) * self.cell) ** 2 > best >= 0 and ring >= 1:
                return float(best)
            ring += 1

    def _ring(self, base, r):
        if r == 0:
            got = self.buckets.get(tuple(base))
            if got is not None:
                yield got
            return
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                step = 1 if max(abs(dx), abs(dy)) == r else 2 * r
                for dz in range(-r, r + 1, step):
                    got = self.buckets.get((base[0] + dx, base[1] + dy, base[2] + dz))
                    if got is not None:
                        yield got


def _directed_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    grid = _HashGrid(b)
    return np.array([grid.nearest_sq(q) for q in a])


def chamfer_l2(a, b, squared: bool = True) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets.

    With ``squared=True`` (the default) this is the L2 Chamfer Distance:
    (1/|a|)·Σ min‖aᵢ−b‖² + (1/|b|)·Σ min‖bⱼ−a‖². ``squared=False`` averages
    unsquared distances instead.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    d_ab = _directed_sq(a, b)
    d_ba = _directed_sq(b, a)
    if not squared:
        d_ab = np.sqrt(d_ab)
        d_ba = np.sqrt(d_ba)
    return float(d_ab.mean() + d_ba.mean())


# ---------------------------------------------------------------------------
# Point file formats
# ---------------------------------------------------------------------------

def save_xyz(path, points, labels=None) -> None:
    """Text points, one ``x y z`` (or ``x y z label``) per line."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    with open(path, "w") as fh:
        if labels is None:
            for p in points:
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        else:
            for p, l in zip(points, np.asarray(labels)):
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(l)}\n")


def load_xyz(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read ``x y z`` or ``x y z label`` text; returns (points, labels|None)."""
    pts, labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 3:
                pts.append([float(v) for v in parts])
            elif len(parts) == 4:
                pts.append([float(v) for v in parts[:3]])
                labels.append(int(parts[3]))
            else:
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(parts)}")
    points = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if labels and len(labels) != len(pts):
        raise ValueError(f"{path}: mixed 3- and 4-column lines")
    return points, (np.asarray(labels, dtype=np.uint8) if labels else None)


def save_labels(path, labels) -> None:
    with open(path, "w") as fh:
        for l in np.asarray(labels):
            fh.write(f"{int(l)}\n")


def load_labels(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.uint8)


def save_bin(path, points) -> None:
    """Binary points: little-endian u64 count header, then f64 xyz triples."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", points.shape[0]))
        fh.write(points.astype("<f8").tobytes())


def load_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(count * 24), dtype="<f8")
    if data.size != count * 3:
        raise ValueError(f"{path}: truncated point payload")
    return data.reshape(count, 3).astype(np.float64)
