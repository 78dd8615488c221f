"""Persistence and interchange: stump JSON, OpenSCAD programs, occupancy
grids, isosurface meshes and their file formats.

OpenSCAD has no complement, so complemented entries render as a difference
against a large cube (side 100× the shape bbox diagonal, recorded in a
header comment). Infinite cylinders and cones are emitted clamped to a
finite height with a marker comment. Emission is deterministic: identical
input gives byte-identical text, floats printed at 9 significant digits.
A small importer reads the emitted subset back for round-trip checks.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from skimage import measure as _sk_measure

from . import csg, geometry
from .geometry import DEFAULT_WORLD_BOX, Kind, Pose, Primitive


class SchemaError(Exception):
    """Stump JSON did not match the schema; ``path`` is a JSON pointer."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# Stump JSON
# ---------------------------------------------------------------------------

def _prim_to_dict(p: Primitive) -> dict:
    return {
        "kind": p.kind.value,
        "q": [float(v) for v in p.q],
        "t": [float(v) for v in p.pose.t],
        "r": [float(v) for v in p.pose.r],
    }


def stump_to_json(s: csg.Stump | csg.SoftStump, indent: int | None = 2) -> str:
    """Serialize a stump; floats survive the round trip exactly."""
    soft = isinstance(s, csg.SoftStump)
    doc = {
        "primitives": [_prim_to_dict(p) for p in s.primitives],
        "w_c": s.w_c.tolist(),
        "w_i": s.w_i.tolist(),
        "w_u": s.w_u.tolist(),
        "soft": soft,
    }
    if soft:
        doc["eta"] = s.sharpness.eta
        doc["psi"] = s.sharpness.psi
    return json.dumps(doc, indent=indent)


_VALID_KINDS = {k.value: k for k in Kind}


def _field(doc, key, path, kind=None):
    if not isinstance(doc, dict):
        raise SchemaError(path or "/", f"expected an object, got {type(doc).__name__}")
    if key not in doc:
        raise SchemaError(f"{path}/{key}", "missing required field")
    val = doc[key]
    if kind is not None and not isinstance(val, kind):
        raise SchemaError(f"{path}/{key}", f"expected {kind.__name__}")
    return val


def _num_list(doc, key, path, length=None):
    val = _field(doc, key, path, list)
    if length is not None and len(val) != length:
        raise SchemaError(f"{path}/{key}", f"expected {length} entries, got {len(val)}")
    for i, v in enumerate(val):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(f"{path}/{key}/{i}", "expected a number")
    return [float(v) for v in val]


def stump_from_json(text: str) -> csg.Stump | csg.SoftStump:
    """Parse stump JSON; schema violations name the offending JSON pointer."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("/", f"not valid JSON: {exc}") from None
    prims = []
    raw_prims = _field(doc, "primitives", "", list)
    for i, pd in enumerate(raw_prims):
        path = f"/primitives/{i}"
        kind_name = _field(pd, "kind", path, str)
        if kind_name not in _VALID_KINDS:
            raise SchemaError(f"{path}/kind",
                              f"unknown kind {kind_name!r}; valid kinds: "
                              + ", ".join(sorted(_VALID_KINDS)))
        kind = _VALID_KINDS[kind_name]
        q = _num_list(pd, "q", path, geometry.PARAM_COUNT[kind])
        t = _num_list(pd, "t", path, 3)
        r = _num_list(pd, "r", path, 4)
        try:
            prims.append(Primitive(kind, np.array(q), Pose(np.array(t), np.array(r))))
        except ValueError as exc:
            raise SchemaError(path, str(exc)) from None

    k = len(prims)
    w_c = _num_list(doc, "w_c", "", k)
    raw_w_i = _field(doc, "w_i", "", list)
    if len(raw_w_i) != k:
        raise SchemaError("/w_i", f"expected {k} rows, got {len(raw_w_i)}")
    c = None
    w_i = []
    for i in range(k):
        if not isinstance(raw_w_i[i], list):
            raise SchemaError(f"/w_i/{i}", "expected a row (list)")
        if c is None:
            c = len(raw_w_i[i])
        elif len(raw_w_i[i]) != c:
            raise SchemaError(f"/w_i/{i}", f"row length {len(raw_w_i[i])} != {c}")
        for j, v in enumerate(raw_w_i[i]):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise SchemaError(f"/w_i/{i}/{j}", "expected a number")
        w_i.append([float(v) for v in raw_w_i[i]])
    if c is None:
        c = len(_field(doc, "w_u", "", list))
    w_u = _num_list(doc, "w_u", "", c)
    soft = _field(doc, "soft", "")
    if not isinstance(soft, bool):
        raise SchemaError("/soft", "expected a boolean")

    w_c_a = np.asarray(w_c, dtype=np.float64)
    w_i_a = np.asarray(w_i, dtype=np.float64).reshape(k, c)
    w_u_a = np.asarray(w_u, dtype=np.float64)
    try:
        if soft:
            eta = _field(doc, "eta", "", (int, float))
            psi = _field(doc, "psi", "", (int, float))
            return csg.SoftStump(tuple(prims), w_c_a, w_i_a, w_u_a,
                                 geometry.Sharpness(float(eta), float(psi)))
        return csg.Stump(tuple(prims), w_c_a, w_i_a, w_u_a)
    except ValueError as exc:
        raise SchemaError("/", str(exc)) from None


def save_stump(path, s) -> None:
    with open(path, "w") as fh:
        fh.write(stump_to_json(s))
        fh.write("\n")


def load_stump(path) -> csg.Stump | csg.SoftStump:
    with open(path) as fh:
        return stump_from_json(fh.read())


# ---------------------------------------------------------------------------
# OpenSCAD emission
# ---------------------------------------------------------------------------

def _f(v: float) -> str:
    """Fixed 9-significant-digit float text (deterministic emission)."""
    out = format(float(v), "#.9g")
    if "e" not in out and "." in out:
        out = out.rstrip(".") if out.endswith(".") else out
    return "0.00000000" if float(out) == 0 and out.startswith("-") else out


def export_openscad(obj, prims=None, world_box=DEFAULT_WORLD_BOX) -> str:
    """Emit an OpenSCAD program for a binary stump or an expression tree.

    Soft stumps are rejected: binarize first. ``prims`` accompanies a
    :class:`~stumpcad.csg.CsgExpr`; stumps carry their own table.
    """
    if isinstance(obj, csg.SoftStump):
        raise ValueError("cannot export a soft stump; binarize(s, 0.5) first")
    stump = None
    if isinstance(obj, csg.Stump):
        stump = obj
        expr, prims = csg.stump_as_tree(obj)
    else:
        expr = obj
        if prims is None:
            raise ValueError("expression export needs the primitive table")
    csg.validate_expr(expr, prims)

    from . import sampling

    lo = np.asarray(world_box[0], dtype=np.float64)
    hi = np.asarray(world_box[1], dtype=np.float64)
    blo, bhi = sampling.bbox_of_expr(expr, prims, (lo, hi))
    diag = float(np.linalg.norm(bhi - blo))
    if diag <= 0:
        diag = float(np.linalg.norm(hi - lo))
    big = 100.0 * diag
    clamp_h = float(np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))))

    out = io.StringIO()
    out.write("// stumpcad export\n")
    out.write(f"// complement cube side: {_f(big)} (100x shape bbox diagonal)\n")
    out.write(f"// unbounded primitives clamped to half-height {_f(clamp_h)}\n")

    def prim_stmt(p: Primitive, indent: str) -> str:
        t = p.pose.t
        half = clamp_h + float(np.linalg.norm(t))
        if p.kind is Kind.BOX:
            body = f"cube([{_f(p.q[0])}, {_f(p.q[1])}, {_f(p.q[2])}], center=true);"
        elif p.kind is Kind.SPHERE:
            body = f"sphere(r={_f(p.q[0])});"
        elif p.kind is Kind.CYLINDER:
            body = (f"cylinder(h={_f(2 * half)}, r={_f(p.q[0])}, center=true);"
                    " // infinite cylinder, clamped")
        else:
            rbase = half * math.tan(float(p.q[0]))
            body = (f"translate([0, 0, {_f(-half)}]) "
                    f"cylinder(h={_f(half)}, r1={_f(rbase)}, r2=0, center=false);"
                    " // infinite cone, clamped")
        wrap = body
        if not np.array_equal(p.pose.r, np.array([1.0, 0, 0, 0])):
            ax, ay, az = geometry.euler_xyz_deg_from_quat(p.pose.r)
            wrap = f"rotate([{_f(ax)}, {_f(ay)}, {_f(az)}]) {wrap}"
        if np.any(t != 0):
            wrap = f"translate([{_f(t[0])}, {_f(t[1])}, {_f(t[2])}]) {wrap}"
        return indent + wrap + "\n"

    def big_cube(indent: str) -> str:
        return f"{indent}cube([{_f(big)}, {_f(big)}, {_f(big)}], center=true);\n"

    def rec(node: csg.CsgExpr, indent: str) -> str:
        pad = indent + "  "
        if isinstance(node, csg.Leaf):
            return prim_stmt(prims[node.index], indent)
        if isinstance(node, csg.Union):
            kids = _flat(node, csg.Union)
            return (f"{indent}union() {{\n"
                    + "".join(rec(k, pad) for k in kids) + f"{indent}}}\n")
        if isinstance(node, csg.Intersection):
            kids = _flat(node, csg.Intersection)
            return (f"{indent}intersection() {{\n"
                    + "".join(rec(k, pad) for k in kids) + f"{indent}}}\n")
        if isinstance(node, csg.Difference):
            return (f"{indent}difference() {{\n"
                    + rec(node.left, pad) + rec(node.right, pad) + f"{indent}}}\n")
        if isinstance(node, csg.Complement):
            return (f"{indent}difference() {{ // complement\n"
                    + big_cube(pad) + rec(node.child, pad) + f"{indent}}}\n")
        if isinstance(node, csg.Universe):
            return big_cube(indent)
        if isinstance(node, csg.Empty):
            return f"{indent}union() {{}}\n"
        raise TypeError(f"not a CSG node: {node!r}")

    def emit_stump(s: csg.Stump) -> str:
        # always the full union(){ intersection(){ … } … } scaffolding
        text = "union() {\n"
        for j in range(s.c):
            if not s.w_u[j]:
                continue
            text += "  intersection() {\n"
            rows = [i for i in range(s.k) if s.w_i[i, j]]
            if not rows:
                text += big_cube("    ")  # nothing selected: the whole space
            for i in rows:
                if s.w_c[i]:
                    text += ("    difference() { // complement\n"
                             + big_cube("      ")
                             + prim_stmt(s.primitives[i], "      ")
                             + "    }\n")
                else:
                    text += prim_stmt(s.primitives[i], "    ")
            text += "  }\n"
        text += "}\n"
        return text

    out.write(emit_stump(stump) if stump is not None else rec(expr, ""))
    return out.getvalue()


def _flat(node, op_type):
    if isinstance(node, op_type):
        return _flat(node.left, op_type) + _flat(node.right, op_type)
    return [node]


# ---------------------------------------------------------------------------
# OpenSCAD import (emitted subset only)
# ---------------------------------------------------------------------------

class ScadParseError(Exception):
    pass


def _scad_tokens(text: str):
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            i += 1
            continue
        if text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch.isalpha() or ch == "_":
            start = i
            while i < n and (text[i].isalnum() or text[i] == "_"):
                i += 1
            yield ("name", text[start:i])
            continue
        if ch.isdigit() or ch in "+-.":
            start = i
            i += 1
            while i < n and (text[i].isdigit() or text[i] in ".eE" or
                             (text[i] in "+-" and text[i - 1] in "eE")):
                i += 1
            yield ("num", text[start:i])
            continue
        if ch in "()[]{},;=":
            yield ("punct", ch)
            i += 1
            continue
        raise ScadParseError(f"unexpected character {ch!r}")
    yield ("eof", "")


class _ScadParser:
    """Reads exactly the statement shapes :func:`export_openscad` writes."""

    def __init__(self, text: str):
        self.toks = list(_scad_tokens(text))
        self.pos = 0
        self.prims: list[Primitive] = []

    def peek(self):
        return self.toks[self.pos]

    def take(self, kind, text=None):
        tok = self.toks[self.pos]
        if tok[0] != kind or (text is not None and tok[1] != text):
            raise ScadParseError(f"expected {text or kind!r}, found {tok[1]!r}")
        self.pos += 1
        return tok

    def number(self) -> float:
        return float(self.take("num")[1])

    def vector3(self):
        self.take("punct", "[")
        vals = [self.number()]
        for _ in range(2):
            self.take("punct", ",")
            vals.append(self.number())
        self.take("punct", "]")
        return vals

    def args(self) -> dict:
        """Parse ( name=value | value | [vec] , ... ) into a dict."""
        self.take("punct", "(")
        out = {}
        order = 0
        while self.peek()[1] != ")":
            tok = self.peek()
            if tok[0] == "name":
                name = self.take("name")[1]
                self.take("punct", "=")
                if self.peek()[1] == "[":
                    out[name] = self.vector3()
                elif self.peek()[0] == "name":
                    out[name] = self.take("name")[1] == "true"
                else:
                    out[name] = self.number()
            elif tok[1] == "[":
                out[order] = self.vector3()
                order += 1
            else:
                out[order] = self.number()
                order += 1
            if self.peek()[1] == ",":
                self.take("punct", ",")
        self.take("punct", ")")
        return out

    def statement(self) -> csg.CsgExpr:
        """One statement; transform chains fold into leaf poses."""
        r = np.array([1.0, 0, 0, 0])
        t = np.zeros(3)
        while True:
            tok = self.peek()
            if tok[0] != "name":
                raise ScadParseError(f"expected a statement, found {tok[1]!r}")
            name = tok[1]
            if name == "translate":
                self.take("name")
                a = self.args()
                off = np.asarray(a.get("v", a.get(0)), dtype=np.float64)
                t = t + _rotvec(r, off)
                continue
            if name == "rotate":
                self.take("name")
                a = self.args()
                ang = a.get("a", a.get(0))
                q = geometry.quat_from_euler_xyz_deg(*ang)
                r = geometry.quat_mul(r, q)
                continue
            break
        node = self.block_or_prim(r, t)
        return node

    def block_or_prim(self, r, t) -> csg.CsgExpr:
        name = self.take("name")[1]
        if name in ("union", "intersection", "difference"):
            self.take("punct", "(")
            self.take("punct", ")")
            self.take("punct", "{")
            kids = []
            while self.peek()[1] != "}":
                kids.append(self.statement())
            self.take("punct", "}")
            kids = [self._reposed(k, r, t) for k in kids]
            if name == "union":
                return _fold(kids, csg.Union, csg.EMPTY)
            if name == "intersection":
                return _fold(kids, csg.Intersection, csg.UNIVERSE)
            if len(kids) != 2:
                raise ScadParseError(f"difference() needs 2 children, got {len(kids)}")
            return csg.Difference(kids[0], kids[1])
        return self.primitive(name, r, t)

    def _reposed(self, node, r, t):
        if np.array_equal(r, [1.0, 0, 0, 0]) and not np.any(t):
            return node
        for sub in csg.walk(node):
            if isinstance(sub, csg.Leaf):
                p = self.prims[sub.index]
                self.prims[sub.index] = Primitive(p.kind, p.q, geometry.compose(r, t, p.pose))
        return node

    def primitive(self, name, r, t) -> csg.CsgExpr:
        a = self.args()
        self.take("punct", ";")
        pose = Pose(t, r)
        if name == "cube":
            size = a.get("size", a.get(0))
            prim = Primitive(Kind.BOX, np.asarray(size, dtype=np.float64), pose)
        elif name == "sphere":
            prim = Primitive(Kind.SPHERE, np.array([a["r"]]), pose)
        elif name == "cylinder":
            if "r" in a:
                prim = Primitive(Kind.CYLINDER, np.array([a["r"]]), pose)
            elif a.get("r2", None) == 0:
                h = float(a["h"])
                # emitted cones sit under translate([0,0,-h]): apex back at origin
                apex_shift = geometry.quat_to_matrix(pose.r) @ np.array([0.0, 0.0, h])
                prim = Primitive(Kind.CONE,
                                 np.array([math.atan2(float(a["r1"]), h)]),
                                 Pose(pose.t + apex_shift, pose.r))
            else:
                raise ScadParseError("cylinder form not in the emitted subset")
        else:
            raise ScadParseError(f"unsupported primitive {name!r}")
        self.prims.append(prim)
        return csg.Leaf(len(self.prims) - 1)


def _rotvec(q, v):
    return geometry.quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


def _fold(items, op, empty):
    if not items:
        return empty
    out = items[-1]
    for node in reversed(items[:-1]):
        out = op(node, out)
    return out


def import_openscad(text: str) -> tuple[csg.CsgExpr, list[Primitive]]:
    """Parse a program produced by :func:`export_openscad`."""
    parser = _ScadParser(text)
    expr = parser.statement()
    if parser.peek()[0] != "eof":
        raise ScadParseError(f"trailing input {parser.peek()[1]!r}")
    return expr, parser.prims


# ---------------------------------------------------------------------------
# Occupancy grids and meshing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OccupancyGrid:
    """Occupancy samples at voxel centers of a regular grid over ``bbox``."""

    dims: tuple[int, int, int]
    bbox: tuple[np.ndarray, np.ndarray]
    values: np.ndarray  # shape == dims, in [0,1]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive ints, got {self.dims}")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bbox)
        if np.any(hi <= lo):
            raise ValueError(f"degenerate bbox {lo} .. {hi}")
        vals = np.asarray(self.values, dtype=np.float64).reshape(dims)
        if vals.min() < 0 or vals.max() > 1:
            raise ValueError("grid values must lie in [0,1]")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "bbox", (lo, hi))
        object.__setattr__(self, "values", vals)

    @property
    def cell(self) -> np.ndarray:
        lo, hi = self.bbox
        return (hi - lo) / np.asarray(self.dims, dtype=np.float64)

    def centers(self) -> np.ndarray:
        """Voxel-center coordinates, shape (*dims, 3)."""
        lo, _ = self.bbox
        cell = self.cell
        axes = [lo[i] + (np.arange(self.dims[i]) + 0.5) * cell[i] for i in range(3)]
        x, y, z = np.meshgrid(*axes, indexing="ij")
        return np.stack([x, y, z], axis=-1)


def rasterize(obj, dims, bbox=None, world_box=DEFAULT_WORLD_BOX) -> OccupancyGrid:
    """Evaluate occupancy at voxel centers.

    Expression pairs and binary stumps give exact bits; soft stumps give
    their soft values.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 2 for d in dims):
        raise ValueError(f"dims must be >= 2 per axis, got {dims}")
    from . import sampling

    if isinstance(obj, csg.SoftStump):
        if bbox is None:
            bbox = sampling.stump_bbox(csg.binarize(obj), world_box)
        evaluate = lambda pts: csg.stump_eval_soft(obj, pts)
    elif isinstance(obj, csg.Stump):
        if bbox is None:
            bbox = sampling.stump_bbox(obj, world_box)
        evaluate = lambda pts: csg.stump_eval_hard(obj, pts)
    else:
        expr, prims = obj
        if bbox is None:
            bbox = sampling.bbox_of_expr(expr, prims, world_box)
        evaluate = lambda pts: csg.eval_tree_hard(expr, prims, pts)

    grid = OccupancyGrid(dims, bbox, np.zeros(dims))
    pts = grid.centers().reshape(-1, 3)
    vals = np.empty(pts.shape[0])
    chunk = 1 << 18
    for start in range(0, pts.shape[0], chunk):
        vals[start:start + chunk] = evaluate(pts[start:start + chunk])
    return OccupancyGrid(dims, bbox, vals.reshape(dims))


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V,3)
    faces: np.ndarray     # (F,3) int

    def area(self) -> float:
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return float(0.5 * np.linalg.norm(cross, axis=1).sum())


EMPTY_MESH = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_cubes(grid: OccupancyGrid, iso: float = 0.5) -> Mesh:
    """Triangulate the ``iso`` level set of the grid (world coordinates).

    An empty surface yields an empty mesh, not an error.
    """
    if not 0 < iso < 1:
        raise ValueError(f"iso must be in (0,1), got {iso}")
    vals = grid.values
    if vals.min() >= iso or vals.max() < iso:
        return EMPTY_MESH
    try:
        verts, faces, _, _ = _sk_measure.marching_cubes(
            vals, level=iso, spacing=tuple(grid.cell))
    except (ValueError, RuntimeError):
        return EMPTY_MESH
    lo, _ = grid.bbox
    verts = verts + lo + 0.5 * grid.cell
    return Mesh(verts, faces.astype(np.int64))


# ---------------------------------------------------------------------------
# Mesh and grid files
# ---------------------------------------------------------------------------

def save_obj(path, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_stl(path, mesh: Mesh, name: bytes = b"stumpcad mesh") -> None:
    """Binary little-endian STL."""
    tri = mesh.vertices[mesh.faces].astype("<f4")
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lens, out=np.zeros_like(normals), where=lens > 0)
    with open(path, "wb") as fh:
        fh.write(name.ljust(80, b"\0")[:80])
        fh.write(struct.pack("<I", len(tri)))
        for nrm, t in zip(normals.astype("<f4"), tri):
            fh.write(nrm.tobytes())
            fh.write(t.tobytes())
            fh.write(b"\0\0")


def save_grid(path, grid: OccupancyGrid) -> None:
    """ASCII header line "nx ny nz lox loy loz hix hiy hiz", then f64 LE values."""
    lo, hi = grid.bbox
    header = " ".join([*(str(d) for d in grid.dims),
                       *(repr(float(v)) for v in lo),
                       *(repr(float(v)) for v in hi)])
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(grid.values.astype("<f8").tobytes(order="C"))


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 9:
            raise ValueError(f"{path}: bad grid header")
        dims = tuple(int(v) for v in header[:3])
        lo = np.array([float(v) for v in header[3:6]])
        hi = np.array([float(v) for v in header[6:9]])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != dims[0] * dims[1] * dims[2]:
        raise ValueError(f"{path}: value payload does not match dims {dims}")
    return OccupancyGrid(dims, (lo, hi), data.reshape(dims).copy())
