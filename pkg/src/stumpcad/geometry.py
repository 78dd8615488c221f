"""Parametric solid primitives: poses, signed distance fields, occupancy.

Four primitive kinds are supported: box, sphere, cylinder and cone. Boxes
carry three positive extents, spheres and cylinders a radius, cones an
opening half-angle. Cylinders and cones are infinite; bounded variants are
built by CSG intersection with a box rather than by extra parameters, so
the distance formulas stay closed-form.

Sign convention: negative inside, zero on the surface, positive outside.
Every operation is a pure function of immutable inputs and is safe to call
concurrently. Points are numpy arrays of shape (3,) or (N, 3); distances
come back with the matching leading shape.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

# Occupancy-conversion steepness and softmax modulation defaults.
DEFAULT_ETA = 75.0
DEFAULT_PSI = 20.0

_QUAT_EPS = 1e-9


class Kind(enum.Enum):
    BOX = "box"
    SPHERE = "sphere"
    CYLINDER = "cylinder"
    CONE = "cone"


#: intrinsic parameter count per kind
PARAM_COUNT = {Kind.BOX: 3, Kind.SPHERE: 1, Kind.CYLINDER: 1, Kind.CONE: 1}


def _as_array(x, shape=None) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid placement: translate by ``t`` after rotating by quaternion ``r``.

    ``r`` is stored in (w, x, y, z) order, right-handed, acting as an active
    rotation. The constructor normalizes; quaternions with norm below 1e-9
    are rejected.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = _as_array(self.t, (3,)).copy()
        r = _as_array(self.r, (4,)).copy()
        n = float(np.linalg.norm(r))
        if n < _QUAT_EPS:
            raise ValueError(f"quaternion norm {n:g} below {_QUAT_EPS:g}")
        if abs(n - 1.0) > 1e-12:  # keep already-unit quaternions bit-stable
            r /= n
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    def rotation(self) -> np.ndarray:
        """3x3 rotation matrix of ``r``."""
        return quat_to_matrix(self.r)


def identity_pose() -> Pose:
    return Pose()


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = _as_array(q, (4,))
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a*b, both (w,x,y,z)."""
    aw, ax, ay, az = _as_array(a, (4,))
    bw, bx, by, bz = _as_array(b, (4,))
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = _as_array(axis, (3,))
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero rotation axis")
    axis = axis / n
    h = 0.5 * angle_rad
    return np.concatenate(([math.cos(h)], math.sin(h) * axis))


def quat_from_euler_xyz_deg(ax: float, ay: float, az: float) -> np.ndarray:
    """Quaternion for the rotation Rz(az)·Ry(ay)·Rx(ax), angles in degrees.

    This matches OpenSCAD's ``rotate([ax, ay, az])``: rotate about x first,
    then y, then z, all about fixed world axes.
    """
    qx = quat_from_axis_angle([1, 0, 0], math.radians(ax))
    qy = quat_from_axis_angle([0, 1, 0], math.radians(ay))
    qz = quat_from_axis_angle([0, 0, 1], math.radians(az))
    return quat_mul(qz, quat_mul(qy, qx))


def euler_xyz_deg_from_quat(q) -> tuple[float, float, float]:
    """Inverse of :func:`quat_from_euler_xyz_deg` (degrees, gimbal-safe).

    Decomposes R = Rz(az)·Ry(ay)·Rx(ax). At the |R[2,0]| = 1 gimbal lock
    the x angle is pinned to 0 and the z angle absorbs the remainder.
    """
    m = quat_to_matrix(q)
    sy = -m[2, 0]
    sy = min(1.0, max(-1.0, float(sy)))
    ay = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ax = math.atan2(m[2, 1], m[2, 2])
        az = math.atan2(m[1, 0], m[0, 0])
    else:
        ax = 0.0
        az = math.atan2(-m[0, 1], m[1, 1])
    return math.degrees(ax), math.degrees(ay), math.degrees(az)


def compose(outer_r, outer_t, pose: Pose) -> Pose:
    """Apply an extra rigid transform on top of ``pose``.

    The composed pose maps local points x to R_outer(R x + t) + t_outer.
    """
    outer_r = _as_array(outer_r, (4,))
    outer_t = _as_array(outer_t, (3,))
    rot = quat_to_matrix(outer_r)
    return Pose(t=rot @ pose.t + outer_t, r=quat_mul(outer_r, pose.r))


def to_local(pose: Pose, x) -> np.ndarray:
    """World point(s) into the pose's local frame: x' = R⁻¹(x − t)."""
    x = np.asarray(x, dtype=np.float64)
    return (x - pose.t) @ pose.rotation()  # v @ R == R.T @ v


def from_local(pose: Pose, x_local) -> np.ndarray:
    """Inverse of :func:`to_local`: x = R x' + t."""
    x_local = np.asarray(x_local, dtype=np.float64)
    return x_local @ pose.rotation().T + pose.t


@dataclass(frozen=True)
class Primitive:
    """One parametric solid: kind, intrinsic parameters ``q`` and a pose."""

    kind: Kind
    q: np.ndarray
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        q = _as_array(self.q).reshape(-1).copy()
        want = PARAM_COUNT[self.kind]
        if q.shape[0] != want:
            raise ValueError(f"{self.kind.value} takes {want} parameter(s), got {q.shape[0]}")
        if not np.all(np.isfinite(q)) or np.any(q <= 0):
            raise ValueError(f"{self.kind.value} parameters must be strictly positive, got {q}")
        if self.kind is Kind.CONE and q[0] >= math.pi / 2:
            raise ValueError(f"cone opening angle must be below pi/2, got {q[0]:g}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)


def box(qx: float, qy: float, qz: float, pose: Pose | None = None) -> Primitive:
    return Primitive(Kind.BOX, np.array([qx, qy, qz]), pose or Pose())


def sphere(radius: float, pose: Pose | None = None) -> Primitive:
    return Primitive(Kind.SPHERE, np.array([radius]), pose or Pose())


def cylinder(radius: float, pose: Pose | None = None) -> Primitive:
    return Primitive(Kind.CYLINDER, np.array([radius]), pose or Pose())


def cone(angle_rad: float, pose: Pose | None = None) -> Primitive:
    return Primitive(Kind.CONE, np.array([angle_rad]), pose or Pose())


@dataclass(frozen=True)
class Sharpness:
    """Steepness of the SDF→occupancy sigmoid (eta) and of the softened
    min/max selections (psi)."""

    eta: float = DEFAULT_ETA
    psi: float = DEFAULT_PSI

    def __post_init__(self):
        for name in ("eta", "psi"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)


# ---------------------------------------------------------------------------
# Signed distance fields (local frame)
# ---------------------------------------------------------------------------

def sdf_box(q, x_local) -> np.ndarray:
    """Box of extents ``q`` centered at the local origin.

    Exact Euclidean distance outside; inside, the (negative) largest
    per-axis penetration.
    """
    q = _as_array(q, (3,))
    x = np.asarray(x_local, dtype=np.float64)
    u = np.abs(x) - 0.5 * q
    outside = np.linalg.norm(np.maximum(u, 0.0), axis=-1)
    inside = np.minimum(np.max(u, axis=-1), 0.0)
    return outside + inside


def sdf_sphere(q, x_local) -> np.ndarray:
    """Sphere of radius ``q`` centered at the local origin (exact)."""
    radius = float(np.reshape(q, -1)[0])
    x = np.asarray(x_local, dtype=np.float64)
    return np.linalg.norm(x, axis=-1) - radius


def sdf_cylinder(q, x_local) -> np.ndarray:
    """Infinite cylinder of radius ``q`` along the local z axis."""
    radius = float(np.reshape(q, -1)[0])
    x = np.asarray(x_local, dtype=np.float64)
    return np.linalg.norm(x[..., :2], axis=-1) - radius


def sdf_cone(q, x_local, corrected: bool = True) -> np.ndarray:
    """Infinite cone, apex at the local origin, opening downward along −z.

    ``q`` is the opening half-angle in radians. Above the apex plane the
    value is the distance to the apex. Below it, ``corrected=True`` (the
    default used everywhere in fitting and evaluation) gives the signed
    perpendicular distance to the slanted surface: zero on the cone, negative
    inside. ``corrected=False`` reproduces the raw two-branch form whose
    below-apex branch is ``(‖x'_{xy}‖ − x'_z·tan(q))/√(1+tan²q)`` and is
    positive even on the interior axis.
    """
    angle = float(np.reshape(q, -1)[0])
    x = np.asarray(x_local, dtype=np.float64)
    rho = np.linalg.norm(x[..., :2], axis=-1)
    z = x[..., 2]
    t = math.tan(angle)
    scale = 1.0 / math.sqrt(1.0 + t * t)
    sign = 1.0 if corrected else -1.0
    below = (rho + sign * z * t) * scale
    return np.where(z >= 0, np.linalg.norm(x, axis=-1), below)


_SDF_LOCAL = {
    Kind.BOX: sdf_box,
    Kind.SPHERE: sdf_sphere,
    Kind.CYLINDER: sdf_cylinder,
    Kind.CONE: sdf_cone,
}


def sdf(prim: Primitive, x, corrected: bool = True) -> np.ndarray:
    """Signed distance of world point(s) ``x`` to ``prim``."""
    xl = to_local(prim.pose, x)
    if prim.kind is Kind.CONE:
        return sdf_cone(prim.q, xl, corrected=corrected)
    return _SDF_LOCAL[prim.kind](prim.q, xl)


def sigmoid(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out[0] if scalar else out


def occupancy_soft(prim: Primitive, x, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Soft occupancy Φ(−eta·sdf): in (0,1), exactly 0.5 on the surface."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return sigmoid(-eta * sdf(prim, x))


def occupancy_hard(prim: Primitive, x) -> np.ndarray:
    """Hard occupancy bit: 1 iff sdf ≤ 0 (boundary counts as inside)."""
    return (sdf(prim, x) <= 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Primitive SDF with parameter gradients
# ---------------------------------------------------------------------------

@dataclass
class SdfGrads:
    """Per-point partials of the signed distance w.r.t. primitive parameters.

    ``d_q``: (N, len(q)); ``d_t``: (N, 3); ``d_r``: (N, 4) with the
    quaternion gradient projected onto the unit-norm tangent space (the
    stored quaternion is unit and consumers re-normalize perturbations).
    """

    d_q: np.ndarray
    d_t: np.ndarray
    d_r: np.ndarray


def _local_sdf_grads(prim: Primitive, xl: np.ndarray):
    """(d, ∂d/∂x', ∂d/∂q) in the local frame; subgradients at ties."""
    n = xl.shape[0]
    if prim.kind is Kind.SPHERE:
        d = sdf_sphere(prim.q, xl)
        nrm = np.linalg.norm(xl, axis=-1, keepdims=True)
        g_x = np.divide(xl, nrm, out=np.zeros_like(xl), where=nrm > 0)
        g_q = np.full((n, 1), -1.0)
        return d, g_x, g_q
    if prim.kind is Kind.CYLINDER:
        d = sdf_cylinder(prim.q, xl)
        g_x = np.zeros_like(xl)
        rho = np.linalg.norm(xl[:, :2], axis=-1, keepdims=True)
        g_x[:, :2] = np.divide(xl[:, :2], rho, out=np.zeros_like(xl[:, :2]), where=rho > 0)
        g_q = np.full((n, 1), -1.0)
        return d, g_x, g_q
    if prim.kind is Kind.BOX:
        q = prim.q
        u = np.abs(xl) - 0.5 * q
        pos = np.maximum(u, 0.0)
        out_norm = np.linalg.norm(pos, axis=-1)
        outside = out_norm > 0
        d = out_norm + np.minimum(np.max(u, axis=-1), 0.0)
        g_u = np.zeros_like(u)
        g_u[outside] = pos[outside] / out_norm[outside, None]
        # inside: subgradient on the first facet attaining the max
        inside = ~outside
        if np.any(inside):
            amax = np.argmax(u[inside], axis=-1)
            g_u[np.flatnonzero(inside), amax] = 1.0
        sgn = np.sign(xl)
        g_x = g_u * sgn
        g_q = -0.5 * g_u
        return d, g_x, g_q
    if prim.kind is Kind.CONE:
        angle = float(prim.q[0])
        t = math.tan(angle)
        scale = 1.0 / math.sqrt(1.0 + t * t)  # cos(angle)
        rho = np.linalg.norm(xl[:, :2], axis=-1)
        z = xl[:, 2]
        above = z >= 0
        d = np.where(above, np.linalg.norm(xl, axis=-1), (rho + z * t) * scale)
        g_x = np.zeros_like(xl)
        g_q = np.zeros((n, 1))
        if np.any(above):
            xa = xl[above]
            na = np.linalg.norm(xa, axis=-1, keepdims=True)
            g_x[above] = np.divide(xa, na, out=np.zeros_like(xa), where=na > 0)
        below = ~above
        if np.any(below):
            xb = xl[below]
            rb = rho[below]
            dir_xy = np.divide(xb[:, :2], rb[:, None], out=np.zeros_like(xb[:, :2]), where=rb[:, None] > 0)
            g_x[below, 0] = scale * dir_xy[:, 0]
            g_x[below, 1] = scale * dir_xy[:, 1]
            g_x[below, 2] = t * scale  # == sin(angle)
            # d = rho·cos(a) + z·sin(a)  ⇒  ∂d/∂a = −rho·sin(a) + z·cos(a)
            g_q[below, 0] = -rb * (t * scale) + xl[below, 2] * scale
        return d, g_x, g_q
    raise AssertionError(prim.kind)


def _rotation_partials(q: np.ndarray) -> np.ndarray:
    """Stack of ∂R/∂q_k for the unit-quaternion rotation matrix, shape (4,3,3)."""
    w, x, y, z = q
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dw, dx, dy, dz])


def sdf_with_grads(prim: Primitive, x) -> tuple[np.ndarray, SdfGrads]:
    """Signed distance plus parameter partials at world points ``x``.

    Cones use the corrected (sign-aware) field, matching what fitting
    evaluates.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rot = prim.pose.rotation()
    rel = x - prim.pose.t
    xl = rel @ rot
    d, g_xl, g_q = _local_sdf_grads(prim, xl)
    # x' = Rᵀ(x − t):  ∂d/∂t = −R·g_xl;  ∂d/∂q_k = g_xl·(∂R/∂q_k)ᵀ(x − t)
    d_t = -(g_xl @ rot.T)
    parts = _rotation_partials(prim.pose.r)
    d_r = np.einsum("ni,kji,nj->nk", g_xl, parts, rel)
    # project onto the tangent of the unit-quaternion constraint
    qv = prim.pose.r
    d_r = d_r - np.outer(d_r @ qv, qv)
    return d, SdfGrads(d_q=g_q, d_t=d_t, d_r=d_r)


# ---------------------------------------------------------------------------
# Bounding boxes
# ---------------------------------------------------------------------------

#: world clamp for unbounded primitives (infinite cylinder / cone)
DEFAULT_WORLD_BOX = (np.array([-2.0, -2.0, -2.0]), np.array([2.0, 2.0, 2.0]))


def primitive_bbox(prim: Primitive, world_box=DEFAULT_WORLD_BOX) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned world bounds; unbounded kinds clamp to ``world_box``."""
    if prim.kind is Kind.SPHERE:
        r = prim.q[0]
        return prim.pose.t - r, prim.pose.t + r
    if prim.kind is Kind.BOX:
        half = np.abs(prim.pose.rotation()) @ (0.5 * prim.q)
        return prim.pose.t - half, prim.pose.t + half
    lo, hi = world_box
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
