"""Shared generators for randomized sweeps. Everything is seeded."""

import numpy as np
import pytest

from stumpcad import csg, geometry as geo


def random_quat(rng) -> np.ndarray:
    r = rng.normal(size=4)
    return r / np.linalg.norm(r)


def random_primitive(rng, span: float = 0.8) -> geo.Primitive:
    kind = rng.choice(list(geo.Kind))
    if kind is geo.Kind.BOX:
        q = rng.uniform(0.3, 1.2, 3)
    elif kind is geo.Kind.CONE:
        q = np.array([rng.uniform(0.3, 1.0)])
    else:
        q = np.array([rng.uniform(0.2, 0.8)])
    pose = geo.Pose(t=rng.uniform(-span, span, 3), r=random_quat(rng))
    return geo.Primitive(kind, q, pose)


def random_stump(rng, k: int, c: int) -> csg.Stump:
    prims = tuple(random_primitive(rng) for _ in range(k))
    w_c = (rng.random(k) < 0.25).astype(np.uint8)
    w_i = (rng.random((k, c)) < 0.5).astype(np.uint8)
    w_u = (rng.random(c) < 0.7).astype(np.uint8)
    if not w_u.any():
        w_u[rng.integers(c)] = 1
    for j in range(c):
        if not w_i[:, j].any():
            w_i[rng.integers(k), j] = 1
    return csg.Stump(prims, w_c, w_i, w_u)


def random_soft_stump(rng, k: int, c: int, eta: float = 20.0, psi: float = 10.0) -> csg.SoftStump:
    prims = tuple(random_primitive(rng) for _ in range(k))
    return csg.SoftStump(
        prims,
        rng.uniform(0.05, 0.95, k),
        rng.uniform(0.05, 0.95, (k, c)),
        rng.uniform(0.05, 0.95, c),
        geo.Sharpness(eta, psi),
    )


def random_tree(rng, max_prims: int = 8, max_depth: int = 5):
    """Random expression over a fresh primitive table; uses every node kind."""
    prims: list[geo.Primitive] = []

    def leaf():
        if len(prims) < max_prims:
            prims.append(random_primitive(rng))
            return csg.Leaf(len(prims) - 1)
        roll = rng.random()
        if roll < 0.05:
            return csg.UNIVERSE
        if roll < 0.1:
            return csg.EMPTY
        return csg.Leaf(int(rng.integers(len(prims))))

    def build(depth):
        if depth >= max_depth or len(prims) >= max_prims or rng.random() < 0.25:
            roll = rng.random()
            if roll < 0.04:
                return csg.UNIVERSE
            if roll < 0.08:
                return csg.EMPTY
            return leaf()
        op = rng.choice(["union", "intersection", "difference", "complement"],
                        p=[0.35, 0.25, 0.3, 0.1])
        if op == "complement":
            return csg.Complement(build(depth + 1))
        left = build(depth + 1)
        right = build(depth + 1)
        node = {"union": csg.Union, "intersection": csg.Intersection,
                "difference": csg.Difference}[op]
        return node(left, right)

    expr = build(0)
    if not prims:  # degenerate roll: ensure a non-trivial table
        expr = csg.Union(expr, leaf())
    return expr, prims


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
