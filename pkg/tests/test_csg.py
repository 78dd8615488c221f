"""Tree evaluation, stump evaluation (hard and soft), normalization,
simplification and the analytic gradients of the soft path."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from stumpcad import csg, dsl, geometry as geo

from conftest import random_soft_stump, random_stump, random_tree


def unit_sphere():
    return geo.sphere(1.0)


class TestTreeEval:
    def test_union_with_empty(self):
        prims = [unit_sphere()]
        expr = csg.Union(csg.Leaf(0), csg.EMPTY)
        assert csg.eval_tree_hard(expr, prims, [0, 0, 0])[0] == 1

    def test_intersection_with_universe(self):
        prims = [unit_sphere()]
        expr = csg.Intersection(csg.Leaf(0), csg.UNIVERSE)
        assert csg.eval_tree_hard(expr, prims, [0, 0, 2])[0] == 0

    def test_difference_hand_eval(self):
        # min(O_box, 1 - O_sphere) at the origin and at a corner pocket
        expr, prims = dsl.parse_csg("difference(box(2,2,2), sphere(r=1))")
        out = csg.eval_tree_hard(expr, prims, [[0, 0, 0], [0.9, 0.9, 0.9]])
        assert out.tolist() == [0, 1]

    def test_complement(self):
        prims = [unit_sphere()]
        expr = csg.Complement(csg.Leaf(0))
        out = csg.eval_tree_hard(expr, prims, [[0, 0, 0], [0, 0, 3]])
        assert out.tolist() == [0, 1]

    def test_de_morgan(self, rng):
        for _ in range(5):
            a = geo.sphere(rng.uniform(0.4, 1.0), geo.Pose(t=rng.uniform(-0.5, 0.5, 3)))
            b = geo.box(*rng.uniform(0.4, 1.2, 3), geo.Pose(t=rng.uniform(-0.5, 0.5, 3)))
            prims = [a, b]
            lhs = csg.Complement(csg.Union(csg.Leaf(0), csg.Leaf(1)))
            rhs = csg.Intersection(csg.Complement(csg.Leaf(0)), csg.Complement(csg.Leaf(1)))
            pts = rng.uniform(-2, 2, (10000, 3))
            assert np.array_equal(csg.eval_tree_hard(lhs, prims, pts),
                                  csg.eval_tree_hard(rhs, prims, pts))

    def test_leaf_validation(self):
        with pytest.raises(ValueError, match="out of range"):
            csg.validate_expr(csg.Leaf(1), [unit_sphere()])


class TestStumpEvalHard:
    def test_single_primitive_select(self):
        s = csg.Stump((unit_sphere(),), [0], [[1]], [1])
        assert csg.stump_eval_hard(s, [0, 0, 0])[0] == 1

    def test_single_primitive_complement(self):
        s = csg.Stump((unit_sphere(),), [1], [[1]], [1])
        assert csg.stump_eval_hard(s, [0, 0, 0])[0] == 0

    def test_two_sphere_intersection_matches_tree_oracle(self, rng):
        a = geo.sphere(1.0, geo.Pose(t=[0.5, 0, 0]))
        b = geo.sphere(1.0, geo.Pose(t=[-0.5, 0, 0]))
        s = csg.Stump((a, b), [0, 0], [[1], [1]], [1])
        assert csg.stump_eval_hard(s, [0, 0, 0])[0] == 1
        assert csg.stump_eval_hard(s, [1.4, 0, 0])[0] == 0
        tree = csg.Intersection(csg.Leaf(0), csg.Leaf(1))
        pts = rng.uniform(-2, 2, (10000, 3))
        assert np.array_equal(csg.stump_eval_hard(s, pts),
                              csg.eval_tree_hard(tree, [a, b], pts))

    def test_empty_column_is_universe(self):
        s = csg.Stump((unit_sphere(),), [0], [[0]], [1])
        assert csg.stump_eval_hard(s, [9, 9, 9])[0] == 1

    def test_no_active_columns_is_empty(self):
        s = csg.Stump((unit_sphere(),), [0], [[1]], [0])
        assert csg.stump_eval_hard(s, [0, 0, 0])[0] == 0

    def test_pure_python_oracle(self, rng):
        # follow the three formulas literally, one point at a time
        s = random_stump(rng, 4, 3)
        pts = rng.uniform(-1.6, 1.6, (200, 3))
        fast = csg.stump_eval_hard(s, pts)
        for n, x in enumerate(pts):
            f = [int(s.w_c[i]) * (1 - int(geo.occupancy_hard(s.primitives[i], x)))
                 + (1 - int(s.w_c[i])) * int(geo.occupancy_hard(s.primitives[i], x))
                 for i in range(s.k)]
            cols = [min(int(s.w_i[i, j]) * f[i] + (1 - int(s.w_i[i, j])) for i in range(s.k))
                    for j in range(s.c)]
            t = max(int(s.w_u[j]) * cols[j] for j in range(s.c))
            assert fast[n] == t


class TestStumpEvalSoft:
    def test_softmax_of_constant_vector(self, rng):
        s = random_soft_stump(rng, 3, 4)
        # all union inputs equal => weighted softmax returns the constant
        u = np.full(4, 0.37)
        w = csg.softmax_weights(u, s.sharpness.psi, axis=0)
        npt.assert_allclose((w * u).sum(), 0.37, atol=1e-12)

    def test_max_star_two_values(self):
        # softmax average of (0, 1) at psi=20
        psi = 20.0
        v = np.array([0.0, 1.0])
        w = csg.softmax_weights(v, psi, axis=0)
        got = float((w * v).sum())
        expect = math.exp(20) / (1 + math.exp(20))
        npt.assert_allclose(got, expect, rtol=1e-12)
        assert abs(got - (1 - 2.06e-9)) < 1e-10

    def test_in_unit_interval(self, rng):
        for _ in range(10):
            s = random_soft_stump(rng, 3, 3)
            t = csg.stump_eval_soft(s, rng.uniform(-2, 2, (200, 3)))
            assert np.all(t >= 0) and np.all(t <= 1)

    def test_hard_soft_agreement_away_from_surfaces(self, rng):
        a = geo.sphere(1.0, geo.Pose(t=[0.5, 0, 0]))
        b = geo.sphere(1.0, geo.Pose(t=[-0.5, 0, 0]))
        hard = csg.Stump((a, b), [0, 0], [[1], [1]], [1])
        soft = csg.soft_lift(hard, low=0.0, high=1.0,
                             sharpness=geo.Sharpness(75.0, 20.0))
        pts = rng.uniform(-2, 2, (20000, 3))
        d = np.stack([geo.sdf(p, pts) for p in (a, b)], axis=1)
        pts = pts[np.abs(d).min(axis=1) >= 0.2]
        h = csg.stump_eval_hard(hard, pts).astype(np.float64)
        t = csg.stump_eval_soft(soft, pts)
        assert np.max(np.abs(t - h)) <= 1e-3

    def test_monotone_toward_hard_in_sharpness(self, rng):
        s = random_stump(rng, 3, 2)
        pts = rng.uniform(-2, 2, (3000, 3))
        d = np.stack([geo.sdf(p, pts) for p in s.primitives], axis=1)
        pts = pts[np.abs(d).min(axis=1) >= 0.25][:300]
        h = csg.stump_eval_hard(s, pts).astype(np.float64)
        errs = []
        for eta, psi in ((10, 5), (30, 12), (75, 20), (150, 40)):
            soft = csg.soft_lift(s, low=0.0, high=1.0, sharpness=geo.Sharpness(eta, psi))
            errs.append(float(np.max(np.abs(csg.stump_eval_soft(soft, pts) - h))))
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))


class TestTreeToStump:
    def test_difference_base_case(self):
        expr, prims = dsl.parse_csg("difference(box(2,2,2), sphere(r=1))")
        s = csg.tree_to_stump(expr, prims)
        assert s.c == 1
        assert s.k == 2
        assert s.w_c.tolist() == [0, 1]
        assert s.w_i[:, 0].tolist() == [1, 1]
        assert s.w_u.tolist() == [1]

    def test_union_base_case(self):
        expr, prims = dsl.parse_csg("union(box(2,2,2), sphere(r=1))")
        s = csg.tree_to_stump(expr, prims)
        assert s.c == 2
        assert s.w_c.tolist() == [0, 0]
        assert s.w_i.tolist() == [[1, 0], [0, 1]]

    def test_distribution_four_columns(self, rng):
        src = ("intersection(union(sphere(r=0.8), translate(0.6,0,0, sphere(r=0.8))), "
               "union(box(1.5,1.5,1.5), translate(0,0.6,0, box(1.5,1.5,1.5))))")
        expr, prims = dsl.parse_csg(src)
        s = csg.tree_to_stump(expr, prims)
        assert s.c == 4
        # row-major distribution: (A C) (B C) (A D) (B D)
        cols = [tuple(np.flatnonzero(s.w_i[:, j])) for j in range(4)]
        assert cols == [(0, 2), (1, 2), (0, 3), (1, 3)]
        pts = rng.uniform(-2, 2, (10000, 3))
        assert np.array_equal(csg.stump_eval_hard(s, pts),
                              csg.eval_tree_hard(expr, prims, pts))

    def test_both_polarities_duplicate_row(self, rng):
        # A appears positively (left term) and complemented (inside the cut)
        a = geo.sphere(0.8)
        b = geo.box(1.4, 1.4, 1.4, geo.Pose(t=[0.5, 0.5, 0]))
        prims = [a, b]
        expr = csg.Union(csg.Leaf(0), csg.Difference(csg.Leaf(1), csg.Leaf(0)))
        s = csg.tree_to_stump(expr, prims)
        assert s.k == 3  # sphere twice: once per polarity
        pts = rng.uniform(-2, 2, (10000, 3))
        assert np.array_equal(csg.stump_eval_hard(s, pts),
                              csg.eval_tree_hard(expr, prims, pts))

    def test_universe_and_empty(self):
        prims = [unit_sphere()]
        s = csg.tree_to_stump(csg.Union(csg.Leaf(0), csg.UNIVERSE), prims)
        pts = np.array([[0, 0, 0], [5, 5, 5]], dtype=float)
        assert csg.stump_eval_hard(s, pts).tolist() == [1, 1]
        s2 = csg.tree_to_stump(csg.Intersection(csg.Leaf(0), csg.EMPTY), prims)
        assert csg.stump_eval_hard(s2, pts).tolist() == [0, 0]

    def test_column_cap(self):
        src = ("intersection(union(sphere(r=1), sphere(r=0.9), sphere(r=0.8)), "
               "union(box(1,1,1), box(2,2,2), box(3,3,3)))")
        expr, prims = dsl.parse_csg(src)
        with pytest.raises(csg.ColumnBudgetError):
            csg.tree_to_stump(expr, prims, max_columns=8)

    def test_equivalence_sweep(self, rng):
        # smaller cousin of the acceptance criterion, with the same oracle
        for _ in range(30):
            expr, prims = random_tree(rng)
            s = csg.tree_to_stump(expr, prims)
            pts = rng.uniform(-2.5, 2.5, (2000, 3))
            assert np.array_equal(csg.stump_eval_hard(s, pts),
                                  csg.eval_tree_hard(expr, prims, pts))


class TestStumpAsTree:
    def test_round_trip_occupancy(self, rng):
        for _ in range(20):
            s = random_stump(rng, 4, 3)
            expr, prims = csg.stump_as_tree(s)
            pts = rng.uniform(-2, 2, (3000, 3))
            assert np.array_equal(csg.stump_eval_hard(s, pts),
                                  csg.eval_tree_hard(expr, prims, pts))

    def test_empty_stump(self):
        s = csg.Stump((), np.zeros(0, dtype=np.uint8),
                      np.zeros((0, 0), dtype=np.uint8), np.zeros(0, dtype=np.uint8))
        expr, prims = csg.stump_as_tree(s)
        assert expr == csg.EMPTY
        assert prims == []


class TestSimplify:
    def test_all_unions_off_gives_empty(self, rng):
        s = random_stump(rng, 3, 2)
        s = csg.Stump(s.primitives, s.w_c, s.w_i, np.zeros(s.c, dtype=np.uint8))
        out = csg.simplify_stump(s, rng.uniform(-2, 2, (500, 3)))
        assert out.k == 0 and out.c == 0

    def test_duplicate_columns_collapse(self, rng):
        a = unit_sphere()
        s = csg.Stump((a,), [0], [[1, 1]], [1, 1])
        out = csg.simplify_stump(s, rng.uniform(-2, 2, (500, 3)))
        assert out.c == 1

    def test_nested_spheres_single_column(self, rng):
        big = geo.sphere(1.0)
        small = geo.sphere(0.4)
        s = csg.Stump((big, small), [0, 0], [[1, 0], [0, 1]], [1, 1])
        pts = rng.uniform(-1.5, 1.5, (4000, 3))
        out = csg.simplify_stump(s, pts)
        assert out.c == 1
        assert out.k == 1
        assert np.array_equal(csg.stump_eval_hard(out, pts), csg.stump_eval_hard(s, pts))

    def test_bit_for_bit_on_samples(self, rng):
        for _ in range(10):
            s = random_stump(rng, 5, 4)
            pts = rng.uniform(-2, 2, (2000, 3))
            out = csg.simplify_stump(s, pts)
            assert np.array_equal(csg.stump_eval_hard(out, pts), csg.stump_eval_hard(s, pts))

    def test_accepts_test_point_set(self, rng):
        from stumpcad import sampling
        s = random_stump(rng, 3, 2)
        expr, prims = csg.stump_as_tree(s)
        pts = sampling.sample_uniform(expr, prims, 500, bbox=([-2] * 3, [2] * 3), seed=0)
        out = csg.simplify_stump(s, pts)
        assert out.c <= s.c


class TestBinarize:
    def test_threshold_half_inclusive(self):
        s = csg.SoftStump((unit_sphere(),), [0.5], [[0.49]], [0.51])
        out = csg.binarize(s, 0.5)
        assert out.w_c.tolist() == [1]
        assert out.w_i.tolist() == [[0]]
        assert out.w_u.tolist() == [1]

    def test_idempotent_on_binary(self, rng):
        s = random_stump(rng, 3, 2)
        soft = csg.soft_lift(s, low=0.0, high=1.0)
        out = csg.binarize(soft)
        assert np.array_equal(out.w_c, s.w_c)
        assert np.array_equal(out.w_i, s.w_i)
        assert np.array_equal(out.w_u, s.w_u)

    def test_threshold_range(self):
        s = csg.SoftStump((unit_sphere(),), [0.5], [[0.5]], [0.5])
        with pytest.raises(ValueError):
            csg.binarize(s, 1.0)


class TestSoftGradients:
    def test_matches_finite_differences(self, rng):
        # 3-primitive random soft stump; every parameter class
        from stumpcad import fit, sampling
        for _ in range(5):
            s = random_soft_stump(rng, 3, 3)
            pts = sampling.TestPointSet(
                rng.uniform(-1.5, 1.5, (48, 3)), rng.integers(0, 2, 48),
                (np.full(3, -1.5), np.full(3, 1.5)))
            rep = fit.grad_check(s, pts)
            assert rep.passed, (rep.worst_param, rep.max_rel_error, rep.max_abs_error)
            assert rep.max_rel_error <= 1e-4
