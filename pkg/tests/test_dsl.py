"""Parser contracts: grammar, errors with locations, canonical printing."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from stumpcad import csg, dsl, geometry as geo


class TestParse:
    def test_single_sphere(self):
        expr, prims = dsl.parse_csg("sphere(r=1)")
        assert expr == csg.Leaf(0)
        assert len(prims) == 1
        assert prims[0].kind is geo.Kind.SPHERE
        assert prims[0].q[0] == 1.0

    def test_difference_two_leaves(self):
        expr, prims = dsl.parse_csg("difference(box(2,2,2), sphere(r=1))")
        assert expr == csg.Difference(csg.Leaf(0), csg.Leaf(1))
        assert prims[0].kind is geo.Kind.BOX
        assert prims[1].kind is geo.Kind.SPHERE

    def test_union_with_translate(self):
        expr, prims = dsl.parse_csg("union(sphere(r=1), translate(1,0,0, sphere(r=1)))")
        assert expr == csg.Union(csg.Leaf(0), csg.Leaf(1))
        npt.assert_allclose(prims[0].pose.t, [0, 0, 0])
        npt.assert_allclose(prims[1].pose.t, [1, 0, 0])

    def test_table_in_source_order(self):
        _, prims = dsl.parse_csg("union(box(1,1,1), cylinder(r=0.5), cone(angle=0.4))")
        assert [p.kind for p in prims] == [geo.Kind.BOX, geo.Kind.CYLINDER, geo.Kind.CONE]

    def test_rotate_is_openscad_xyz(self):
        _, prims = dsl.parse_csg("rotate(0, 0, 90, translate(1, 0, 0, sphere(r=0.5)))")
        # translate runs first (inner), then the rotation about z
        npt.assert_allclose(prims[0].pose.t, [0, 1, 0], atol=1e-12)

    def test_nested_transforms_compose(self):
        _, prims = dsl.parse_csg(
            "translate(0, 0, 1, rotate(0, 0, 90, translate(1, 0, 0, box(1,1,1))))")
        npt.assert_allclose(prims[0].pose.t, [0, 1, 1], atol=1e-12)

    def test_variadic_difference_left_fold(self):
        expr, _ = dsl.parse_csg("difference(box(3,3,3), sphere(r=1), cylinder(r=0.3))")
        assert expr == csg.Difference(csg.Difference(csg.Leaf(0), csg.Leaf(1)), csg.Leaf(2))

    def test_complement(self):
        expr, _ = dsl.parse_csg("complement(sphere(r=1))")
        assert expr == csg.Complement(csg.Leaf(0))

    def test_comments_and_whitespace(self):
        expr, prims = dsl.parse_csg(
            "# a shape\nunion( sphere(r=1) ,\n  # inner\n  box(1,2,3) )")
        assert isinstance(expr, csg.Union)
        assert len(prims) == 2


class TestParseErrors:
    def test_lexical_error_has_location(self):
        with pytest.raises(dsl.CsgParseError) as err:
            dsl.parse_csg("union(sphere(r=1), @)")
        assert err.value.line == 1
        assert err.value.col == 20

    def test_syntax_error_line_col(self):
        with pytest.raises(dsl.CsgParseError) as err:
            dsl.parse_csg("union(sphere(r=1)\n  box(1,1,1))")
        assert err.value.line == 2

    def test_arity_error(self):
        with pytest.raises(dsl.CsgParseError, match="at least 2"):
            dsl.parse_csg("difference(sphere(r=1))")

    def test_negative_intrinsic(self):
        with pytest.raises(dsl.CsgParseError, match="positive"):
            dsl.parse_csg("sphere(r=-1)")

    def test_unknown_construct(self):
        with pytest.raises(dsl.CsgParseError, match="unknown"):
            dsl.parse_csg("torus(r=1)")

    def test_trailing_input(self):
        with pytest.raises(dsl.CsgParseError, match="trailing"):
            dsl.parse_csg("sphere(r=1) sphere(r=2)")

    def test_wrong_keyword_argument(self):
        with pytest.raises(dsl.CsgParseError, match="angle"):
            dsl.parse_csg("cone(r=1)")


def _structurally_equal(a, b, tol=1e-9):
    ea, pa = a
    eb, pb = b
    if type(ea) is not type(eb):
        return False
    if len(pa) != len(pb):
        return False
    for x, y in zip(pa, pb):
        if x.kind is not y.kind or not np.allclose(x.q, y.q, atol=tol):
            return False
        if not np.allclose(x.pose.t, y.pose.t, atol=tol):
            return False
        if not np.allclose(geo.quat_to_matrix(x.pose.r), geo.quat_to_matrix(y.pose.r),
                           atol=tol):
            return False

    def shape(e):
        if isinstance(e, csg.Leaf):
            return ("leaf", e.index)
        if isinstance(e, (csg.Universe, csg.Empty)):
            return (type(e).__name__,)
        if isinstance(e, csg.Complement):
            return ("c", shape(e.child))
        return (type(e).__name__, shape(e.left), shape(e.right))

    return shape(ea) == shape(eb)


class TestPrint:
    CASES = [
        "sphere(r=1)",
        "union(sphere(r=1), translate(1, 0, 0, sphere(r=1)))",
        "difference(box(2, 2, 2), sphere(r=1), cylinder(r=0.25))",
        "intersection(cone(angle=0.5), complement(box(1, 1, 1)))",
        "union(rotate(0, 45, 0, box(1, 2, 3)), translate(0.5, -0.25, 0, cylinder(r=0.125)))",
    ]

    @pytest.mark.parametrize("source", CASES)
    def test_round_trip(self, source):
        parsed = dsl.parse_csg(source)
        text = dsl.format_csg(*parsed)
        again = dsl.parse_csg(text)
        assert _structurally_equal(parsed, again)

    @pytest.mark.parametrize("source", CASES)
    def test_canonical_idempotent(self, source):
        first = dsl.format_csg(*dsl.parse_csg(source))
        second = dsl.format_csg(*dsl.parse_csg(first))
        assert first == second

    def test_print_example_is_canonical(self):
        src = "union(sphere(r=1), translate(1,0,0, sphere(r=1)))"
        assert dsl.format_csg(*dsl.parse_csg(src)) == \
            "union(sphere(r=1), translate(1, 0, 0, sphere(r=1)))"

    def test_occupancy_preserved(self, rng):
        src = ("difference(union(rotate(10, 20, 30, box(1.2, 0.8, 0.6)), "
               "translate(0.4, 0, 0.2, sphere(r=0.5))), cylinder(r=0.2))")
        a = dsl.parse_csg(src)
        b = dsl.parse_csg(dsl.format_csg(*a))
        pts = rng.uniform(-1.5, 1.5, (5000, 3))
        assert np.array_equal(csg.eval_tree_hard(a[0], a[1], pts),
                              csg.eval_tree_hard(b[0], b[1], pts))
