"""Serialization, OpenSCAD emission and import, grids, meshing, writers."""

import json
import math
import struct

import numpy as np
import numpy.testing as npt
import pytest

from stumpcad import csg, dsl, export, geometry as geo, sampling

from conftest import random_soft_stump, random_stump


class TestStumpJson:
    def test_round_trip_structural(self, rng):
        for _ in range(25):
            s = random_stump(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)))
            back = export.stump_from_json(export.stump_to_json(s))
            assert isinstance(back, csg.Stump)
            assert np.array_equal(back.w_c, s.w_c)
            assert np.array_equal(back.w_i, s.w_i)
            assert np.array_equal(back.w_u, s.w_u)
            for a, b in zip(back.primitives, s.primitives):
                assert a.kind is b.kind
                npt.assert_array_equal(a.q, b.q)
                npt.assert_array_equal(a.pose.t, b.pose.t)
                npt.assert_array_equal(a.pose.r, b.pose.r)

    def test_soft_round_trip_keeps_sharpness(self, rng):
        s = random_soft_stump(rng, 2, 2, eta=33.5, psi=11.25)
        back = export.stump_from_json(export.stump_to_json(s))
        assert isinstance(back, csg.SoftStump)
        assert back.sharpness.eta == 33.5
        assert back.sharpness.psi == 11.25
        npt.assert_array_equal(back.w_i, s.w_i)

    def test_floats_survive_exactly(self):
        q = 0.1 + 0.2  # not representable nicely
        s = csg.Stump((geo.sphere(q),), [0], [[1]], [1])
        back = export.stump_from_json(export.stump_to_json(s))
        assert back.primitives[0].q[0] == q

    def test_row_length_mismatch_names_row(self):
        doc = {"primitives": [
            {"kind": "sphere", "q": [1.0], "t": [0, 0, 0], "r": [1, 0, 0, 0]},
            {"kind": "sphere", "q": [1.0], "t": [0, 0, 0], "r": [1, 0, 0, 0]}],
            "w_c": [0, 0], "w_i": [[1, 0], [1]], "w_u": [1, 0], "soft": False}
        with pytest.raises(export.SchemaError) as err:
            export.stump_from_json(json.dumps(doc))
        assert err.value.path == "/w_i/1"

    def test_unknown_kind_lists_valid(self):
        doc = {"primitives": [{"kind": "torus", "q": [1], "t": [0, 0, 0],
                               "r": [1, 0, 0, 0]}],
               "w_c": [0], "w_i": [[1]], "w_u": [1], "soft": False}
        with pytest.raises(export.SchemaError) as err:
            export.stump_from_json(json.dumps(doc))
        msg = str(err.value)
        for kind in ("box", "sphere", "cylinder", "cone"):
            assert kind in msg

    def test_missing_field_pointer(self):
        with pytest.raises(export.SchemaError) as err:
            export.stump_from_json(json.dumps({"primitives": []}))
        assert err.value.path == "/w_c"

    def test_file_round_trip(self, tmp_path, rng):
        s = random_stump(rng, 3, 2)
        path = tmp_path / "stump.json"
        export.save_stump(path, s)
        back = export.load_stump(path)
        assert np.array_equal(back.w_i, s.w_i)


class TestOpenScadEmit:
    def test_single_sphere_structure(self):
        s = csg.Stump((geo.sphere(1.0),), [0], [[1]], [1])
        text = export.export_openscad(s)
        assert "sphere(r=1.00000000);" in text
        assert "union()" in text
        assert "intersection()" in text

    def test_difference_base_case_structure(self):
        expr, prims = dsl.parse_csg("difference(box(2,2,2), sphere(r=1))")
        s = csg.tree_to_stump(expr, prims)
        text = export.export_openscad(s)
        # complemented sphere renders as difference against the big cube
        assert "difference() { // complement" in text
        assert "cube([" in text
        assert text.index("intersection()") < text.index("difference()")

    def test_deterministic(self, rng):
        s = random_stump(rng, 4, 3)
        assert export.export_openscad(s) == export.export_openscad(s)

    def test_soft_rejected_with_guidance(self, rng):
        s = random_soft_stump(rng, 1, 1)
        with pytest.raises(ValueError, match="binarize"):
            export.export_openscad(s)

    def test_nine_significant_digits(self):
        s = csg.Stump((geo.sphere(0.123456789123),), [0], [[1]], [1])
        assert "sphere(r=0.123456789);" in export.export_openscad(s)

    def test_expression_export(self):
        expr, prims = dsl.parse_csg("union(sphere(r=1), box(1,1,1))")
        text = export.export_openscad(expr, prims)
        assert "cube([1.00000000, 1.00000000, 1.00000000], center=true);" in text


class TestOpenScadRoundTrip:
    def shapes(self):
        yield dsl.parse_csg("difference(box(2,2,2), sphere(r=1))")
        yield dsl.parse_csg("union(sphere(r=0.8), translate(0.9, 0, 0, sphere(r=0.6)))")
        yield dsl.parse_csg(
            "difference(intersection(cylinder(r=0.7), box(1.8,1.8,1.2)), cylinder(r=0.4))")
        yield dsl.parse_csg(
            "union(intersection(translate(0, 0, 0.8, cone(angle=0.5)), box(1.5,1.5,1.5)),"
            " rotate(15, 30, 45, box(0.9, 0.5, 0.4)))")
        yield dsl.parse_csg("complement(sphere(r=1))")

    def test_emit_reparse_occupancy(self, rng):
        for expr, prims in self.shapes():
            text = export.export_openscad(expr, prims)
            back_expr, back_prims = export.import_openscad(text)
            lo, hi = geo.DEFAULT_WORLD_BOX
            pts = rng.uniform(lo, hi, (10000, 3))
            ours = csg.eval_tree_hard(expr, prims, pts)
            theirs = csg.eval_tree_hard(back_expr, back_prims, pts)
            assert np.array_equal(ours, theirs), dsl.format_csg(expr, prims)

    def test_stump_emit_reparse(self, rng):
        for _ in range(8):
            s = random_stump(rng, 3, 2)
            text = export.export_openscad(s)
            back_expr, back_prims = export.import_openscad(text)
            lo, hi = geo.DEFAULT_WORLD_BOX
            pts = rng.uniform(lo, hi, (8000, 3))
            assert np.array_equal(csg.stump_eval_hard(s, pts),
                                  csg.eval_tree_hard(back_expr, back_prims, pts))


class TestRasterize:
    def test_universe_all_ones(self):
        g = export.rasterize((csg.UNIVERSE, []), (8, 8, 8),
                             bbox=(np.full(3, -1.0), np.full(3, 1.0)))
        assert g.values.min() == 1.0

    def test_sphere_volume_convergence(self):
        expr, prims = dsl.parse_csg("sphere(r=1)")
        g = export.rasterize((expr, prims), (64, 64, 64))
        volume = g.values.mean() * np.prod(g.bbox[1] - g.bbox[0])
        npt.assert_allclose(volume, 4 * math.pi / 3, rtol=0.02)

    def test_soft_threshold_matches_hard_away_from_surface(self, rng):
        s = random_stump(rng, 3, 2)
        soft = csg.soft_lift(s, low=0.0, high=1.0, sharpness=geo.Sharpness(75.0, 20.0))
        bbox = (np.full(3, -2.0), np.full(3, 2.0))
        hard_g = export.rasterize(s, (32, 32, 32), bbox)
        soft_g = export.rasterize(soft, (32, 32, 32), bbox)
        centers = hard_g.centers().reshape(-1, 3)
        d = np.stack([geo.sdf(p, centers) for p in s.primitives], axis=1)
        away = (np.abs(d).min(axis=1) >= 0.2).reshape(hard_g.dims)
        thresholded = (soft_g.values >= 0.5).astype(np.float64)
        assert np.array_equal(thresholded[away], hard_g.values[away])

    def test_dims_validated(self):
        with pytest.raises(ValueError):
            export.rasterize((csg.UNIVERSE, []), (1, 8, 8),
                             bbox=(np.full(3, -1.0), np.full(3, 1.0)))


class TestMarchingCubes:
    def test_all_zero_grid_empty_mesh(self):
        g = export.OccupancyGrid((8, 8, 8), (np.full(3, -1.0), np.full(3, 1.0)),
                                 np.zeros((8, 8, 8)))
        mesh = export.marching_cubes(g, 0.5)
        assert mesh.vertices.shape == (0, 3)
        assert mesh.faces.shape == (0, 3)

    def test_sphere_area_three_percent(self):
        expr, prims = dsl.parse_csg("sphere(r=1)")
        soft = csg.SoftStump((prims[0],), [0.0], [[1.0]], [1.0],
                             geo.Sharpness(75.0, 20.0))
        g = export.rasterize(soft, (128, 128, 128), (np.full(3, -1.26), np.full(3, 1.26)))
        mesh = export.marching_cubes(g, 0.5)
        npt.assert_allclose(mesh.area(), 4 * math.pi, rtol=0.03)

    def test_single_voxel_closed_surface(self):
        vals = np.zeros((5, 5, 5))
        vals[2, 2, 2] = 1.0
        g = export.OccupancyGrid((5, 5, 5), (np.full(3, -1.0), np.full(3, 1.0)), vals)
        mesh = export.marching_cubes(g, 0.5)
        edges = set()
        for f in mesh.faces:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                edges.add(tuple(sorted((int(f[a]), int(f[b])))))
        euler = mesh.vertices.shape[0] - len(edges) + mesh.faces.shape[0]
        assert euler == 2

    def test_vertices_within_one_voxel_of_surface(self, rng):
        for src in ("sphere(r=0.9)", "box(1.2, 0.8, 0.6)"):
            expr, prims = dsl.parse_csg(src)
            g = export.rasterize((expr, prims), (64, 64, 64))
            mesh = export.marching_cubes(g, 0.5)
            d = np.abs(geo.sdf(prims[0], mesh.vertices))
            assert np.max(d) <= np.linalg.norm(g.cell)

    def test_iso_range_validated(self):
        g = export.OccupancyGrid((4, 4, 4), (np.full(3, -1.0), np.full(3, 1.0)),
                                 np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            export.marching_cubes(g, 1.5)


class TestMeshFiles:
    def test_obj_output(self, tmp_path):
        mesh = export.Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                           np.array([[0, 1, 2]]))
        path = tmp_path / "m.obj"
        export.save_obj(path, mesh)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("v ")
        assert lines[-1] == "f 1 2 3"

    def test_stl_binary_layout(self, tmp_path):
        mesh = export.Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                           np.array([[0, 1, 2]]))
        path = tmp_path / "m.stl"
        export.save_stl(path, mesh)
        raw = path.read_bytes()
        assert len(raw) == 80 + 4 + 50
        (count,) = struct.unpack_from("<I", raw, 80)
        assert count == 1
        normal = struct.unpack_from("<3f", raw, 84)
        npt.assert_allclose(normal, [0, 0, 1], atol=1e-7)

    def test_grid_file_round_trip(self, tmp_path, rng):
        vals = rng.random((6, 5, 4))
        g = export.OccupancyGrid((6, 5, 4), (np.array([-1.0, -2, -3]),
                                             np.array([1.0, 2, 3])), vals)
        path = tmp_path / "g.grid"
        export.save_grid(path, g)
        back = export.load_grid(path)
        assert back.dims == (6, 5, 4)
        npt.assert_array_equal(back.values, g.values)
        npt.assert_array_equal(back.bbox[0], g.bbox[0])

    def test_grid_payload_mismatch(self, tmp_path, rng):
        g = export.OccupancyGrid((4, 4, 4), (np.full(3, -1.0), np.full(3, 1.0)),
                                 rng.random((4, 4, 4)))
        path = tmp_path / "g.grid"
        export.save_grid(path, g)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(ValueError, match="payload"):
            export.load_grid(path)
