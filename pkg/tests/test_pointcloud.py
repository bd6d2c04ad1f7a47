"""Point cloud IO, normal estimation, normalization, and synthesis tests."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ctpoint.pointcloud import (
    SHAPES,
    Dataset,
    ParseError,
    PointCloud,
    estimate_normals,
    load,
    load_dataset,
    normalize,
    resample,
    save_dataset,
    synth_dataset,
    write_xyz,
)


class TestXYZ:
    def test_six_column_parse(self, tmp_path):
        p = tmp_path / "two.xyz"
        p.write_text("0 0 0 0 0 1\n1 0 0 0 0 1\n")
        cloud = load(str(p))
        assert len(cloud) == 2
        assert_allclose(cloud.normals, [[0, 0, 1], [0, 0, 1]])

    def test_three_column_estimates_normals(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = np.concatenate([rng.uniform(-1, 1, size=(40, 2)), np.zeros((40, 1))], axis=1)
        p = tmp_path / "plane.xyz"
        p.write_text("".join(f"{x} {y} {z}\n" for x, y, z in pts))
        cloud = load(str(p))
        assert_allclose(np.linalg.norm(cloud.normals, axis=1), np.ones(40), atol=1e-4)

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        dirs = rng.normal(size=(10, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cloud = PointCloud(rng.normal(size=(10, 3)), dirs)
        path = str(tmp_path / "rt.xyz")
        write_xyz(cloud, path)
        again = load(path)
        assert np.array_equal(again.positions, cloud.positions)
        assert np.array_equal(again.normals, cloud.normals)

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "bad.xyz"
        p.write_text("0 0 0\n1 2\n")
        with pytest.raises(ParseError, match="bad.xyz:2"):
            load(str(p))

    def test_non_numeric_field(self, tmp_path):
        p = tmp_path / "bad.xyz"
        p.write_text("0 0 zero\n")
        with pytest.raises(ParseError, match=":1"):
            load(str(p))

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.xyz"
        p.write_text("\n")
        with pytest.raises(ParseError, match="empty"):
            load(str(p))


OFF_UNIT_CUBE = """OFF
8 6 12
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 1 2 6 5
4 2 3 7 6
4 3 0 4 7
"""


class TestOFF:
    def test_unit_cube(self, tmp_path):
        p = tmp_path / "cube.off"
        p.write_text(OFF_UNIT_CUBE)
        cloud = load(str(p))
        assert len(cloud) == 8
        assert_allclose(cloud.positions[1], [1, 0, 0])
        # corner normals of an outward-oriented cube point away from center
        centered = cloud.positions - 0.5
        assert np.all(np.einsum("ij,ij->i", cloud.normals, centered) > 0)

    def test_header_with_inline_counts(self, tmp_path):
        p = tmp_path / "inline.off"
        p.write_text("OFF 2 0 0\n0 0 0\n1 1 1\n")
        assert len(load(str(p))) == 2

    def test_missing_header(self, tmp_path):
        p = tmp_path / "no.off"
        p.write_text("8 6 12\n")
        with pytest.raises(ParseError, match="OFF header"):
            load(str(p))

    def test_face_index_out_of_range(self, tmp_path):
        p = tmp_path / "bad.off"
        p.write_text("OFF\n2 1 0\n0 0 0\n1 1 1\n3 0 1 5\n")
        with pytest.raises(ParseError, match="out of range"):
            load(str(p))


PLY_WITH_NORMALS = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
property float nx
property float ny
property float nz
end_header
0 0 0 0 0 1
1 0 0 0 0 1
0 1 0 0 0 1
"""


class TestPLY:
    def test_vertex_normals(self, tmp_path):
        p = tmp_path / "tri.ply"
        p.write_text(PLY_WITH_NORMALS)
        cloud = load(str(p))
        assert len(cloud) == 3
        assert_allclose(cloud.normals, np.tile([0, 0, 1], (3, 1)))

    def test_binary_rejected(self, tmp_path):
        p = tmp_path / "bin.ply"
        p.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(ParseError, match="ascii"):
            load(str(p))


class TestEstimateNormals:
    def test_plane_normals(self):
        rng = np.random.default_rng(2)
        pts = np.concatenate([rng.uniform(-1, 1, size=(60, 2)), np.zeros((60, 1))], axis=1)
        cloud = estimate_normals(PointCloud(pts, np.tile([0, 0, 1.0], (60, 1))))
        assert_allclose(np.abs(cloud.normals[:, 2]), np.ones(60), atol=1e-3)

    def test_sphere_normals_point_radially(self):
        rng = np.random.default_rng(3)
        dirs = rng.normal(size=(300, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cloud = estimate_normals(PointCloud(dirs, dirs.copy()))
        agree = np.einsum("ij,ij->i", cloud.normals, dirs)
        assert np.mean(agree > 0.95) >= 0.95

    def test_collinear_fallback(self):
        pts = np.stack([np.linspace(0, 1, 17), np.zeros(17), np.zeros(17)], axis=1)
        cloud = estimate_normals(PointCloud(pts, np.tile([0, 0, 1.0], (17, 1))), k=16)
        assert_allclose(cloud.normals, np.tile([0, 0, 1.0], (17, 1)))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            estimate_normals(PointCloud(np.zeros((5, 3)), np.tile([0, 0, 1.0], (5, 1))), k=16)


class TestNormalizeResample:
    def test_two_point_example(self):
        cloud = PointCloud([[0, 0, 0], [2, 0, 0]], np.tile([0, 0, 1.0], (2, 1)))
        out = normalize(cloud)
        assert_allclose(out.positions, [[-1, 0, 0], [1, 0, 0]], atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.normal(size=(30, 3)), np.tile([0, 0, 1.0], (30, 1)))
        once = normalize(cloud)
        twice = normalize(once)
        assert_allclose(twice.positions, once.positions, atol=1e-6)
        assert abs(np.linalg.norm(once.positions, axis=1).max() - 1.0) < 1e-6
        assert_allclose(once.positions.mean(axis=0), np.zeros(3), atol=1e-6)

    def test_resample_full_is_permutation(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.normal(size=(20, 3)), np.tile([0, 0, 1.0], (20, 1)))
        out = resample(cloud, 20, seed=9)
        assert sorted(map(tuple, out.positions)) == sorted(map(tuple, cloud.positions))

    def test_resample_deterministic(self):
        rng = np.random.default_rng(6)
        cloud = PointCloud(rng.normal(size=(20, 3)), np.tile([0, 0, 1.0], (20, 1)))
        a = resample(cloud, 8, seed=3)
        b = resample(cloud, 8, seed=3)
        assert np.array_equal(a.positions, b.positions)

    def test_resample_upsamples_with_replacement(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], np.tile([0, 0, 1.0], (2, 1)))
        out = resample(cloud, 7, seed=0)
        assert len(out) == 7


class TestSynth:
    def test_sphere_sampler_radius_constant(self):
        # the base sampler puts every point at the same radius; the dataset
        # generator's anisotropic scaling then stretches per sample
        pos, nrm = SHAPES["sphere"](np.random.default_rng(1), 64)
        radii = np.linalg.norm(pos, axis=1)
        assert_allclose(radii, np.full(64, radii[0]), atol=1e-6)
        assert_allclose(np.linalg.norm(nrm, axis=1), np.ones(64), atol=1e-9)

    def test_deterministic(self):
        a = synth_dataset(["cube", "torus"], 3, 32, 0.01, seed=7)
        b = synth_dataset(["cube", "torus"], 3, 32, 0.01, seed=7)
        for ca, cb in zip(a.clouds, b.clouds):
            assert np.array_equal(ca.positions, cb.positions)
            assert np.array_equal(ca.normals, cb.normals)

    def test_bookkeeping(self):
        classes = list(SHAPES)
        ds = synth_dataset(classes, per_class=4, points=16, noise_sigma=0.0, seed=0)
        assert len(ds) == 8 * 4
        counts = np.bincount(ds.labels(), minlength=8)
        assert np.all(counts == 4)

    def test_unknown_shape(self):
        with pytest.raises(ValueError, match="unknown shape"):
            synth_dataset(["dodecahedron"], 1, 8, 0.0, seed=0)

    def test_normals_unit(self):
        ds = synth_dataset(list(SHAPES), per_class=1, points=64, noise_sigma=0.02, seed=3)
        for cloud in ds.clouds:
            cloud.check_normals_unit()


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        ds = synth_dataset(["sphere", "cube"], per_class=2, points=16, noise_sigma=0.0, seed=2)
        manifest = save_dataset(ds, str(tmp_path / "data"))
        back = load_dataset(manifest)
        assert back.class_names == ["sphere", "cube"]
        assert len(back) == 4
        for a, b in zip(back.clouds, ds.clouds):
            assert a.label == b.label
            assert np.array_equal(a.positions, b.positions)

    def test_bad_manifest(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{not json")
        with pytest.raises(ParseError):
            load_dataset(str(p))
