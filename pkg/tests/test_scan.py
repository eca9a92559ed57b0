import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orchardnav.io import (ParseError, read_frame_csv, read_grid_csv, read_pcd, read_pgm, read_ppm, write_frame_csv,
                           write_grid_csv, write_pcd, write_pgm, write_ppm)
from orchardnav.scan import (BirdsEyeGrid, GridSpec, LidarFrame, LidarSpec, Point3, cartesian_to_polar,
                             enhance_contrast, polar_to_cartesian, rasterize, scale_channel)


def random_frame(rng, spec=None, fill=0.3):
    spec = spec or LidarSpec()
    shape = (spec.n_planes, spec.n_azimuths)
    r = np.where(rng.random(shape) < fill, rng.uniform(0.1, 60, shape), 0.0)
    i = np.where(r > 0, rng.integers(1, 256, shape), 0).astype(float)
    return LidarFrame(spec, r, i)


class TestLidarSpec:
    def test_defaults(self):
        s = LidarSpec()
        assert s.n_planes == 16 and s.n_azimuths == 900
        assert s.plane_angles[0] == 15 and s.plane_angles[-1] == -15
        assert abs(s.n_azimuths * s.azimuth_step - 360) < 1e-9
        assert s.plane_step == pytest.approx(2.0)

    @pytest.mark.parametrize("kw", [
        {"n_planes": 0, "plane_angles": ()},
        {"n_planes": 2, "plane_angles": (1.0, 1.0)},
        {"n_planes": 2, "plane_angles": (1.0,)},
        {"mount_height": 0.0},
        {"n_azimuths": 0},
        {"max_range": -1},
    ])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            LidarSpec(**kw)


class TestLidarFrame:
    def test_shape_checked(self):
        with pytest.raises(ValueError):
            LidarFrame(LidarSpec(), np.zeros((16, 10)), np.zeros((16, 10)))

    def test_range_and_intensity_bounds(self):
        s = LidarSpec(n_azimuths=4, n_planes=1, plane_angles=(0.0,), max_range=10)
        with pytest.raises(ValueError):
            LidarFrame(s, np.array([[0, 0, 0, 11.0]]), np.zeros((1, 4)))
        with pytest.raises(ValueError):
            LidarFrame(s, np.array([[0, 0, 0, -1.0]]), np.zeros((1, 4)))
        with pytest.raises(ValueError):
            LidarFrame(s, np.zeros((1, 4)), np.array([[0, 0, 0, 256.0]]))

    def test_immutable(self):
        f = LidarFrame.empty(LidarSpec())
        with pytest.raises(ValueError):
            f.range[0, 0] = 1.0

    def test_xyz_matches_scalar_projection(self):
        rng = np.random.default_rng(3)
        f = random_frame(rng, LidarSpec(n_azimuths=36))
        xyz = f.xyz()
        for p, a in zip(*np.nonzero(f.valid)):
            q = polar_to_cartesian(f.spec.plane_angles[p], f.spec.azimuths()[a], f.range[p, a])
            assert np.allclose(xyz[p, a], q, atol=1e-12)


class TestPolar:
    def test_axis_aligned(self):
        assert np.allclose(polar_to_cartesian(0, 0, 5.0), (5, 0, 0))

    def test_straight_up(self):
        assert np.allclose(polar_to_cartesian(90, 0, 2.0), (0, 0, 2), atol=1e-12)

    def test_general_case(self):
        # products of cos(2 deg), cos/sin(30 deg) and sin(2 deg) evaluated independently
        p = polar_to_cartesian(2, 30, 10.0)
        assert p == pytest.approx((8.654978, 4.996954, 0.348995), abs=1e-6)

    def test_zero_range_is_no_return(self):
        assert polar_to_cartesian(3, 40, 0.0) is None

    @pytest.mark.parametrize("bad", [(math.nan, 0, 1), (0, math.inf, 1), (0, 0, -1)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            polar_to_cartesian(*bad)

    @given(st.floats(-89, 89), st.floats(0, 359.99), st.floats(0.01, 100))
    def test_round_trip(self, a, t, r):
        p = polar_to_cartesian(a, t, r)
        a2, t2, r2 = cartesian_to_polar(*p)
        assert a2 == pytest.approx(a, abs=1e-9)
        dt = (t2 - t + 180) % 360 - 180
        assert abs(dt) < 1e-9
        assert r2 == pytest.approx(r, abs=1e-9)


class TestRasterize:
    def test_single_point_at_origin(self):
        g = rasterize([Point3(0, 0, 0)])
        assert g.cells[500, 500] == 1 and g.cells.sum() == 1

    def test_additive_in_one_cell(self):
        g = rasterize([(0.01, 0.02, 0), (0.05, 0.07, 1)])
        assert g.cells[500, 500] == 2

    def test_edge_column(self):
        g = rasterize([(49.96, 0, 0)])
        row, col = np.argwhere(g.cells)[0]
        assert (row, col) == (500, 999) and g.cells[row, col] == 1

    def test_off_grid_ignored(self):
        assert rasterize([(50.0, 0, 0), (-50.01, 0, 0)]).cells.sum() == 0

    def test_empty(self):
        assert rasterize(np.zeros((0, 3))).cells.sum() == 0

    def test_grid_spec(self):
        assert GridSpec().width_m == pytest.approx(100)
        with pytest.raises(ValueError):
            GridSpec(side_px=7)
        with pytest.raises(ValueError):
            BirdsEyeGrid(GridSpec(side_px=2), -np.ones((2, 2)))

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.floats(-60, 60), st.floats(-60, 60)), max_size=40), st.randoms())
    def test_permutation_invariant(self, pts, rnd):
        shuffled = list(pts)
        rnd.shuffle(shuffled)
        spec = GridSpec(side_px=100, metres_per_px=1.0)
        assert np.array_equal(rasterize(np.array(pts).reshape(-1, 2), spec).cells,
                              rasterize(np.array(shuffled).reshape(-1, 2), spec).cells)


class TestChannels:
    def test_scale_min_and_max(self):
        out = scale_channel(np.array([0, 10, 60, 110]), 8)
        assert out.tolist() == [0, 8, 132, 255]

    def test_scale_constant_and_zero(self):
        assert scale_channel(np.array([0, 7, 7]), 8).tolist() == [0, 255, 255]
        assert scale_channel(np.zeros(3), 8).tolist() == [0, 0, 0]

    @given(st.lists(st.integers(0, 255), min_size=2, max_size=30), st.integers(0, 254))
    def test_scale_preserves_order(self, vals, b):
        v = np.array(vals, dtype=float)
        out = scale_channel(v, b)
        nz = v > 0
        assert np.all(out[~nz] == 0)
        if nz.sum() >= 2 and v[nz].min() < v[nz].max():
            assert out[v == v[nz].min()][0] == b and out[v == v[nz].max()][0] == 255
            order = np.argsort(v[nz], kind="stable")
            assert np.all(np.diff(out[nz][order]) >= 0)

    def test_contrast_examples(self):
        assert enhance_contrast(np.array([64.0, 255.0, 128.0]), 64).tolist() == [0, 255, 85]
        assert enhance_contrast(np.array([10.0]), 64).tolist() == [0]

    def test_contrast_rejects_offset(self):
        with pytest.raises(ValueError):
            enhance_contrast(np.zeros(2), 255)

    @given(st.floats(0, 254), st.lists(st.floats(0, 255), min_size=2, max_size=20))
    def test_contrast_monotone(self, k, vals):
        v = np.sort(np.array(vals))
        assert np.all(np.diff(enhance_contrast(v, k, rounded=False)) >= 0)


class TestFileIO:
    def test_frame_round_trip(self, tmp_path):
        f = random_frame(np.random.default_rng(0))
        write_frame_csv(f, tmp_path / "f.csv")
        g = read_frame_csv(tmp_path / "f.csv")
        assert f.equals(g)

    def test_reflector_without_range_survives(self, tmp_path):
        s = LidarSpec(n_azimuths=8)
        r, i = np.zeros((16, 8)), np.zeros((16, 8))
        i[3, 4] = 200
        write_frame_csv(LidarFrame(s, r, i), tmp_path / "f.csv")
        assert read_frame_csv(tmp_path / "f.csv", s).intensity[3, 4] == 200

    @pytest.mark.parametrize("body, line", [
        ("plane,azimuth,range_m,intensity\n0,0,1.0\n", 2),
        ("plane,azimuth,range_m,intensity\n0,0,1.0,5\n99,0,1.0,5\n", 3),
        ("plane,azimuth,range_m,intensity\n0,0,x,5\n", 2),
        ("p,a,r,i\n", 1),
    ])
    def test_parse_errors_name_line(self, tmp_path, body, line):
        (tmp_path / "bad.csv").write_text(body)
        with pytest.raises(ParseError, match=f"line {line}"):
            read_frame_csv(tmp_path / "bad.csv")

    def test_pcd_one_return(self, tmp_path):
        s = LidarSpec()
        r = np.zeros((16, 900))
        r[8, 0] = 4.0
        n = write_pcd(LidarFrame(s, r, np.zeros_like(r)), tmp_path / "a.pcd")
        data = read_pcd(tmp_path / "a.pcd")
        assert n == 1 and data.shape == (1, 4)
        assert data[0, :3] == pytest.approx(polar_to_cartesian(s.plane_angles[8], 0, 4.0), abs=1e-6)

    def test_pgm_sample_count(self, tmp_path):
        cells = np.zeros((1000, 1000))
        cells[10, 20] = 1
        write_pgm(cells * 255, tmp_path / "m.pgm")
        text = (tmp_path / "m.pgm").read_text().split()
        assert text[0] == "P2" and len(text) - 4 == 1000 * 1000
        assert read_pgm(tmp_path / "m.pgm")[10, 20] == 255

    def test_pgm_clamps(self, tmp_path):
        write_pgm(np.array([[-3.0, 300.0]]), tmp_path / "m.pgm")
        assert read_pgm(tmp_path / "m.pgm").tolist() == [[0, 255]]

    def test_pgm_bad_count(self, tmp_path):
        (tmp_path / "m.pgm").write_text("P2\n2 2\n255\n1 2 3\n")
        with pytest.raises(ParseError):
            read_pgm(tmp_path / "m.pgm")

    def test_grid_csv_lossless(self, tmp_path):
        cells = np.random.default_rng(1).random((5, 7))
        write_grid_csv(cells, tmp_path / "g.csv")
        assert np.array_equal(read_grid_csv(tmp_path / "g.csv"), cells)

    def test_ppm_round_trip(self, tmp_path):
        rgb = np.random.default_rng(2).integers(0, 256, (4, 5, 3))
        write_ppm(rgb, tmp_path / "a.ppm")
        assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
