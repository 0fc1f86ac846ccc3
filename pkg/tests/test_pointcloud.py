import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import raster

from crownlabel.chm import fill_chm_gaps, rasterize_chm
from crownlabel.errors import InputError
from crownlabel.pointcloud import (
    Classification, PointCloud, build_dtm, classify_ground_fallback, normalize_heights, parse_point_cloud,
    read_point_cloud, write_point_cloud,
)
from crownlabel.raster import Geotransform, Raster

HEADER = "x,y,z,return_number,classification,channel\n"
G, V, U = Classification.GROUND, Classification.VEGETATION, Classification.UNCLASSIFIED


def cloud(x, y, z, cls=None, ret=None, ch=None):
    return PointCloud.from_arrays(x, y, z, ret, cls, ch)


# --- parsing -------------------------------------------------------------------


def test_parse_single_row():
    pc = parse_point_cloud(HEADER + "10.5,20.25,3,1,Ground,2\n")
    assert len(pc) == 1
    assert pc.bounds == (10.5, 20.25, 10.5, 20.25)
    assert pc.classification[0] == G and pc.channel[0] == 2


def test_parse_tokens_case_insensitive_and_column_order():
    text = "channel,classification,z,y,x,return_number\n3,VEGETATION,1,2,3,2\n1,noise,0,0,0,1\n"
    pc = parse_point_cloud(text)
    assert list(pc.classification) == [V, Classification.NOISE]
    assert list(pc.x) == [3.0, 0.0] and list(pc.return_number) == [2, 1]


def test_parse_errors():
    with pytest.raises(InputError, match="empty point cloud"):
        parse_point_cloud(HEADER)
    with pytest.raises(InputError, match="empty point cloud"):
        parse_point_cloud("")
    with pytest.raises(InputError, match="missing columns: channel"):
        parse_point_cloud("x,y,z,return_number,classification\n1,2,3,1,ground\n")
    with pytest.raises(InputError, match="line 3: non-numeric"):
        parse_point_cloud(HEADER + "1,2,3,1,ground,1\n1,abc,3,1,ground,1\n")
    with pytest.raises(InputError, match="unknown classification"):
        parse_point_cloud(HEADER + "1,2,3,1,shrub,1\n")
    with pytest.raises(InputError, match="finite"):
        parse_point_cloud(HEADER + "1,nan,3,1,ground,1\n")


def test_parse_1000_rows_bounds_match_scan():
    rng = np.random.default_rng(5)
    rows = rng.uniform(-500, 500, size=(1000, 3))
    buf = io.StringIO()
    buf.write(HEADER)
    for x, y, z in rows:
        buf.write(f"{float(x)!r},{float(y)!r},{float(z)!r},1,vegetation,1\n")
    pc = parse_point_cloud(buf.getvalue())
    mins = [min(r[0] for r in rows), min(r[1] for r in rows)]
    maxs = [max(r[0] for r in rows), max(r[1] for r in rows)]
    assert pc.bounds == (mins[0], mins[1], maxs[0], maxs[1])


def test_write_read_round_trip(tmp_path):
    pc = cloud([1.0, 2.5], [3.0, 4.125], [0.5, 9.0], [G, U], [1, 2], [3, 1])
    write_point_cloud(pc, tmp_path / "p.csv")
    back = read_point_cloud(tmp_path / "p.csv")
    for name in ("x", "y", "z", "return_number", "classification", "channel"):
        np.testing.assert_array_equal(getattr(back, name), getattr(pc, name))


def test_read_missing_file(tmp_path):
    with pytest.raises(InputError, match="nope.csv"):
        read_point_cloud(tmp_path / "nope.csv")


# --- ground fallback -----------------------------------------------------------


def test_fallback_flat_cloud_all_ground():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(0, 20, size=(2, 300))
    pc = classify_ground_fallback(cloud(x, y, np.zeros(300)), 1.0, 0.2)
    assert (pc.classification == G).all()


def test_fallback_leaves_classified_points():
    rng = np.random.default_rng(1)
    x, y, z = rng.uniform(0, 20, size=(3, 200))
    cls = rng.choice([int(G), int(V), int(Classification.BUILDING)], size=200)
    pc = cloud(x, y, z, cls)
    out = classify_ground_fallback(pc, 1.0, 0.5)
    np.testing.assert_array_equal(out.classification, pc.classification)


def test_fallback_two_level_cloud_exhaustive():
    rng = np.random.default_rng(2)
    # every 2 m cell gets both low and high points
    cx, cy = np.meshgrid(np.arange(10) * 2.0 + 1.0, np.arange(10) * 2.0 + 1.0)
    cx, cy = cx.ravel(), cy.ravel()
    x = np.concatenate([cx + rng.uniform(-0.9, 0.9, 100), cx + rng.uniform(-0.9, 0.9, 100)])
    y = np.concatenate([cy + rng.uniform(-0.9, 0.9, 100), cy + rng.uniform(-0.9, 0.9, 100)])
    z = np.concatenate([np.zeros(100), np.full(100, 10.0)])
    # an extra low point at (0, 0) pins the grid origin to the 2 m lattice
    x, y, z = np.append(x, 0.0), np.append(y, 0.0), np.append(z, 0.0)
    out = classify_ground_fallback(cloud(x, y, z), 2.0, 0.5)
    for i in range(201):
        assert (out.classification[i] == G) == (z[i] == 0.0)
    np.testing.assert_array_equal(out.z, z)
    np.testing.assert_array_equal(out.x, x)


# --- DTM and normalization -------------------------------------------------------


def test_dtm_constant():
    rng = np.random.default_rng(3)
    x, y = rng.uniform(0, 10, size=(2, 500))
    dtm = build_dtm(cloud(x, y, np.full(500, 3.0), np.full(500, int(G))), 0.5)
    np.testing.assert_allclose(dtm.band(), 3.0)
    assert dtm.valid().all()


def test_dtm_single_ground_point_fills_everything():
    x = np.array([0.0, 10.0, 5.2])
    y = np.array([0.0, 8.0, 4.1])
    pc = cloud(x, y, np.array([20.0, 30.0, 1.75]), [int(V), int(V), int(G)])
    dtm = build_dtm(pc, 0.5)
    np.testing.assert_array_equal(dtm.band(), 1.75)


def test_dtm_without_ground_rejected():
    with pytest.raises(InputError, match="no ground"):
        build_dtm(cloud([0.0, 1.0], [0.0, 1.0], [1.0, 2.0], [int(V), int(U)]))


def test_dtm_tilted_plane_within_slope_bound():
    rng = np.random.default_rng(4)
    n = 20000
    x, y = rng.uniform(0, 30, size=(2, n))
    a, b = 0.3, -0.2
    z = 5.0 + a * x + b * y
    cell = 0.5
    dtm = build_dtm(cloud(x, y, z, np.full(n, int(G))), cell)
    r, c = np.mgrid[:dtm.height, :dtm.width]
    cx, cy = dtm.geotransform.cell_center(r, c)
    plane = 5.0 + a * cx + b * cy
    slope = np.hypot(a, b)
    assert np.abs(dtm.band() - plane).max() <= 0.5 * cell * slope * np.sqrt(2) + 1e-9
    assert dtm.valid().all()


def test_normalize_examples():
    dtm = raster(np.full((4, 4), 2.0), cell=1.0, origin=(0.0, 4.0))
    pc = cloud([0.5, 1.5], [3.5, 2.5], [12.0, 1.0])
    out = normalize_heights(pc, dtm)
    assert list(out.z) == [10.0, 0.0]


def test_normalize_outside_dtm_rejected():
    dtm = raster(np.zeros((2, 2)), cell=1.0, origin=(0.0, 2.0))
    with pytest.raises(InputError, match="outside"):
        normalize_heights(cloud([5.0], [1.0], [3.0]), dtm)


def test_normalize_matches_per_point_lookup():
    rng = np.random.default_rng(6)
    gt = Geotransform(100.0, 250.0, 0.5)
    terrain = rng.uniform(0, 3, size=(60, 80))
    dtm = Raster(terrain, gt)
    n = 2000
    x = rng.uniform(100.0, 100.0 + 80 * 0.5 - 1e-6, n)
    y = rng.uniform(250.0 - 60 * 0.5 + 1e-6, 250.0, n)
    z = rng.uniform(-1, 25, n)
    out = normalize_heights(cloud(x, y, z), dtm)
    for i in range(n):
        col = int((x[i] - 100.0) // 0.5)
        row = int((250.0 - y[i]) // 0.5)
        assert out.z[i] == max(z[i] - terrain[row, col], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0, 40)), min_size=1, max_size=40))
def test_normalize_idempotent_on_zero_dtm(points):
    x, y, z = (np.array(v) for v in zip(*points))
    pc = cloud(x, y, z)
    dtm = Raster(np.zeros((120, 120)), Geotransform(-5.0, 55.0, 0.5))
    once = normalize_heights(pc, dtm)
    twice = normalize_heights(once, dtm)
    np.testing.assert_array_equal(once.z, z)
    np.testing.assert_array_equal(twice.z, once.z)


# --- CHM -------------------------------------------------------------------------


def test_chm_single_first_return():
    pc = cloud([0.1, 3.9], [0.1, 3.9], [7.0, 0.0])
    chm = rasterize_chm(pc, 0.5, {1, 2})
    assert chm.geotransform.cell_size == 0.5
    r, c = chm.geotransform.cell_of(0.1, 0.1)
    assert chm.band()[r, c] == 7.0


def test_chm_second_returns_only_is_nodata():
    pc = cloud([0.1, 0.2, 3.9], [0.1, 0.2, 3.9], [7.0, 5.0, 0.0], ret=[2, 3, 1])
    chm = rasterize_chm(pc)
    r, c = chm.geotransform.cell_of(0.1, 0.1)
    assert not chm.valid()[r, c]


def test_chm_empty_channels_rejected():
    with pytest.raises(InputError):
        rasterize_chm(cloud([0.0], [0.0], [1.0]), 0.5, [])


def test_chm_dense_cloud_matches_per_cell_max():
    rng = np.random.default_rng(7)
    n = 5000
    x = rng.uniform(10, 30, n)
    y = rng.uniform(-10, 5, n)
    z = rng.uniform(0, 30, n)
    ret = rng.integers(1, 4, n)
    ch = rng.integers(1, 4, n)
    pc = cloud(x, y, z, ret=ret, ch=ch)
    chm = rasterize_chm(pc, 0.5, (1, 2))
    gt = chm.geotransform
    ref: dict[tuple[int, int], float] = {}
    for i in range(n):
        if ret[i] == 1 and ch[i] in (1, 2):
            key = (int((gt.origin_y - y[i]) // 0.5), int((x[i] - gt.origin_x) // 0.5))
            ref[key] = max(ref.get(key, -1.0), z[i])
    band = chm.band()
    for r in range(chm.height):
        for c in range(chm.width):
            if (r, c) in ref:
                assert band[r, c] == ref[(r, c)]
            else:
                assert band[r, c] == chm.nodata


def test_chm_permutation_invariant():
    rng = np.random.default_rng(8)
    n = 800
    x, y, z = rng.uniform(0, 10, (3, n))
    ch = rng.integers(1, 4, n)
    perm = rng.permutation(n)
    a = rasterize_chm(cloud(x, y, z, ch=ch))
    b = rasterize_chm(cloud(x[perm], y[perm], z[perm], ch=ch[perm]))
    assert a.values.tobytes() == b.values.tobytes()


def test_fill_no_gaps_unchanged():
    r = raster(np.arange(12.0).reshape(3, 4))
    assert fill_chm_gaps(r).values.tobytes() == r.values.tobytes()


def test_fill_isolated_gap():
    v = np.full((5, 5), 4.0)
    v[2, 2] = -9999.0
    assert fill_chm_gaps(raster(v)).band()[2, 2] == 4.0


def test_fill_checkerboard_matches_rule_replay():
    rng = np.random.default_rng(9)
    v = rng.uniform(0, 20, size=(9, 11))
    hole = (np.add.outer(np.arange(9), np.arange(11)) % 2) == 1
    hole[4, 4:8] = True  # a short run so some cells see fewer than 5 neighbors
    v[hole] = -9999.0
    out = fill_chm_gaps(raster(v)).band()
    for r in range(9):
        for c in range(11):
            if not hole[r, c]:
                assert out[r, c] == v[r, c]
                continue
            nbs = [v[rr, cc] for rr in range(r - 1, r + 2) for cc in range(c - 1, c + 2)
                   if (rr, cc) != (r, c) and 0 <= rr < 9 and 0 <= cc < 11 and not hole[rr, cc]]
            expected = float(np.median(nbs)) if len(nbs) >= 5 else 0.0
            assert out[r, c] == pytest.approx(expected, abs=1e-12)
    assert (out >= 0).all()
