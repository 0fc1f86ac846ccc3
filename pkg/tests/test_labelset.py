import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import box_mask
from oracles import dense

from crownlabel.errors import InputError
from crownlabel.labelset import (
    AnnotationSet, GridInfo, InstanceMask, Tile, TileSpec, annotations_from_dict, annotations_to_dict,
    assign_to_tiles, dumps_annotations, intersection_area, make_tiles, read_annotations, rle_decode, rle_encode,
    upscale_instances, write_annotations,
)
from crownlabel.raster import Geotransform

masks = arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16)))


# --- RLE -------------------------------------------------------------------------


def test_rle_examples():
    assert rle_encode(np.zeros((2, 2), bool)) == [4]
    assert rle_encode(np.ones((2, 2), bool)) == [0, 4]
    assert rle_encode(np.array([[0, 1], [1, 0]], bool)) == [1, 2, 1]


def test_rle_decode_sum_mismatch():
    with pytest.raises(InputError, match="sum"):
        rle_decode([1, 2], 2, 2)


def test_rle_random_16x16_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = rng.random((16, 16)) < rng.random()
        runs = rle_encode(m)
        assert sum(runs) == 256
        np.testing.assert_array_equal(rle_decode(runs, 16, 16), m)


@settings(max_examples=200, deadline=None)
@given(masks)
def test_rle_round_trip_property(m):
    h, w = m.shape
    np.testing.assert_array_equal(rle_decode(rle_encode(m), w, h), m)


# --- InstanceMask ----------------------------------------------------------------


def test_instance_invariants_enforced():
    with pytest.raises(InputError, match="RLE"):
        InstanceMask(1, (0, 0, 2, 2), [3], (1.0, 1.0))
    with pytest.raises(InputError, match="centroid"):
        InstanceMask(1, (0, 0, 2, 2), [0, 4], (5.0, 1.0))
    with pytest.raises(InputError, match="score"):
        InstanceMask(1, (0, 0, 2, 2), [0, 4], (1.0, 1.0), score=1.5)
    with pytest.raises(InputError, match="empty"):
        InstanceMask.from_array(np.zeros((3, 3)), 1)


@settings(max_examples=100, deadline=None)
@given(masks, st.integers(-50, 50), st.integers(-50, 50))
def test_from_array_tight_bbox_and_centroid(m, ox, oy):
    if not m.any():
        return
    inst = InstanceMask.from_array(m, 1, (ox, oy))
    rr, cc = np.nonzero(m)
    assert inst.bbox == (ox + cc.min(), oy + rr.min(), cc.max() - cc.min() + 1, rr.max() - rr.min() + 1)
    assert inst.centroid[0] == pytest.approx(ox + cc.mean() + 0.5)
    assert inst.centroid[1] == pytest.approx(oy + rr.mean() + 0.5)
    assert inst.area == m.sum()
    x, y, w, h = inst.bbox
    assert x <= inst.centroid[0] <= x + w and y <= inst.centroid[1] <= y + h


@settings(max_examples=100, deadline=None)
@given(masks, masks, st.integers(-8, 8), st.integers(-8, 8))
def test_intersection_matches_dense(a, b, dx, dy):
    if not a.any() or not b.any():
        return
    ia = InstanceMask.from_array(a, 1, (10, 10))
    ib = InstanceMask.from_array(b, 2, (10 + dx, 10 + dy))
    shape = (40, 40)
    assert intersection_area(ia, ib) == np.count_nonzero(dense(ia, shape) & dense(ib, shape))


@settings(max_examples=100, deadline=None)
@given(masks, st.integers(-20, 20), st.integers(-20, 20), st.integers(1, 20), st.integers(1, 20))
def test_clip_matches_dense(m, x0, y0, w, h):
    if not m.any():
        return
    inst = InstanceMask.from_array(m, 1, (0, 0))
    out = inst.clip(x0, y0, x0 + w, y0 + h)
    ref = dense(inst.translate(30, 30), (80, 80))[30 + y0:30 + y0 + h, 30 + x0:30 + x0 + w]
    if out is None:
        assert not ref.any()
    else:
        np.testing.assert_array_equal(dense(out.translate(30, 30), (80, 80))[30 + y0:30 + y0 + h,
                                                                              30 + x0:30 + x0 + w], ref)
        assert out.area == ref.sum()


# --- tiles -----------------------------------------------------------------------


def test_make_tiles_2048():
    tiles = make_tiles((2048, 2048))
    assert len(tiles) == 9
    assert sorted({t.origin[0] for t in tiles}) == [0, 512, 1024]
    assert all(t.size == 1024 and t.stride == 512 for t in tiles)


def test_make_tiles_edges():
    assert [t.origin for t in make_tiles((1024, 1024))] == [(0, 0)]
    with pytest.raises(InputError):
        make_tiles((1023, 1024))
    with pytest.raises(InputError, match="twice"):
        make_tiles((2048, 2048), 1024, 400)
    # 1500 wide: a regular tile at 0 and one clamped flush with the edge
    xs = sorted({t.origin[0] for t in make_tiles((1500, 1024))})
    assert xs == [0, 476]


@settings(max_examples=50, deadline=None)
@given(st.integers(1024, 4000), st.integers(1024, 4000))
def test_tiles_cover_extent(w, h):
    tiles = make_tiles((w, h))
    covered = np.zeros((h, w), dtype=bool)
    for t in tiles:
        x, y = t.origin
        assert 0 <= x and x + 1024 <= w and 0 <= y and y + 1024 <= h
        covered[y:y + 1024, x:x + 1024] = True
    assert covered.all()


def test_center_window():
    spec = TileSpec((512, 1024))
    assert spec.center_window() == (768, 1280, 1280, 1792)
    assert spec.in_center(768, 1280) and not spec.in_center(1280, 1300)


def test_assign_centroid_at_tile_center():
    tiles = make_tiles((2048, 2048))
    inst = box_mask(1020, 1020, 10, 10, 1)  # centroid (1025, 1025)
    aset = assign_to_tiles([inst], tiles, 0.05)
    hits = [(t.spec.origin, i) for t in aset.tiles for i in t.instances]
    assert len(hits) == 1
    origin, local = hits[0]
    assert origin == (512, 512)
    assert local.bbox == (508, 508, 10, 10)
    assert local.centroid == (513.0, 513.0)


def test_assign_corner_dropped_and_counted():
    aset = assign_to_tiles([box_mask(0, 0, 4, 4, 1), box_mask(2040, 2040, 8, 8, 2)],
                           make_tiles((2048, 2048)), 0.05)
    assert len(aset) == 0 and aset.dropped == 2


def test_assign_clamped_corner_tile_takes_what_it_can():
    # 1500 px: the clamped tile at 476 has center window [732, 1244)
    tiles = make_tiles((1500, 1500))
    aset = assign_to_tiles([box_mask(1200, 1200, 6, 6, 1)], tiles, 0.05)
    (tile,) = [t for t in aset.tiles if t.instances]
    assert tile.spec.origin == (476, 476)


def test_assign_clips_large_crown_to_tile():
    tiles = [TileSpec((0, 0))]
    inst = InstanceMask.from_array(np.ones((700, 200), bool), 1, (400, 100))  # centroid (500, 450)
    aset = assign_to_tiles([inst], tiles, 0.05)
    (local,) = aset.tiles[0].instances
    assert local.bbox == (400, 100, 200, 700)
    inst2 = InstanceMask.from_array(np.ones((100, 1200), bool), 2, (-100, 400))  # centroid (500, 450)
    (local2,) = assign_to_tiles([inst2], tiles, 0.05).tiles[0].instances
    assert local2.bbox == (0, 400, 1024, 100)


def test_assign_random_instances_exactly_once():
    rng = np.random.default_rng(1)
    tiles = make_tiles((2048, 2048))
    insts = []
    for k in range(300):
        x, y = rng.integers(200, 1800, size=2)
        insts.append(box_mask(int(x), int(y), int(rng.integers(1, 40)), int(rng.integers(1, 40)), k + 1))
    aset = assign_to_tiles(insts, tiles, 0.05)
    where = {}
    for t in aset.tiles:
        for i in t.instances:
            where.setdefault(i.id, []).append(t.spec.origin)
    for inst in insts:
        cx, cy = inst.centroid
        interior = 256 <= cx < 1792 and 256 <= cy < 1792
        if interior:
            assert len(where[inst.id]) == 1
            ox, oy = where[inst.id][0]
            assert ox + 256 <= cx < ox + 768 and oy + 256 <= cy < oy + 768
        else:
            assert inst.id not in where
    assert aset.dropped == sum(1 for i in insts if i.id not in where)


# --- upscaling -------------------------------------------------------------------

CHM_GT = Geotransform(385000.0, 6672000.0, 0.5)
ORTHO_GT = Geotransform(385000.0, 6672000.0, 0.05)


def test_upscale_single_cell():
    (up,) = upscale_instances([box_mask(3, 2, 1, 1, 1)], CHM_GT, ORTHO_GT)
    assert up.bbox == (30, 20, 10, 10) and up.area == 100
    assert up.centroid == (35.0, 25.0)


def test_upscale_identity():
    inst = InstanceMask.from_array(np.array([[1, 0], [1, 1]], bool), 4, (7, 9), score=0.5)
    (up,) = upscale_instances([inst], CHM_GT, CHM_GT)
    assert up == inst


def test_upscale_random_blobs_area_ratio():
    rng = np.random.default_rng(2)
    for k in range(30):
        m = rng.random((int(rng.integers(1, 9)), int(rng.integers(1, 9)))) < 0.5
        if not m.any():
            continue
        inst = InstanceMask.from_array(m, k + 1, tuple(int(v) for v in rng.integers(0, 50, 2)))
        (up,) = upscale_instances([inst], CHM_GT, ORTHO_GT)
        assert up.area == 100 * inst.area
        # each fine pixel lies in a coarse mask cell
        big = dense(up, (600, 600))
        small = dense(inst, (60, 60))
        np.testing.assert_array_equal(big, np.kron(small, np.ones((10, 10), bool)))


def test_upscale_clips_to_extent():
    (up,) = upscale_instances([box_mask(0, 0, 4, 4, 1)], CHM_GT, ORTHO_GT, (25, 25))
    assert up.bbox == (0, 0, 25, 25)
    assert upscale_instances([box_mask(10, 10, 2, 2, 1)], CHM_GT, ORTHO_GT, (25, 25)) == []


# --- JSON ------------------------------------------------------------------------


def _doc_round_trip(aset):
    return annotations_from_dict(json.loads(dumps_annotations(aset)))


def test_empty_set_round_trip(tmp_path):
    aset = AnnotationSet(0.05)
    write_annotations(aset, tmp_path / "a.json")
    back = read_annotations(tmp_path / "a.json")
    assert annotations_to_dict(back) == annotations_to_dict(aset)


def test_one_instance_round_trip(tmp_path):
    grid = GridInfo(ORTHO_GT, 2048, 2048)
    inst = InstanceMask.from_array(np.array([[1, 1, 0], [0, 1, 1]], bool), 3, (5, 6), score=0.75,
                                   fallback=True, height=12.5)
    aset = AnnotationSet(0.05, [Tile(TileSpec((512, 0)), [inst])], grid=grid, config={"k": 1}, dropped=2)
    write_annotations(aset, tmp_path / "a.json")
    back = read_annotations(tmp_path / "a.json")
    assert back.tiles[0].instances[0] == inst
    assert back.grid == grid and back.dropped == 2 and back.config == {"k": 1}
    assert dumps_annotations(back) == (tmp_path / "a.json").read_text()


instance_docs = st.builds(
    lambda m, x, y, score: (m, x, y, score),
    arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6))),
    st.integers(-5, 1100), st.integers(-5, 1100),
    st.one_of(st.none(), st.floats(0, 1)),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(instance_docs, max_size=8), st.sampled_from([0.05, 0.5, 1.0]))
def test_fuzzed_documents_are_a_fixed_point(items, cell):
    insts = [InstanceMask.from_array(m, k + 1, (x, y), score=s) for k, (m, x, y, s) in enumerate(items) if m.any()]
    aset = AnnotationSet(cell, [Tile(TileSpec((0, 0)), insts[:4]), Tile(TileSpec((512, 0)), insts[4:])])
    text = dumps_annotations(aset)
    again = dumps_annotations(annotations_from_dict(json.loads(text)))
    assert again == text


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.pop("cell_size_m"), "cell_size_m"),
    (lambda d: d["tiles"][0].update(origin=[0]), "origin"),
    (lambda d: d["tiles"][0]["instances"][0].update(bbox=[0, 0, 2]), "bbox"),
    (lambda d: d["tiles"][0]["instances"][0].update(rle=[1, -1]), "rle"),
    (lambda d: d["tiles"][0]["instances"][0].update(score="high"), "score"),
    (lambda d: d["tiles"][0]["instances"][0].pop("centroid"), "centroid"),
    (lambda d: d["tiles"][0]["instances"].append(dict(d["tiles"][0]["instances"][0])), "unique"),
])
def test_schema_violations(mutate, msg):
    aset = AnnotationSet(0.05, [Tile(TileSpec((0, 0)), [box_mask(1, 1, 2, 2, 1)])])
    doc = annotations_to_dict(aset)
    mutate(doc)
    with pytest.raises(InputError, match=msg):
        annotations_from_dict(doc)


def test_read_missing_and_bad_json(tmp_path):
    with pytest.raises(InputError, match="not found"):
        read_annotations(tmp_path / "x.json")
    (tmp_path / "x.json").write_text("[")
    with pytest.raises(InputError, match="invalid JSON"):
        read_annotations(tmp_path / "x.json")
