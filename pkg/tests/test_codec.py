import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccfnet.codec import (
    DISC_INDEX,
    NUM_OBJECTS,
    OBJECT_IDS,
    VERTEBRA_INDEX,
    AnnotationError,
    GridSpec,
    ObjectAnnotation,
    SpineAnnotation,
    decode_arrays,
    decode_predictions,
    encode_targets,
    encode_targets_batch,
    nearest_grid,
    to_highres,
)

GRID = GridSpec()  # 128×128, S=16, A=0.5, σ=16, τ=0.6


def annotation_at(x, y, diseased=False):
    xy = np.tile([x, y], (NUM_OBJECTS, 1))
    return SpineAnnotation.from_arrays(xy, [diseased] * NUM_OBJECTS)


def test_object_order_and_classes():
    assert OBJECT_IDS[0] == "T12-L1" and OBJECT_IDS[-1] == "L5-S1"
    assert len(DISC_INDEX) == 6 and len(VERTEBRA_INDEX) == 5
    assert list(VERTEBRA_INDEX) == [1, 3, 5, 7, 9]


class TestAnchors:
    def test_t_of_three(self):
        assert to_highres(3, GRID) == 40.0

    def test_t_of_zero_is_negative(self):
        assert to_highres(0, GRID) == -8.0

    def test_nearest_grid_tie_goes_low(self):
        assert nearest_grid(48.0, GRID.map_w, GRID) == 3

    def test_align_is_configurable(self):
        assert to_highres(0, GridSpec(align=-0.5)) == 8.0


class TestEncode:
    @pytest.fixture
    def maps(self):
        return encode_targets(annotation_at(40.0, 40.0, diseased=True), GRID)

    def test_heatmap_values(self, maps):
        H = maps.heatmap[0]  # stored [row j][col i]
        assert H[3, 3] == 1.0
        assert H[3, 4] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert H[4, 4] == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_fine_values(self, maps):
        assert maps.fine_x[0, 3, 3] == 0.0
        assert maps.fine_x[0, 3, 4] == 1.0  # (56 - 40) / 16
        assert maps.fine_y[0, 4, 3] == 1.0

    def test_category_constant(self, maps):
        assert np.all(maps.category == 1.0)
        healthy = encode_targets(annotation_at(40.0, 40.0), GRID)
        assert np.all(healthy.category == 0.0)

    def test_omega_is_cross(self, maps):
        cells = {(int(i), int(j)) for j, i in zip(*np.nonzero(maps.omega[0]))}
        assert cells == {(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)}

    def test_x_pairs_with_columns(self):
        ann = annotation_at(100.0, 20.0)
        j, i = np.unravel_index(encode_targets(ann, GRID).heatmap[0].argmax(), (8, 8))
        assert (i, j) == (nearest_grid(100.0, 8, GRID), nearest_grid(20.0, 8, GRID))

    def test_omega_never_empty_with_tiny_sigma(self):
        maps = encode_targets(annotation_at(44.0, 70.0), GridSpec(sigma=1.0))
        assert maps.omega.reshape(NUM_OBJECTS, -1).sum(axis=1).min() == 1

    @pytest.mark.parametrize("x,y", [(-0.1, 5.0), (5.0, 128.0), (128.0, 5.0)])
    def test_out_of_bounds(self, x, y):
        with pytest.raises(AnnotationError):
            encode_targets(annotation_at(x, y), GRID)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 127, (3, NUM_OBJECTS, 2))
        lab = rng.random((3, NUM_OBJECTS)) < 0.5
        batch = encode_targets_batch(xy, lab, GRID)
        for n in range(3):
            one = encode_targets(SpineAnnotation.from_arrays(xy[n], lab[n]), GRID)
            np.testing.assert_array_equal(batch.heatmap[n], one.heatmap)
            np.testing.assert_array_equal(batch.omega[n], one.omega)


class TestDecode:
    def test_round_trip_example(self):
        maps = encode_targets(annotation_at(43.0, 77.0), GRID)
        dets = decode_predictions(maps.heatmap, maps.fine_x, maps.fine_y, maps.category, GRID)
        assert [d.id for d in dets] == list(OBJECT_IDS)
        assert abs(dets[0].x - 43.0) <= 1e-4 and abs(dets[0].y - 77.0) <= 1e-4

    def test_hand_inversion(self):
        heat = np.zeros((NUM_OBJECTS, 8, 8))
        heat[:, 2, 4] = 1.0
        fx = np.ones_like(heat)
        fy = np.zeros_like(heat)
        xy, _ = decode_arrays(heat, fx, fy, np.zeros_like(heat), GRID)
        assert xy[0, 0] == 40.0  # t(4) - 1.0 * 16

    def test_uniform_heatmap_picks_origin(self):
        heat = np.full((NUM_OBJECTS, 8, 8), 0.3)
        cat = np.random.default_rng(0).random((NUM_OBJECTS, 8, 8))
        dets = decode_predictions(heat, np.zeros_like(heat), np.zeros_like(heat), cat, GRID)
        assert (dets[0].x, dets[0].y) == (-8.0, -8.0)
        assert dets[5].prob == cat[5, 0, 0]

    def test_shape_check(self):
        bad = np.zeros((10, 8, 8))
        with pytest.raises(ValueError):
            decode_predictions(bad, bad, bad, bad, GRID)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

coord = st.floats(0.0, 127.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(x=coord, y=coord, sick=st.booleans())
def test_round_trip_property(x, y, sick):
    maps = encode_targets(annotation_at(x, y, sick), GRID)
    xy, prob = decode_arrays(maps.heatmap, maps.fine_x, maps.fine_y, maps.category, GRID)
    np.testing.assert_allclose(xy[0], [x, y], atol=1e-4)
    assert prob[0] == float(sick)


@settings(max_examples=200, deadline=None)
@given(x=coord, y=coord)
def test_argmax_is_nearest_anchor(x, y):
    maps = encode_targets(annotation_at(x, y), GRID)
    j, i = np.unravel_index(maps.heatmap[0].argmax(), (8, 8))
    di = np.abs(to_highres(np.arange(8), GRID) - x)
    dj = np.abs(to_highres(np.arange(8), GRID) - y)
    assert di[i] == di.min() and dj[j] == dj.min()
    last = to_highres(7, GRID)  # anchors cover [-8, 104]; beyond that the offset grows
    if x <= last:
        assert abs(maps.fine_x[0, j, i]) <= 0.5 + GRID.align
    if y <= last:
        assert abs(maps.fine_y[0, j, i]) <= 0.5 + GRID.align


@settings(max_examples=100, deadline=None)
@given(x=st.floats(0.0, 88.0), y=st.floats(0.0, 88.0))  # both points inside the anchor span
def test_translation_by_one_stride(x, y):
    a = encode_targets(annotation_at(x, y), GRID)
    b = encode_targets(annotation_at(x + 16.0, y + 16.0), GRID)
    ja, ia = np.unravel_index(a.heatmap[0].argmax(), (8, 8))
    jb, ib = np.unravel_index(b.heatmap[0].argmax(), (8, 8))
    assert (ib, jb) == (ia + 1, ja + 1)
    assert b.fine_x[0, jb, ib] == pytest.approx(a.fine_x[0, ja, ia], abs=1e-12)
    assert b.fine_y[0, jb, ib] == pytest.approx(a.fine_y[0, ja, ia], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(x=coord, y=coord)
def test_heat_range_and_omega(x, y):
    maps = encode_targets(annotation_at(x, y), GRID)
    assert np.all(maps.heatmap > 0) and np.all(maps.heatmap <= 1)
    assert maps.omega[0].any()


def test_annotation_rejects_wrong_order():
    objs = tuple(ObjectAnnotation(oid, 1.0, 1.0, False) for oid in reversed(OBJECT_IDS))
    with pytest.raises(AnnotationError):
        SpineAnnotation(objs)


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(tau=0.0)
    with pytest.raises(ValueError):
        GridSpec(image_h=8)
    with pytest.raises(ValueError):
        GridSpec(sigma=-1.0)
