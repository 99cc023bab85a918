import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eyolo.codec import (
    GridSpec,
    TargetGrid,
    cell_of,
    decode_grid,
    decode_tensor,
    depth_to_channels,
    encode_targets,
    logits_from_targets,
    map_raw_to_cell,
    split_to_depth,
)
from eyolo.geometry import Box3D
from eyolo.tensor import DimensionError, Tensor

S26 = GridSpec()
S8 = GridSpec(S=8)


def random_box_set(rng, spec, n):
    """n boxes whose centres fall in n distinct cells."""
    flat = rng.choice(spec.cell_count, size=n, replace=False)
    out = []
    for f in flat:
        cell = np.array(np.unravel_index(f, (spec.S,) * 3))
        centre = (cell + rng.uniform(0, 1, 3)) / spec.S
        out.append(Box3D.labelled(int(rng.integers(spec.K)), *centre, *rng.uniform(0.01, 0.99, 3)))
    return out


class TestGridSpec:
    def test_defaults(self):
        assert S26.channels_per_cell == 10
        assert S26.cell_count == 17576
        assert S26.grid_shape == (26, 26, 26, 10)

    @pytest.mark.parametrize("kw", [{"B": 2}, {"K": 3}, {"S": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GridSpec(**kw)


class TestCellOf:
    def test_middle(self):
        assert cell_of((0.5, 0.5, 0.5), S26) == (13, 13, 13)

    def test_lower_corner(self):
        assert cell_of((0.0, 0.0, 0.0), S26) == (0, 0, 0)

    def test_upper_corner_clamped(self):
        assert cell_of((1.0, 1.0, 1.0), S26) == (25, 25, 25)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="z"):
            cell_of((0.5, 0.5, 1.2), S26)

    @given(st.tuples(*[st.floats(0, 1)] * 3))
    def test_centre_inside_cell(self, c):
        idx = cell_of(c, S26)
        for v, i in zip(c, idx):
            assert i / 26 <= v <= (i + 1) / 26


class TestEncode:
    def test_empty(self):
        grid = encode_targets([], S26)
        assert not grid.obj_mask.any()

    def test_single(self):
        grid = encode_targets([Box3D.labelled(0, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2)], S26)
        assert grid.occupied() == [(13, 13, 13)]
        np.testing.assert_array_equal(grid.boxes[13, 13, 13], [0.5, 0.5, 0.5, 0.2, 0.2, 0.2])
        assert grid.confidence[13, 13, 13] == 1.0
        assert grid.confidence.sum() == 1.0

    @pytest.mark.parametrize("order", [0, 1])
    def test_collision_keeps_larger(self, order):
        big = Box3D.labelled(0, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2)
        small = Box3D.labelled(1, 0.51, 0.51, 0.51, 0.1, 0.1, 0.1)
        grid = encode_targets([big, small] if order == 0 else [small, big], S26)
        assert grid.collisions == 1
        assert grid.occupied() == [(13, 13, 13)]
        np.testing.assert_array_equal(grid.boxes[13, 13, 13], big.geometry)
        np.testing.assert_array_equal(grid.classes[13, 13, 13], [1, 0])

    def test_as_array_layout(self):
        box = Box3D.labelled(1, 0.1, 0.6, 0.9, 0.3, 0.2, 0.1)
        arr = encode_targets([box], S8).as_array()
        i, j, k = cell_of((0.1, 0.6, 0.9), S8)
        np.testing.assert_array_equal(arr[i, j, k], [1, 0, 0.1, 0.6, 0.9, 0.3, 0.2, 0.1, 0, 1])


class TestMapRaw:
    def test_zeros_at_origin(self):
        p = map_raw_to_cell(np.zeros(10), (0, 0, 0), S26)
        assert p.x == p.y == p.z == pytest.approx(0.5 / 26, abs=1e-15)
        assert p.w == p.h == p.d == 0.5
        assert p.c == 0.5

    def test_saturation(self):
        raw = np.zeros(10)
        raw[2] = 1e3
        assert map_raw_to_cell(raw, (4, 0, 0), S26).x == pytest.approx(5 / 26, abs=1e-15)

    @given(arrays(np.float64, 10, elements=st.floats(-50, 50)), st.tuples(*[st.integers(0, 25)] * 3))
    def test_bounded(self, raw, cell):
        p = map_raw_to_cell(raw, cell, S26)
        for v, i in zip((p.x, p.y, p.z), cell):
            assert i / 26 <= v <= (i + 1) / 26
        assert all(0 <= v <= 1 for v in (p.c, p.u, p.w, p.h, p.d, *p.p))

    def test_tensor_decode_agrees(self, rng):
        raw = rng.normal(size=(1, 8, 8, 8, 10)) * 3
        dec = decode_tensor(Tensor(raw), S8).data[0]
        for cell in [(0, 0, 0), (7, 2, 5), (3, 6, 1)]:
            p = map_raw_to_cell(raw[0][cell], cell, S8)
            np.testing.assert_allclose(dec[cell], [p.c, p.u, p.x, p.y, p.z, p.w, p.h, p.d, *p.p], rtol=0, atol=1e-15)


class TestDecode:
    def test_all_negative_is_empty(self):
        raw = np.zeros(S26.grid_shape)
        raw[..., 0] = -20
        assert decode_grid(raw, S26) == []

    def test_single_activation(self):
        raw = np.zeros(S26.grid_shape)
        raw[..., 0] = -20
        raw[3, 4, 5, 0] = 20
        out = decode_grid(raw, S26, 0.5)
        assert len(out) == 1
        assert cell_of((out[0].cx, out[0].cy, out[0].cz), S26) == (3, 4, 5)

    def test_count_matches_floor(self, rng):
        raw = rng.normal(size=S8.grid_shape)
        out = decode_grid(raw, S8, 0.7)
        assert len(out) == int((1 / (1 + np.exp(-raw[..., 0])) >= 0.7).sum())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            decode_grid(np.zeros((8, 8, 8, 9)), S8)

    @pytest.mark.parametrize("seed", range(10))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        boxes = random_box_set(rng, S26, int(rng.integers(1, 30)))
        target = encode_targets(boxes, S26)
        assert target.collisions == 0
        out = decode_grid(logits_from_targets(target), S26)
        assert len(out) == len(boxes)
        by_cell = {cell_of((b.cx, b.cy, b.cz), S26): b for b in out}
        for b in boxes:
            got = by_cell[cell_of((b.cx, b.cy, b.cz), S26)]
            np.testing.assert_allclose(got.geometry, b.geometry, rtol=0, atol=1e-9)
            assert got.class_id == b.class_id
            assert got.confidence == 1.0


class TestSplit:
    def test_one_hot(self):
        x = np.zeros((1, 80, 8, 8))
        x[0, 37, 5, 2] = 1.0
        grid = split_to_depth(Tensor(x), S8).data
        assert grid.shape == (1, 8, 8, 8, 10)
        nz = np.argwhere(grid)
        assert nz.tolist() == [[0, 2, 5, 3, 7]]

    def test_inverse_bit_exact(self, rng):
        x = rng.normal(size=(2, 80, 8, 8))
        back = depth_to_channels(split_to_depth(Tensor(x), S8), S8).data
        assert np.array_equal(back, x)

    def test_is_permutation(self, rng):
        x = rng.normal(size=(1, 80, 8, 8))
        grid = split_to_depth(Tensor(x), S8).data
        assert np.array_equal(np.sort(grid, axis=None), np.sort(x, axis=None))

    def test_full_size_cell_count(self):
        grid = split_to_depth(Tensor(np.zeros((1, 260, 26, 26))), S26)
        assert grid.shape[1:4] == (26, 26, 26)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            split_to_depth(Tensor(np.zeros((1, 79, 8, 8))), S8)

    def test_gradient_flows_back(self, rng):
        x = Tensor(rng.normal(size=(1, 80, 8, 8)), requires_grad=True)
        weights = rng.normal(size=(1, 8, 8, 8, 10))
        (split_to_depth(x, S8) * weights).sum().backward()
        assert np.array_equal(x.grad, depth_to_channels(Tensor(weights), S8).data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    boxes = random_box_set(rng, S8, int(rng.integers(0, 20)))
    out = decode_grid(logits_from_targets(encode_targets(boxes, S8)), S8)
    got = sorted(o.geometry for o in out)
    want = sorted(b.geometry for b in boxes)
    np.testing.assert_allclose(np.reshape(got, (-1, 6)), np.reshape(want, (-1, 6)), rtol=0, atol=1e-9)


def test_target_grid_empty_shapes():
    t = TargetGrid.empty(S8)
    assert t.obj_mask.shape == (8, 8, 8)
    assert t.boxes.shape == (8, 8, 8, 6)
    assert t.classes.shape == (8, 8, 8, 2)
