import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthosep.volumes import (
    PROSTATE,
    TUMOUR,
    ChannelVolume,
    GridSpec,
    MultiChannelVolume,
    RegionMask,
    VolumeFormatError,
    bounding_box_crop,
    flatten_masked,
    intersect_valid_mask,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    scatter_to_volume,
)


def _write_pair(tmp_path, name, header, raw: bytes):
    (tmp_path / f"{name}.json").write_text(json.dumps(header))
    (tmp_path / f"{name}.raw").write_bytes(raw)
    return tmp_path / name


def _header(dims, dtype="f32"):
    return {"dims": dims, "spacing_mm": [1, 1, 1], "origin_mm": [0, 0, 0], "dtype": dtype, "order": "x-fastest"}


def test_load_direct_decode(tmp_path):
    p = _write_pair(tmp_path, "v", _header([2, 1, 1]), np.array([1.0, 2.0], "<f4").tobytes())
    vol = load_volume(p)
    assert vol.name == "v"
    np.testing.assert_array_equal(vol.data, [1.0, 2.0])


def test_load_length_mismatch(tmp_path):
    p = _write_pair(tmp_path, "v", _header([2, 2, 1]), np.zeros(3, "<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="length mismatch"):
        load_volume(p)


@pytest.mark.parametrize("header", [_header([2, 1, 1], dtype="f16"), _header([0, 1, 1])])
def test_load_rejects_bad_headers(tmp_path, header):
    p = _write_pair(tmp_path, "v", header, b"")
    with pytest.raises(VolumeFormatError):
        load_volume(p)


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope")


def test_linear_index_is_x_fastest(tmp_path):
    grid = GridSpec((3, 2, 2))
    assert grid.linear_index(1, 1, 1) == 1 * 6 + 1 * 3 + 1
    x, y, z = grid.coords(np.arange(grid.size))
    np.testing.assert_array_equal(grid.linear_index(x, y, z), np.arange(grid.size))
    vol = ChannelVolume("v", grid, np.arange(grid.size))
    assert vol.as_array()[1, 1, 2] == grid.linear_index(2, 1, 1)


def test_save_zero_volume_raw_bytes(tmp_path):
    vol = ChannelVolume("z", GridSpec((4, 4, 4)), np.zeros(64))
    save_volume(vol, tmp_path / "z")
    raw = (tmp_path / "z.raw").read_bytes()
    assert len(raw) == 256 and not any(raw)
    header = json.loads((tmp_path / "z.json").read_text())
    assert header == _header([4, 4, 4]) | {"spacing_mm": [1.0, 1.0, 1.0], "origin_mm": [0.0, 0.0, 0.0]}


def test_save_rejects_nan(tmp_path):
    vol = ChannelVolume("n", GridSpec((2, 1, 1)), [1.0, np.nan])
    with pytest.raises(ValueError, match="unsanitized"):
        save_volume(vol, tmp_path / "n")


def test_round_trip_bitwise_at_f32(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.normal(size=512)
    vol = ChannelVolume("r", GridSpec((8, 8, 8), (0.5, 1.0, 2.5), (1.0, -2.0, 3.0)), data)
    save_volume(vol, tmp_path / "r")
    back = load_volume(tmp_path / "r.json")
    assert back.grid == vol.grid
    np.testing.assert_array_equal(back.data, data.astype(np.float32).astype(np.float64))
    # a second round trip is exact
    save_volume(back, tmp_path / "r2")
    assert (tmp_path / "r2.raw").read_bytes() == (tmp_path / "r.raw").read_bytes()


def test_mask_round_trip(tmp_path):
    grid = GridSpec((3, 3, 2))
    rng = np.random.default_rng(0)
    mask = RegionMask(grid, rng.integers(0, 4, grid.size), rng.random(grid.size) > 0.3)
    save_mask(mask, tmp_path / "regions")
    assert (tmp_path / "regions_valid.raw").exists()
    back = load_mask(tmp_path / "regions")
    np.testing.assert_array_equal(back.labels, mask.labels)
    np.testing.assert_array_equal(back.valid, mask.valid)


def test_channel_invariants():
    grid = GridSpec((2, 1, 1))
    with pytest.raises(VolumeFormatError):
        ChannelVolume("", grid, [1, 2])
    a = ChannelVolume("a", grid, [1, 2])
    with pytest.raises(VolumeFormatError):
        MultiChannelVolume(grid, (a, a))
    with pytest.raises(VolumeFormatError):
        MultiChannelVolume(grid, (ChannelVolume("b", GridSpec((1, 2, 1)), [1, 2]),))
    with pytest.raises(VolumeFormatError):
        RegionMask(grid, [0, 4], [True, True])


def _mcv(*rows):
    grid = GridSpec((len(rows[0]), 1, 1))
    return MultiChannelVolume.from_channels([ChannelVolume(f"c{i}", grid, r) for i, r in enumerate(rows)])


def test_intersect_valid_mask_examples():
    np.testing.assert_array_equal(intersect_valid_mask(_mcv([1, 0], [1, 1])), [True, False])
    assert intersect_valid_mask(_mcv([3, -1, 2])).all()
    with pytest.raises(VolumeFormatError):
        intersect_valid_mask(MultiChannelVolume(GridSpec((1, 1, 1)), ()))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_intersect_valid_mask_matches_and(seed):
    rng = np.random.default_rng(seed)
    chans = rng.integers(0, 2, size=(3, 64)).astype(float)
    expected = [all(chans[c, i] != 0 for c in range(3)) for i in range(64)]
    np.testing.assert_array_equal(intersect_valid_mask(_mcv(*chans)), expected)


def test_crop_single_voxel_and_identity():
    grid = GridSpec((4, 4, 4), (1.0, 2.0, 3.0), (10.0, 20.0, 30.0))
    mcv = MultiChannelVolume.from_channels([ChannelVolume("a", grid, np.arange(64))])
    valid = np.zeros(64, bool)
    valid[grid.linear_index(1, 1, 1)] = True
    cropped, m = bounding_box_crop(mcv, RegionMask(grid, np.zeros(64), valid))
    assert cropped.grid.dims == (1, 1, 1)
    assert cropped.grid.origin_mm == (11.0, 22.0, 33.0)
    assert cropped["a"].data[0] == grid.linear_index(1, 1, 1)
    same, _ = bounding_box_crop(mcv, RegionMask.all_valid(grid))
    assert same.grid == grid
    np.testing.assert_array_equal(same["a"].data, mcv["a"].data)
    with pytest.raises(VolumeFormatError):
        bounding_box_crop(mcv, RegionMask(grid, np.zeros(64), np.zeros(64, bool)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_crop_matches_brute_force_box_and_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec(tuple(rng.integers(1, 7, 3)))
    valid = rng.random(grid.size) < 0.1
    valid[rng.integers(grid.size)] = True
    data = rng.normal(size=grid.size)
    mcv = MultiChannelVolume.from_channels([ChannelVolume("a", grid, data)])
    mask = RegionMask(grid, rng.integers(0, 4, grid.size), valid)
    cropped, cmask = bounding_box_crop(mcv, mask)

    lo = [10**9] * 3
    hi = [-1] * 3
    for i in range(grid.size):
        if valid[i]:
            c = [int(v) for v in grid.coords(i)]
            lo = [min(a, b) for a, b in zip(lo, c)]
            hi = [max(a, b) for a, b in zip(hi, c)]
    assert cropped.grid.dims == tuple(h - l + 1 for l, h in zip(lo, hi))
    for i in range(cropped.grid.size):
        x, y, z = (int(v) for v in cropped.grid.coords(i))
        src = grid.linear_index(x + lo[0], y + lo[1], z + lo[2])
        assert cropped["a"].data[i] == data[src]
        assert cmask.labels[i] == mask.labels[src]
    again, amask = bounding_box_crop(cropped, cmask)
    assert again.grid == cropped.grid
    np.testing.assert_array_equal(again["a"].data, cropped["a"].data)
    np.testing.assert_array_equal(amask.valid, cmask.valid)


def test_flatten_examples():
    grid = GridSpec((4, 1, 1))
    mcv = MultiChannelVolume.from_channels(
        [ChannelVolume("T1", grid, [1, 2, 3, 4]), ChannelVolume("SUV", grid, [5, 6, 7, 8]),
         ChannelVolume("T2", grid, [9, 10, 11, 12])])
    mask = RegionMask(grid, [1, 1, 2, 3], [True, False, True, True])
    X, y = flatten_masked(mcv, mask, target="SUV")
    assert X.feature_names == ("T1", "T2")
    np.testing.assert_array_equal(X.values, [[1, 9], [3, 11], [4, 12]])
    np.testing.assert_array_equal(X.index_map, [0, 2, 3])
    np.testing.assert_array_equal(y, [5, 7, 8])
    Xt, none = flatten_masked(mcv, mask, include=lambda m: m.labels == TUMOUR)
    assert Xt.shape == (1, 3) and none is None
    with pytest.raises(ValueError, match="empty selection"):
        flatten_masked(mcv, mask, include=np.zeros(4, bool))


def test_flatten_counts_phantom_tumour():
    grid = GridSpec((5, 5, 5))
    labels = np.full(grid.size, PROSTATE)
    labels[:10] = TUMOUR
    mask = RegionMask(grid, labels, np.ones(grid.size, bool))
    mcv = MultiChannelVolume.from_channels([ChannelVolume("a", grid, np.ones(grid.size))])
    X, _ = flatten_masked(mcv, mask, include=lambda m: m.region("tumour"))
    assert X.shape[0] == 10


def test_scatter_examples():
    grid = GridSpec((2, 1, 1))
    np.testing.assert_array_equal(scatter_to_volume([5.0], [0], grid, 0.0).data, [5, 0])
    np.testing.assert_array_equal(scatter_to_volume([], [], grid, -1.0).data, [-1, -1])
    with pytest.raises(IndexError):
        scatter_to_volume([1.0], [2], grid)
    with pytest.raises(ValueError):
        scatter_to_volume([1.0, 2.0], [0], grid)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flatten_scatter_round_trip(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec(tuple(rng.integers(1, 6, 3)))
    chans = [ChannelVolume(n, grid, rng.normal(size=grid.size)) for n in ("a", "b")]
    mcv = MultiChannelVolume.from_channels(chans)
    valid = rng.random(grid.size) < 0.5
    valid[0] = True
    X, _ = flatten_masked(mcv, RegionMask(grid, np.zeros(grid.size), valid))
    for j, c in enumerate(chans):
        back = scatter_to_volume(X.values[:, j], X.index_map, grid, np.nan)
        np.testing.assert_array_equal(back.data[valid], c.data[valid])
        assert np.isnan(back.data[~valid]).all()
