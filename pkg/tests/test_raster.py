"""Raster round-trips, format guards, block aggregation, and the
container file."""

import numpy as np
import pytest

from foresight.container import load_container, save_container
from foresight.errors import DataError, DimensionError, UsageError
from foresight.raster import NODATA, Raster, block_aggregate, read_raster, write_raster


def test_round_trip_preserves_values_and_metadata(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((7, 5)).astype(np.float32)
    vals[2, 3] = np.nan
    r = Raster(values=vals, spacing=20.0, role="height", units="m")
    p = tmp_path / "h.r32"
    write_raster(p, r)
    back = read_raster(p)
    assert back.spacing == 20.0
    assert back.role == "height"
    assert back.units == "m"
    np.testing.assert_array_equal(np.isnan(back.values), np.isnan(vals))
    np.testing.assert_array_equal(back.values[np.isfinite(vals)],
                                  vals[np.isfinite(vals)])


def test_write_is_byte_deterministic(tmp_path):
    vals = np.arange(12, dtype=np.float32).reshape(3, 4)
    r = Raster(values=vals, spacing=20.0, role="dem", units="m")
    a, b = tmp_path / "a.r32", tmp_path / "b.r32"
    write_raster(a, r)
    write_raster(b, r)
    assert a.read_bytes() == b.read_bytes()


def test_header_is_ascii_text(tmp_path):
    p = tmp_path / "x.r32"
    write_raster(p, Raster(np.zeros((2, 2)), 20.0, "mask", ""))
    head = p.read_bytes()[:200].split(b"end\n")[0].decode("ascii")
    assert head.splitlines()[0] == "R32RASTER 1"
    assert "width=2" in head and "height=2" in head
    assert "nodata=-9999.0" in head


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.r32"
    p.write_bytes(b"NOTARASTER\n")
    with pytest.raises(DataError):
        read_raster(p)


def test_truncated_payload_rejected(tmp_path):
    p = tmp_path / "t.r32"
    write_raster(p, Raster(np.zeros((4, 4)), 20.0, "height", "m"))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(DataError):
        read_raster(p)


def test_sentinel_collision_rejected(tmp_path):
    r = Raster(np.full((2, 2), NODATA), 20.0, "height", "m")
    with pytest.raises(DataError):
        write_raster(tmp_path / "c.r32", r)


def test_raster_must_be_2d():
    with pytest.raises(DimensionError):
        Raster(np.zeros(5), 20.0, "height")


def test_block_aggregate_hand_values():
    r = Raster(np.array([[1.0, 2.0], [3.0, 4.0]]), 20.0, "height", "m")
    out = block_aggregate(r, 2)
    assert out.values.shape == (1, 1)
    assert out.values[0, 0] == 2.5
    assert out.spacing == 40.0


def test_block_aggregate_nodata_rule():
    vals = np.array([[1.0, np.nan], [3.0, np.nan]])
    out = block_aggregate(Raster(vals, 20.0, "height", "m"), 2)
    assert out.values[0, 0] == 2.0


def test_block_aggregate_all_nodata_block():
    vals = np.full((2, 2), np.nan)
    out = block_aggregate(Raster(vals, 20.0, "height", "m"), 2)
    assert np.isnan(out.values[0, 0])


def test_block_aggregate_constant_raster():
    out = block_aggregate(Raster(np.full((9, 9), 3.25), 20.0, "height", "m"), 3)
    assert out.values.shape == (3, 3)
    np.testing.assert_array_equal(out.values, np.full((3, 3), 3.25))
    assert out.spacing == 60.0


def test_block_aggregate_drops_partial_blocks():
    vals = np.arange(25, dtype=float).reshape(5, 5)
    out = block_aggregate(Raster(vals, 20.0, "height", "m"), 2)
    assert out.values.shape == (2, 2)
    assert out.values[0, 0] == np.mean([0, 1, 5, 6])


def test_block_aggregate_preserves_mean_without_nodata():
    rng = np.random.default_rng(1)
    vals = rng.random((12, 12))
    out = block_aggregate(Raster(vals, 20.0, "height", "m"), 3)
    assert abs(out.values.mean() - vals.mean()) < 1e-10


def test_block_aggregate_rejects_bad_factor():
    r = Raster(np.zeros((4, 4)), 20.0, "height", "m")
    with pytest.raises(UsageError):
        block_aggregate(r, 1)
    with pytest.raises(UsageError):
        block_aggregate(r, 2.5)


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {
        "enc.w": rng.standard_normal((3, 4)).astype(np.float32),
        "enc.b": rng.standard_normal(4),
        "codes": np.array([1, 2, 3], dtype=np.uint8),
    }
    meta = {"arch": "vanilla", "seed": 7, "bands": ["sigma_hh", "dem"]}
    p = tmp_path / "m.fsc"
    save_container(p, meta, arrays)
    meta2, arrays2 = load_container(p)
    assert meta2 == meta
    assert list(arrays2) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(arrays2[k], arrays[k])
        assert arrays2[k].dtype == arrays[k].dtype


def test_container_bytes_deterministic(tmp_path):
    arrays = {"w": np.ones((2, 2), dtype=np.float32)}
    a, b = tmp_path / "a.fsc", tmp_path / "b.fsc"
    save_container(a, {"k": 1}, arrays)
    save_container(b, {"k": 1}, arrays)
    assert a.read_bytes() == b.read_bytes()


def test_container_rejects_corruption(tmp_path):
    p = tmp_path / "m.fsc"
    save_container(p, {}, {"w": np.ones(4)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(DataError):
        load_container(p)
    p.write_bytes(b"WRONG\n" + raw)
    with pytest.raises(DataError):
        load_container(p)
