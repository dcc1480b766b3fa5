import math

import numpy as np
import pytest

from anisofeat.encoding import EncodingConfig, make_encoder
from anisofeat.similarity import (
    GridSpec,
    SimilarityMap,
    compute_map,
    read_pgm,
    write_csv,
    write_pgm,
)


def _map(values):
    values = np.asarray(values, dtype=float)
    return SimilarityMap(GridSpec(values.shape), values)


def test_reference_is_floor_centre():
    assert GridSpec((14, 14)).reference == (7, 7)
    assert GridSpec((5, 4, 3)).reference == (2, 2, 1)
    with pytest.raises(ValueError):
        GridSpec((4, 4), reference=(4, 0))


def test_none_map_is_zero():
    m = compute_map(make_encoder("none", EncodingConfig(16, 2)), GridSpec((6, 6)))
    assert not m.values.any()


def test_rank_mismatch():
    with pytest.raises(ValueError):
        compute_map(make_encoder("ifpe", EncodingConfig(16, 3)), GridSpec((6, 6)))


@pytest.mark.parametrize("family", ["spe", "ifpe", "afpe", "lfpe", "learnable"])
def test_self_similarity_and_symmetry(family):
    grid = GridSpec((9, 9))
    enc = make_encoder(family, EncodingConfig(64, 2), grid_shape=grid.shape)
    m = compute_map(enc, grid)
    e_ref = enc(np.array(grid.reference, float))
    assert m.values[grid.reference] == e_ref @ e_ref
    if enc.stationary:
        for d in [(1, 0), (0, 3), (2, -1), (4, 4)]:
            assert math.isclose(m.at_offset(d), m.at_offset((-d[0], -d[1])), abs_tol=1e-9)


def test_ifpe_map_radial_in_expectation():
    half = 8192
    m = compute_map(make_encoder("ifpe", EncodingConfig(2 * half, 2), scale=0.1), GridSpec((14, 14)))
    for k in range(1, 6):
        assert abs(m.at_offset((k, 0)) - m.at_offset((0, k))) / half <= 4 / math.sqrt(half)


def test_afpe_map_elongated_along_rows():
    m = compute_map(make_encoder("afpe", EncodingConfig(16384, 2), scales=[0.05, 0.1125]), GridSpec((14, 14)))
    for k in range(1, 6):
        assert m.at_offset((k, 0)) > m.at_offset((0, k))


def test_normalization():
    n = _map([[1.0, 3.0], [2.0, 5.0]]).normalized()
    assert n.normalization == "minmax"
    assert n.values.tolist() == [[0.0, 0.5], [0.25, 1.0]]
    assert not _map(np.full((3, 3), 7.0)).normalized().values.any()


def test_pgm_golden_bytes(tmp_path):
    path = tmp_path / "m.pgm"
    write_pgm(_map([[0.0, 1.0], [1.0, 0.0]]).normalized(), path)
    assert path.read_bytes() == b"P5\n2 2\n255\n\x00\xff\xff\x00"


def test_pgm_constant_map(tmp_path):
    path = tmp_path / "c.pgm"
    write_pgm(_map(np.ones((2, 3))).normalized(), path)
    assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes(6)


def test_pgm_rounds_half_up(tmp_path):
    path = tmp_path / "r.pgm"
    write_pgm(_map([[0.0, 0.5, 1.0]]).normalized(), path)
    assert path.read_bytes()[-3:] == bytes([0, 128, 255])


def test_pgm_rejects_raw_map(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(_map([[0.0, 2.0]]), tmp_path / "x.pgm")


def test_pgm_grid_size_roundtrip(tmp_path):
    m = compute_map(make_encoder("ifpe", EncodingConfig(64, 2)), GridSpec((14, 14))).normalized()
    (path,) = write_pgm(m, tmp_path / "s.pgm")
    img = read_pgm(path)
    assert img.shape == (14, 14)
    assert np.array_equal(img, np.floor(255 * m.values + 0.5).astype(np.uint8))


def test_pgm_3d_slices(tmp_path):
    v = np.arange(8, dtype=float).reshape(2, 2, 2)
    paths = write_pgm(_map(v).normalized(), tmp_path / "vol.pgm")
    assert [p.name for p in paths] == ["vol_000.pgm", "vol_001.pgm"]
    assert read_pgm(paths[1]).tolist() == [[146, 182], [219, 255]]


def test_csv_golden(tmp_path):
    path = write_csv(_map([[0.1, 1.0], [2.0, -3.0]]), tmp_path / "m.csv")
    assert path.read_text() == (
        "i,j,value\n0,0,0.10000000000000001\n0,1,1\n1,0,2\n1,1,-3\n"
    )


def test_csv_3d_header_and_precision(tmp_path):
    v = np.array([[[1 / 3]]])
    text = write_csv(_map(v), tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "i,j,k,value"
    assert float(text[1].split(",")[-1]) == 1 / 3


def test_csv_1d(tmp_path):
    text = write_csv(_map([5.0, 6.0]), tmp_path / "m.csv").read_text()
    assert text == "i,value\n0,5\n1,6\n"
