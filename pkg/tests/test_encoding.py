import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from anisofeat.encoding import (
    DEFAULT_SCALE,
    DEFAULT_TEMPERATURE,
    EncoderSpec,
    EncodingConfig,
    FourierBasis,
    LearnableTable,
    afpe_scale_from_anisotropy,
    fourier_encode,
    gaussian_kernel,
    learnable_table_lookup,
    lfpe_init,
    make_encoder,
    none_encode,
    sample_basis_anisotropic,
    sample_basis_isotropic,
    spe_encode,
)
from anisofeat.mlp import Adam
from anisofeat.similarity import radial_mismatch

coords = st.floats(-50, 50, allow_nan=False)


def test_defaults():
    assert DEFAULT_TEMPERATURE == 1e4
    assert DEFAULT_SCALE == 1.0


# -- sinusoidal


def test_spe_zero_position_pattern():
    out = spe_encode(np.zeros(3), EncodingConfig(12, 3), temperature=7.0)
    assert out.tolist() == [0.0, 1.0] * 6


def test_spe_one_dimensional_example():
    out = spe_encode([1.0], EncodingConfig(4, 1))
    expected = [math.sin(1), math.cos(1), math.sin(1e-2), math.cos(1e-2)]
    assert np.allclose(out, expected, rtol=0, atol=1e-15)


def test_spe_blocks_follow_axis_order():
    cfg2 = EncodingConfig(8, 2)
    cfg1 = EncodingConfig(4, 1)
    out = spe_encode([2.0, -3.0], cfg2)
    assert np.array_equal(out[:4], spe_encode([2.0], cfg1))
    assert np.array_equal(out[4:], spe_encode([-3.0], cfg1))


@pytest.mark.parametrize("dims,m", [(6, 2), (10, 3), (7, 1)])
def test_spe_rejects_indivisible_width(dims, m):
    with pytest.raises(ValueError):
        spe_encode(np.zeros(m), EncodingConfig(dims, m))


def test_spe_rejects_bad_input():
    cfg = EncodingConfig(4, 1)
    with pytest.raises(ValueError):
        spe_encode([np.nan], cfg)
    with pytest.raises(ValueError):
        spe_encode([1.0], cfg, temperature=0.0)


@settings(max_examples=50, deadline=None)
@given(p=arrays(np.float64, 3, elements=coords), q=arrays(np.float64, 3, elements=coords))
def test_spe_separable(p, q):
    cfg = EncodingConfig(24, 3)
    ep, eq = spe_encode(p, cfg), spe_encode(q, cfg)
    blocks = sum(ep[i * 8 : (i + 1) * 8] @ eq[i * 8 : (i + 1) * 8] for i in range(3))
    assert abs(ep @ eq - blocks) <= 1e-12 * 24


def test_spe_diagonal_is_not_radial():
    enc = make_encoder("spe", EncodingConfig(64, 2))
    assert np.max(radial_mismatch(enc)) > 1e-3


# -- Fourier bases


def test_isotropic_basis_deterministic():
    cfg = EncodingConfig(64, 2, seed=5)
    assert np.array_equal(sample_basis_isotropic(1.0, cfg).matrix, sample_basis_isotropic(1.0, cfg).matrix)


def test_isotropic_basis_moments():
    b = sample_basis_isotropic(0.5, EncodingConfig(2_000_000, 1, seed=1)).matrix
    assert b.size == 1_000_000
    assert abs(b.mean()) < 3 * 0.5 / 1000
    assert abs(b.std() / 0.5 - 1) < 0.003


@pytest.mark.parametrize("s", [0.0, -1.0, np.inf])
def test_isotropic_rejects_bad_scale(s):
    with pytest.raises(ValueError):
        sample_basis_isotropic(s, EncodingConfig(8, 2))


def test_anisotropic_rows_scaled():
    cfg = EncodingConfig(400_000, 3, seed=2)
    b = sample_basis_anisotropic([0.785, 0.111, 0.111], cfg).matrix
    assert np.allclose(b.std(axis=1), [0.785, 0.111, 0.111], rtol=0.01)


def test_anisotropic_rejects_length_mismatch():
    with pytest.raises(ValueError):
        sample_basis_anisotropic([0.497, 1.125], EncodingConfig(8, 3))
    with pytest.raises(ValueError):
        sample_basis_anisotropic([0.497, 0.0], EncodingConfig(8, 2))


@settings(max_examples=25, deadline=None)
@given(c=st.floats(0.01, 10.0), m=st.integers(1, 4), seed=st.integers(0, 2**32))
def test_equal_scales_match_isotropic_bitwise(c, m, seed):
    cfg = EncodingConfig(16, m, seed)
    assert np.array_equal(sample_basis_isotropic(c, cfg).matrix, sample_basis_anisotropic([c] * m, cfg).matrix)


def test_lfpe_init():
    b = lfpe_init(EncodingConfig(2_000_000, 1, seed=3))
    assert b.trainable
    assert abs(b.matrix.std() - 1) < 0.003
    small = EncodingConfig(32, 2)
    w = lfpe_init(small)
    assert np.array_equal(w.matrix, sample_basis_isotropic(1.0, small).matrix)
    p = np.array([[0.3, -1.2], [4.0, 2.0]])
    assert np.array_equal(make_encoder("lfpe", small)(p), fourier_encode(p, w))


def test_fourier_zero_position():
    basis = sample_basis_isotropic(1.0, EncodingConfig(10, 2))
    out = fourier_encode([0.0, 0.0], basis)
    assert out.tolist() == [0.0] * 5 + [1.0] * 5


def test_fourier_quarter_period_example():
    basis = FourierBasis(np.array([[0.25], [0.0]]), "isotropic", np.array([1.0, 1.0]))
    p, q = fourier_encode([1.0, 0.0], basis), fourier_encode([0.0, 0.0], basis)
    assert abs(p @ q) < 1e-15


def test_fourier_rejects_shape_mismatch():
    basis = sample_basis_isotropic(1.0, EncodingConfig(10, 2))
    with pytest.raises(ValueError):
        fourier_encode([1.0, 2.0, 3.0], basis)


@settings(max_examples=50, deadline=None)
@given(p=arrays(np.float64, 3, elements=coords), s=st.floats(0.01, 5.0))
def test_fourier_norm(p, s):
    cfg = EncodingConfig(64, 3)
    e = fourier_encode(p, sample_basis_isotropic(s, cfg))
    assert abs(e @ e - 32) <= 1e-9 * 64


@settings(max_examples=50, deadline=None)
@given(p=arrays(np.float64, 2, elements=coords), q=arrays(np.float64, 2, elements=coords))
def test_fourier_dot_is_cosine_sum(p, q):
    basis = sample_basis_anisotropic([0.497, 1.125], EncodingConfig(32, 2))
    dot = fourier_encode(p, basis) @ fourier_encode(q, basis)
    assert abs(dot - np.cos(2 * np.pi * (p - q) @ basis.matrix).sum()) < 1e-9


def test_fourier_stationary():
    basis = sample_basis_anisotropic([0.497, 1.125], EncodingConfig(128, 2, seed=8))
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, q, shift = rng.uniform(-10, 10, (3, 2))
        a = fourier_encode(p, basis) @ fourier_encode(q, basis)
        b = fourier_encode(p + shift, basis) @ fourier_encode(q + shift, basis)
        assert abs(a - b) < 1e-9


@pytest.mark.parametrize("scales", [[0.5, 0.5], [1.0, 1.0], [0.497, 1.125]])
def test_kernel_limit(scales):
    half = 8192
    basis = sample_basis_anisotropic(scales, EncodingConfig(2 * half, 2))
    deltas = np.array([[i, j] for i in range(-5, 6) for j in range(-5, 6) if i * i + j * j <= 25], float)
    mc = fourier_encode(deltas, basis) @ fourier_encode([0.0, 0.0], basis) / half
    assert np.max(np.abs(mc - gaussian_kernel(deltas, scales))) <= 4 / math.sqrt(half)


def test_kernel_formula():
    assert gaussian_kernel([0.0, 0.0], [1.0, 2.0]) == 1.0
    assert math.isclose(gaussian_kernel([1.0, 0.0], [0.5, 3.0]), math.exp(-2 * math.pi**2 * 0.25))


# -- helpers and baselines


@pytest.mark.parametrize(
    "aniso,expected", [((4, 1, 1), (2.0, 0.5, 0.5)), ((1, 1, 1), (0.5, 0.5, 0.5)), ((8, 1, 1), (4.0, 0.5, 0.5))]
)
def test_afpe_scale_rule(aniso, expected):
    assert afpe_scale_from_anisotropy(aniso).tolist() == list(expected)


def test_afpe_scale_rejects_nonpositive():
    with pytest.raises(ValueError):
        afpe_scale_from_anisotropy([3, 0, 1])


def test_afpe_default_uses_anisotropy():
    cfg = EncodingConfig(16, 3)
    enc = make_encoder("afpe", cfg, anisotropy=[4, 1, 1])
    assert enc.basis.scales.tolist() == [2.0, 0.5, 0.5]


def test_none_encoding():
    cfg = EncodingConfig(16, 2)
    z = none_encode([[3.0, 4.0], [1.0, 1.0]], cfg)
    assert z.shape == (2, 16) and not z.any()
    other = fourier_encode([1.0, 2.0], sample_basis_isotropic(1.0, cfg))
    assert z[0] @ other == 0.0 and np.linalg.norm(z[0]) == 0.0


def test_table_lookup():
    tbl = LearnableTable.init((14, 14), 32, seed=1)
    assert tbl.size == 196
    assert np.array_equal(learnable_table_lookup(tbl, 0), learnable_table_lookup(tbl, 0))
    with pytest.raises(IndexError):
        learnable_table_lookup(tbl, 196)
    with pytest.raises(IndexError):
        learnable_table_lookup(tbl, -1)


def test_table_sparse_update():
    tbl = LearnableTable.init((4, 4), 8)
    before = tbl.entries.copy()
    grad = np.zeros_like(tbl.entries)
    grad[3] = 1.0
    Adam(1e-2).step({"table": tbl.entries}, {"table": grad})
    changed = np.where(np.any(tbl.entries != before, axis=1))[0]
    assert changed.tolist() == [3]


def test_encoder_spec_build():
    enc = EncoderSpec("AFPE", dims=16, scales=[0.1, 0.2, 0.3]).build(3)
    assert enc.family == "afpe" and enc.dims == 16
    with pytest.raises(ValueError):
        EncoderSpec("rope")
