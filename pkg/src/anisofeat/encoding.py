"""Positional encodings: sinusoidal, Fourier-feature (isotropic, anisotropic,
learnable), a learnable lookup table and the all-zero baseline.

Positions are ``(N, m)`` arrays (a single ``(m,)`` position is accepted and
gives a ``(D,)`` result).  All encoders are pure with respect to their
parameters, so they can be evaluated concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sampling import RngStream

DEFAULT_TEMPERATURE = 1e4
DEFAULT_SCALE = 1.0

FAMILIES = ("spe", "ifpe", "afpe", "lfpe", "learnable", "none")


@dataclass(frozen=True)
class EncodingConfig:
    dims: int
    spatial_dims: int
    seed: int = 42

    def __post_init__(self) -> None:
        if self.dims < 1 or self.spatial_dims < 1:
            raise ValueError("dims and spatial_dims must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def n_freqs(self) -> int:
        if self.dims % 2:
            raise ValueError(f"Fourier encodings need an even width, got D={self.dims}")
        return self.dims // 2


def as_positions(positions, m: int) -> tuple[np.ndarray, bool]:
    """Coerce to a finite ``(N, m)`` float array; the flag marks a single position."""
    p = np.asarray(positions, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != m:
        raise ValueError(f"expected positions with {m} coordinates, got shape {np.shape(positions)}")
    if not np.all(np.isfinite(p)):
        raise ValueError("positions must be finite")
    return p, single


def check_scales(scales, m: int | None = None) -> np.ndarray:
    s = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scale vector must be a non-empty 1-D sequence")
    if m is not None and s.size != m:
        raise ValueError(f"scale vector has {s.size} entries, expected {m}")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ValueError(f"scales must be finite and positive, got {s.tolist()}")
    return s


# -- sinusoidal ---------------------------------------------------------------


def spe_frequencies(block: int, temperature: float) -> np.ndarray:
    """Angular frequencies ``t**(-2k/block)`` for pair index ``k`` of one block."""
    k = np.arange(block // 2, dtype=np.float64)
    return temperature ** (-2.0 * k / block)


def spe_encode(positions, cfg: EncodingConfig, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Sinusoidal encoding, one ``D/m`` block per axis, concatenated in axis order.

    Inside a block even slots hold sines and odd slots cosines of the same
    frequency.
    """
    m, D = cfg.spatial_dims, cfg.dims
    if D % (2 * m):
        raise ValueError(f"sinusoidal encoding needs D divisible by 2m, got D={D}, m={m}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p, single = as_positions(positions, m)
    block = D // m
    omega = spe_frequencies(block, temperature)
    out = np.empty((p.shape[0], D))
    for i in range(m):
        arg = p[:, i, None] * omega
        out[:, i * block : (i + 1) * block : 2] = np.sin(arg)
        out[:, i * block + 1 : (i + 1) * block : 2] = np.cos(arg)
    return out[0] if single else out


# -- Fourier features ---------------------------------------------------------


@dataclass
class FourierBasis:
    """Frequency matrix of shape ``(m, D/2)``.

    ``origin`` is one of ``"isotropic"``, ``"anisotropic"`` or ``"trainable"``;
    ``scales`` holds the per-axis standard deviations used for sampling.
    """

    matrix: np.ndarray
    origin: str
    scales: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("basis matrix must be 2-D")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("basis matrix must be finite")
        if self.origin not in ("isotropic", "anisotropic", "trainable"):
            raise ValueError(f"unknown basis origin {self.origin!r}")

    @property
    def spatial_dims(self) -> int:
        return self.matrix.shape[0]

    @property
    def dims(self) -> int:
        return 2 * self.matrix.shape[1]

    @property
    def trainable(self) -> bool:
        return self.origin == "trainable"


def _standard_basis(cfg: EncodingConfig) -> np.ndarray:
    # row-major over (m, D/2); one stream per seed
    z = RngStream(cfg.seed).normals(cfg.spatial_dims * cfg.n_freqs)
    return z.reshape(cfg.spatial_dims, cfg.n_freqs)


def sample_basis_isotropic(scale: float, cfg: EncodingConfig) -> FourierBasis:
    """Every entry drawn from N(0, scale**2); ``scale`` is a standard deviation."""
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"scale must be positive, got {scale}")
    scale = float(scale)
    return FourierBasis(scale * _standard_basis(cfg), "isotropic", np.full(cfg.spatial_dims, scale))


def sample_basis_anisotropic(scales, cfg: EncodingConfig) -> FourierBasis:
    """Row ``i`` drawn with standard deviation ``scales[i]``.

    Uses the same draws as :func:`sample_basis_isotropic`, so equal scales give
    a bitwise identical matrix under a shared seed.
    """
    s = check_scales(scales, cfg.spatial_dims)
    return FourierBasis(s[:, None] * _standard_basis(cfg), "anisotropic", s)


def lfpe_init(cfg: EncodingConfig) -> FourierBasis:
    """Standard-normal trainable basis."""
    return FourierBasis(_standard_basis(cfg), "trainable", np.ones(cfg.spatial_dims))


def fourier_encode(positions, basis: FourierBasis) -> np.ndarray:
    """``[sin(2 pi p B) || cos(2 pi p B)]``; squared norm is always ``D/2``."""
    p, single = as_positions(positions, basis.spatial_dims)
    arg = (2.0 * math.pi) * (p @ basis.matrix)
    out = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    return out[0] if single else out


def afpe_scale_from_anisotropy(anisotropy) -> np.ndarray:
    """Default anisotropic scales: half the anisotropy factor per axis."""
    a = np.atleast_1d(np.asarray(anisotropy, dtype=np.float64))
    if a.size == 0 or not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError(f"anisotropy factors must be positive, got {a.tolist()}")
    return 0.5 * a


def gaussian_kernel(delta, scales) -> np.ndarray:
    """Limit of the normalised Fourier-feature dot product:
    ``exp(-2 pi^2 sum_i s_i^2 delta_i^2)``."""
    d = np.asarray(delta, dtype=np.float64)
    s = check_scales(scales, d.shape[-1])
    return np.exp(-2.0 * math.pi**2 * np.sum((s * d) ** 2, axis=-1))


# -- baselines ----------------------------------------------------------------


def none_encode(positions, cfg: EncodingConfig) -> np.ndarray:
    p, single = as_positions(positions, cfg.spatial_dims)
    out = np.zeros((p.shape[0], cfg.dims))
    return out[0] if single else out


@dataclass
class LearnableTable:
    """One free ``D``-vector per cell of a fixed grid, row-major indexed."""

    entries: np.ndarray
    grid_shape: tuple[int, ...]
    init_seed: int = 42

    @classmethod
    def init(cls, grid_shape, dims: int, seed: int = 42) -> LearnableTable:
        grid_shape = tuple(int(g) for g in grid_shape)
        if not grid_shape or any(g < 1 for g in grid_shape):
            raise ValueError(f"invalid grid shape {grid_shape}")
        P = int(np.prod(grid_shape))
        entries = RngStream(seed).normals(P * dims).reshape(P, dims)
        return cls(entries, grid_shape, seed)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dims(self) -> int:
        return self.entries.shape[1]

    @property
    def spatial_dims(self) -> int:
        return len(self.grid_shape)

    def flat_index(self, positions) -> np.ndarray:
        """Row indices of integer grid positions (raises when out of range)."""
        p, _ = as_positions(positions, self.spatial_dims)
        ip = np.rint(p).astype(np.int64)
        if np.any(ip != p):
            raise ValueError("learnable table positions must be integer grid indices")
        return np.ravel_multi_index(tuple(ip.T), self.grid_shape)

    def lookup(self, grid_index: int) -> np.ndarray:
        if not 0 <= grid_index < self.size:
            raise IndexError(f"grid index {grid_index} outside table of {self.size} rows")
        return self.entries[grid_index].copy()


def learnable_table_lookup(table: LearnableTable, grid_index: int) -> np.ndarray:
    return table.lookup(grid_index)


# -- encoder objects ----------------------------------------------------------


class Encoder:
    """Callable mapping ``(N, m)`` positions to ``(N, D)`` encodings."""

    family = "base"
    stationary = True

    def __init__(self, dims: int, spatial_dims: int) -> None:
        self.dims = dims
        self.spatial_dims = spatial_dims

    def __call__(self, positions) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(D={self.dims}, m={self.spatial_dims})"


class SinusoidalEncoder(Encoder):
    family = "spe"

    def __init__(self, cfg: EncodingConfig, temperature: float = DEFAULT_TEMPERATURE) -> None:
        if cfg.dims % (2 * cfg.spatial_dims):
            raise ValueError(f"sinusoidal encoding needs D divisible by 2m, got D={cfg.dims}, m={cfg.spatial_dims}")
        super().__init__(cfg.dims, cfg.spatial_dims)
        self.cfg = cfg
        self.temperature = temperature

    def __call__(self, positions) -> np.ndarray:
        return spe_encode(positions, self.cfg, self.temperature)


class FourierEncoder(Encoder):
    def __init__(self, basis: FourierBasis, family: str) -> None:
        super().__init__(basis.dims, basis.spatial_dims)
        self.basis = basis
        self.family = family

    def __call__(self, positions) -> np.ndarray:
        return fourier_encode(positions, self.basis)


class NoneEncoder(Encoder):
    family = "none"

    def __call__(self, positions) -> np.ndarray:
        p, single = as_positions(positions, self.spatial_dims)
        out = np.zeros((p.shape[0], self.dims))
        return out[0] if single else out


class TableEncoder(Encoder):
    family = "learnable"
    stationary = False

    def __init__(self, table: LearnableTable) -> None:
        super().__init__(table.dims, table.spatial_dims)
        self.table = table

    def __call__(self, positions) -> np.ndarray:
        single = np.ndim(positions) == 1
        out = self.table.entries[self.table.flat_index(positions)]
        return out[0] if single else out


def make_encoder(
    family: str,
    cfg: EncodingConfig,
    *,
    temperature: float = DEFAULT_TEMPERATURE,
    scale: float = DEFAULT_SCALE,
    scales=None,
    anisotropy=None,
    grid_shape=None,
) -> Encoder:
    """Build an encoder of the given family.

    For ``afpe`` explicit ``scales`` win; otherwise they are derived from
    ``anisotropy`` (default: isotropic, i.e. all ones).
    """
    family = family.lower()
    if family == "spe":
        return SinusoidalEncoder(cfg, temperature)
    if family == "ifpe":
        return FourierEncoder(sample_basis_isotropic(scale, cfg), "ifpe")
    if family == "afpe":
        if scales is None:
            aniso = np.ones(cfg.spatial_dims) if anisotropy is None else anisotropy
            scales = afpe_scale_from_anisotropy(aniso)
        return FourierEncoder(sample_basis_anisotropic(scales, cfg), "afpe")
    if family == "lfpe":
        return FourierEncoder(lfpe_init(cfg), "lfpe")
    if family == "learnable":
        if grid_shape is None:
            raise ValueError("learnable table needs a grid shape")
        return TableEncoder(LearnableTable.init(grid_shape, cfg.dims, cfg.seed))
    if family == "none":
        return NoneEncoder(cfg.dims, cfg.spatial_dims)
    raise ValueError(f"unknown encoder family {family!r}; expected one of {FAMILIES}")


@dataclass
class EncoderSpec:
    """Serialisable recipe for an encoder (what goes into experiment configs)."""

    family: str
    dims: int = 192
    temperature: float = DEFAULT_TEMPERATURE
    scale: float = DEFAULT_SCALE
    scales: list[float] | None = None
    seed: int = 42

    def __post_init__(self) -> None:
        self.family = self.family.lower()
        if self.family not in FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}; expected one of {FAMILIES}")

    def build(self, spatial_dims: int, anisotropy=None, grid_shape=None) -> Encoder:
        cfg = EncodingConfig(self.dims, spatial_dims, self.seed)
        return make_encoder(
            self.family,
            cfg,
            temperature=self.temperature,
            scale=self.scale,
            scales=self.scales,
            anisotropy=anisotropy,
            grid_shape=grid_shape,
        )
