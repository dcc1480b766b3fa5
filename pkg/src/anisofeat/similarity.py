"""Dot-product similarity maps on a patch grid, plus PGM and CSV writers."""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoding import Encoder


@dataclass
class GridSpec:
    shape: tuple[int, ...]
    reference: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        if not self.shape or any(s < 1 for s in self.shape):
            raise ValueError(f"invalid grid shape {self.shape}")
        if self.reference is None:
            # "central patch"; even extents round down
            self.reference = tuple(s // 2 for s in self.shape)
        self.reference = tuple(int(r) for r in self.reference)
        if len(self.reference) != len(self.shape) or any(
            not 0 <= r < s for r, s in zip(self.reference, self.shape)
        ):
            raise ValueError(f"reference {self.reference} outside grid {self.shape}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    def positions(self) -> np.ndarray:
        """All grid positions in C order, ``(prod(shape), rank)``."""
        return np.indices(self.shape, dtype=np.float64).reshape(self.rank, -1).T


@dataclass
class SimilarityMap:
    grid: GridSpec
    values: np.ndarray
    normalization: str = "raw"

    def normalized(self) -> SimilarityMap:
        """Min-max scaled copy; a constant map becomes all zeros."""
        v = self.values
        lo, hi = v.min(), v.max()
        out = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
        return SimilarityMap(self.grid, out, "minmax")

    def at_offset(self, delta) -> float:
        idx = tuple(r + d for r, d in zip(self.grid.reference, delta))
        return float(self.values[idx])


def compute_map(encoder: Encoder, grid: GridSpec) -> SimilarityMap:
    """``values[q] = <enc(reference), enc(q)>`` for every grid position ``q``."""
    if encoder.spatial_dims != grid.rank:
        raise ValueError(f"encoder expects {encoder.spatial_dims}-D positions, grid has rank {grid.rank}")
    enc = encoder(grid.positions())
    ref = enc[np.ravel_multi_index(grid.reference, grid.shape)]
    return SimilarityMap(grid, (enc @ ref).reshape(grid.shape))


def radial_mismatch(encoder: Encoder, ks=range(1, 8)) -> np.ndarray:
    """``|<e(0), e(k,k)> - <e(0), e(k*sqrt2, 0)>|`` for 2-D encoders.

    A radial similarity would make the diagonal offset ``(k, k)`` look like an
    axis-aligned offset of the same Euclidean length; this measures how far an
    encoder is from that.
    """
    if encoder.spatial_dims != 2:
        raise ValueError("radial mismatch is defined for 2-D encoders")
    ks = np.asarray(list(ks), dtype=np.float64)
    origin = encoder(np.zeros(2))
    diag = encoder(np.stack([ks, ks], axis=1)) @ origin
    axial = encoder(np.stack([ks * np.sqrt(2.0), np.zeros_like(ks)], axis=1)) @ origin
    return np.abs(diag - axial)


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255 with round-half-up."""
    return np.floor(255.0 * values + 0.5).astype(np.uint8)


def _pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(smap: SimilarityMap, path) -> list[Path]:
    """Binary 8-bit PGM.  Rank-3 maps give one file per leading-axis slice,
    named ``<stem>_<k:03d>.pgm``; the written paths are returned."""
    if smap.normalization != "minmax":
        raise ValueError("write_pgm needs a min-max normalised map; call .normalized() first")
    path = Path(path)
    pixels = to_bytes(smap.values)
    if pixels.ndim == 1:
        pixels = pixels[None, :]
    if pixels.ndim == 2:
        path.write_bytes(_pgm(pixels))
        return [path]
    if pixels.ndim == 3:
        out = []
        for k in range(pixels.shape[0]):
            p = path.with_name(f"{path.stem}_{k:03d}{path.suffix or '.pgm'}")
            p.write_bytes(_pgm(pixels[k]))
            out.append(p)
        return out
    raise ValueError(f"cannot write a rank-{pixels.ndim} map as PGM")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header is four whitespace-separated tokens, then exactly one whitespace byte
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def write_csv(smap: SimilarityMap, path) -> Path:
    """One row per cell: index columns ``i,j[,k]`` then the raw value (17 significant digits)."""
    names = "ijklmn"[: smap.grid.rank]
    lines = [",".join(names) + ",value"]
    for idx in itertools.product(*(range(s) for s in smap.grid.shape)):
        lines.append(",".join(map(str, idx)) + f",{smap.values[idx]:.17g}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
