"""Dense multi-scale gradient-orientation descriptors on a regular grid.

Single pyramid level only: a grid with fixed spacing is laid over the image
and at every grid point one descriptor per configured spatial bin size is
computed. A descriptor pools per-pixel gradient magnitude over a
spatial_cells x spatial_cells array of square cells into orientation_bins
orientation bins, with bilinear weighting in both space and orientation, then
is L2-normalized with component clamping.

Geometry conventions:
  - a descriptor's support window is spatial_cells * bin_size pixels per axis;
  - (x, y) is the top-left corner of the support window;
  - gradients are central differences with replicate borders;
  - the flattened vector is ordered (cell_row, cell_col, orientation_bin).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .corpus import GrayRaster
from .util import atomic_write_bytes, canonical_json, sha256_hex

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class DescriptorParams:
    grid_step: int = 5
    bin_sizes: tuple[int, ...] = (4, 6, 8, 10)
    orientation_bins: int = 8
    spatial_cells: int = 4
    clamp: float = 0.2
    contrast_floor: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "bin_sizes", tuple(int(b) for b in self.bin_sizes))
        if self.grid_step < 1:
            raise ValueError("grid_step must be >= 1")
        if not self.bin_sizes:
            raise ValueError("bin_sizes must be non-empty")
        if any(b < 1 for b in self.bin_sizes):
            raise ValueError("bin sizes must be >= 1")
        if any(b >= a for b, a in zip(self.bin_sizes, self.bin_sizes[1:])):
            raise ValueError("bin_sizes must be strictly increasing")
        if self.orientation_bins < 1:
            raise ValueError("orientation_bins must be >= 1")
        if self.spatial_cells < 1:
            raise ValueError("spatial_cells must be >= 1")
        if not (0.0 < self.clamp <= 1.0):
            raise ValueError("clamp must be in (0, 1]")
        if self.contrast_floor < 0.0:
            raise ValueError("contrast_floor must be >= 0")

    @property
    def dim(self) -> int:
        return self.spatial_cells * self.spatial_cells * self.orientation_bins

    def support(self, bin_size: int) -> int:
        return self.spatial_cells * bin_size

    def to_dict(self) -> dict:
        return {
            "grid_step": self.grid_step,
            "bin_sizes": list(self.bin_sizes),
            "orientation_bins": self.orientation_bins,
            "spatial_cells": self.spatial_cells,
            "clamp": self.clamp,
            "contrast_floor": self.contrast_floor,
        }

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()).encode())

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorParams":
        return cls(
            grid_step=d["grid_step"],
            bin_sizes=tuple(d["bin_sizes"]),
            orientation_bins=d["orientation_bins"],
            spatial_cells=d["spatial_cells"],
            clamp=d["clamp"],
            contrast_floor=d["contrast_floor"],
        )


@dataclass
class DescriptorSet:
    """All descriptors of one image, as parallel arrays."""

    image_id: str
    vectors: np.ndarray   # (n, dim) float64
    xs: np.ndarray        # (n,) top-left x of the support window
    ys: np.ndarray        # (n,) top-left y
    scales: np.ndarray    # (n,) index into DescriptorParams.bin_sizes

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _gradients(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicate borders."""
    p = np.pad(values, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def _orientation_planes(values: np.ndarray, nbins: int) -> np.ndarray:
    """Per-pixel gradient magnitude split linearly over orientation bins.

    Returns an (nbins, h, w) array whose per-pixel sum over bins equals the
    gradient magnitude.
    """
    gx, gy = _gradients(values)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), _TWO_PI)
    pos = ang * (nbins / _TWO_PI)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % nbins
    hi = (lo + 1) % nbins
    planes = np.zeros((nbins,) + values.shape)
    for b in range(nbins):
        planes[b] = mag * ((lo == b) * (1.0 - frac) + (hi == b) * frac)
    return planes


def _cell_weights(cells: int, bin_size: int) -> np.ndarray:
    """Bilinear weight of each pixel offset into each cell, shape (cells, support).

    Pixel offset d has cell coordinate (d + 0.5) / bin_size - 0.5; weight into
    integer cell c is the unit tent around c, with mass falling outside the
    cell range dropped.
    """
    d = np.arange(cells * bin_size, dtype=np.float64)
    u = (d + 0.5) / bin_size - 0.5
    c = np.arange(cells, dtype=np.float64)[:, None]
    return np.maximum(0.0, 1.0 - np.abs(u[None, :] - c))


def _finalize(vectors: np.ndarray, clamp: float, contrast_floor: float) -> np.ndarray:
    """Normalize raw pooled vectors in place: zero out low-contrast rows, then
    L2-normalize, clamp, re-normalize, and re-clamp so components stay <= clamp
    and norms stay <= 1."""
    if vectors.size == 0:
        return vectors
    norms = np.linalg.norm(vectors, axis=1)
    dead = norms < contrast_floor
    vectors[dead] = 0.0
    live = ~dead & (norms > 0.0)
    vectors[live] /= norms[live, None]
    np.minimum(vectors, clamp, out=vectors)
    norms2 = np.linalg.norm(vectors, axis=1)
    live2 = norms2 > 0.0
    vectors[live2] /= norms2[live2, None]
    np.minimum(vectors, clamp, out=vectors)
    return vectors


def extract_dense_descriptors(
    raster: GrayRaster,
    params: DescriptorParams | None = None,
    image_id: str = "",
) -> DescriptorSet:
    """Extract descriptors at every grid point whose support fits the raster.

    Scales whose support exceeds the raster yield no descriptors; a raster too
    small for even the smallest scale yields an empty set, never an error.
    Low-contrast windows (pre-normalization gradient energy below
    contrast_floor) are emitted as all-zero vectors so the descriptor count
    depends only on geometry.
    """
    params = params or DescriptorParams()
    values = raster.values
    h, w = values.shape
    cells = params.spatial_cells
    planes = _orientation_planes(values, params.orientation_bins)

    chunks: list[np.ndarray] = []
    xs_all: list[np.ndarray] = []
    ys_all: list[np.ndarray] = []
    scales_all: list[np.ndarray] = []
    for scale_index, bin_size in enumerate(params.bin_sizes):
        support = params.support(bin_size)
        if support > w or support > h:
            continue
        gxs = np.arange(0, w - support + 1, params.grid_step)
        gys = np.arange(0, h - support + 1, params.grid_step)
        weights = _cell_weights(cells, bin_size)
        for y0 in gys:
            block = planes[:, y0:y0 + support, :]
            # pool window rows into cell rows: (nbins, cells, w)
            row_pool = np.einsum("osw,cs->ocw", block, weights)
            wins = sliding_window_view(row_pool, support, axis=2)[:, :, gxs]
            # pool window columns into cell columns: (nx, cell_row, cell_col, nbins)
            desc = np.einsum("ocxs,es->xceo", wins, weights)
            chunks.append(desc.reshape(len(gxs), -1))
            xs_all.append(gxs)
            ys_all.append(np.full(len(gxs), y0, dtype=np.int64))
            scales_all.append(np.full(len(gxs), scale_index, dtype=np.int64))

    if chunks:
        vectors = np.concatenate(chunks, axis=0)
        xs = np.concatenate(xs_all)
        ys = np.concatenate(ys_all)
        scales = np.concatenate(scales_all)
    else:
        vectors = np.zeros((0, params.dim))
        xs = np.zeros(0, dtype=np.int64)
        ys = np.zeros(0, dtype=np.int64)
        scales = np.zeros(0, dtype=np.int64)

    _finalize(vectors, params.clamp, params.contrast_floor)
    return DescriptorSet(image_id=image_id, vectors=vectors, xs=xs, ys=ys, scales=scales)


# Binary dump, used only for caching between pipeline stages:
# header <u32 dim><u32 count>, then per descriptor
# <u32 x><u32 y><u8 scale><dim x f32 little-endian>.

_HEADER = struct.Struct("<II")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([
        ("x", "<u4"),
        ("y", "<u4"),
        ("scale", "u1"),
        ("vector", "<f4", (dim,)),
    ])


def write_descriptor_dump(path, dset: DescriptorSet) -> None:
    dim = dset.dim
    rec = np.zeros(dset.n, dtype=_record_dtype(dim))
    rec["x"] = dset.xs
    rec["y"] = dset.ys
    rec["scale"] = dset.scales
    rec["vector"] = dset.vectors.astype("<f4")
    atomic_write_bytes(path, _HEADER.pack(dim, dset.n) + rec.tobytes())


def read_descriptor_dump(path, image_id: str = "") -> DescriptorSet:
    raw = Path(path).read_bytes()
    dim, count = _HEADER.unpack_from(raw, 0)
    rec = np.frombuffer(raw, dtype=_record_dtype(dim), count=count, offset=_HEADER.size)
    return DescriptorSet(
        image_id=image_id,
        vectors=rec["vector"].astype(np.float64),
        xs=rec["x"].astype(np.int64),
        ys=rec["y"].astype(np.int64),
        scales=rec["scale"].astype(np.int64),
    )
