"""LBP and Haar DWT planes and the 3-channel fusion object built from them."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# (row, col) offsets of the 8 neighbours: top-left first, clockwise; the first is the MSB
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))

INV_SQRT2 = 1.0 / np.sqrt(2.0)


def check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"grayscale image must be 2-d, got shape {img.shape}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"grayscale image must be at least 8x8, got {img.shape}")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255) or np.any(img != np.round(img)):
            raise ValueError("grayscale pixels must be integers in 0..255")
        img = img.astype(np.uint8)
    return img


def read_pgm(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        return check_gray(np.array(im))


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(check_gray(img), mode="L").save(path, format="PPM")


def lbp_image(img: np.ndarray) -> np.ndarray:
    """Radius-1, 8-neighbour LBP codes with edge replication at the borders."""
    img = check_gray(img).astype(np.int16)
    h, w = img.shape
    pad = np.pad(img, 1, mode="edge")
    code = np.zeros((h, w), dtype=np.int32)
    for bit, (dr, dc) in enumerate(LBP_OFFSETS):
        neigh = pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        code |= (neigh >= img).astype(np.int32) << (7 - bit)
    return code.astype(np.uint8)


def pad_even(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Replicate the last row/column when a dimension is odd."""
    pr, pc = img.shape[0] % 2, img.shape[1] % 2
    if pr or pc:
        img = np.pad(img, ((0, pr), (0, pc)), mode="edge")
    return img, (pr, pc)


def haar_subbands(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Single-level orthonormal Haar: filter along rows, then columns.

    Returns (LL, LH, HL, HH) where LH is row-high/column-low.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise ValueError(f"haar_subbands needs even dimensions, got {x.shape}")
    lo = (x[:, 0::2] + x[:, 1::2]) * INV_SQRT2
    hi = (x[:, 0::2] - x[:, 1::2]) * INV_SQRT2
    ll = (lo[0::2] + lo[1::2]) * INV_SQRT2
    hl = (lo[0::2] - lo[1::2]) * INV_SQRT2
    lh = (hi[0::2] + hi[1::2]) * INV_SQRT2
    hh = (hi[0::2] - hi[1::2]) * INV_SQRT2
    return ll, lh, hl, hh


def inverse_haar(ll, lh, hl, hh) -> np.ndarray:
    lo = np.empty((ll.shape[0] * 2, ll.shape[1]))
    hi = np.empty_like(lo)
    lo[0::2], lo[1::2] = (ll + hl) * INV_SQRT2, (ll - hl) * INV_SQRT2
    hi[0::2], hi[1::2] = (lh + hh) * INV_SQRT2, (lh - hh) * INV_SQRT2
    out = np.empty((lo.shape[0], lo.shape[1] * 2))
    out[:, 0::2], out[:, 1::2] = (lo + hi) * INV_SQRT2, (lo - hi) * INV_SQRT2
    return out


@dataclass
class DwtPlane:
    """Quadrant-tiled subbands: LL | LH over HL | HH, at the (padded) input size."""

    values: np.ndarray
    padding: tuple[int, int] = (0, 0)

    def subbands(self):
        h2, w2 = self.values.shape[0] // 2, self.values.shape[1] // 2
        v = self.values
        return v[:h2, :w2], v[:h2, w2:], v[h2:, :w2], v[h2:, w2:]

    def reconstruct(self) -> np.ndarray:
        return inverse_haar(*self.subbands())


def dwt_image(img: np.ndarray) -> DwtPlane:
    img = check_gray(img)
    padded, padding = pad_even(img)
    ll, lh, hl, hh = haar_subbands(padded)
    tiled = np.block([[ll, lh], [hl, hh]])
    return DwtPlane(tiled, padding)


def minmax(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi == lo:
        return np.zeros_like(plane, dtype=np.float64)
    return (plane - lo) / (hi - lo)


@dataclass
class FusionObject:
    """Raw, LBP and DWT planes stacked on the last axis, each scaled to [0, 1].

    ``data`` is indexed (row, column, channel).  ``padding`` records the rows and
    columns added to reach even dimensions so overlays can crop back.
    """

    data: np.ndarray
    padding: tuple[int, int] = field(default=(0, 0))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def cropped(self) -> np.ndarray:
        pr, pc = self.padding
        h, w = self.data.shape[:2]
        return self.data[:h - pr, :w - pc]


def fuse(us: np.ndarray, lbp: np.ndarray, dwt: np.ndarray | DwtPlane) -> FusionObject:
    padding = (0, 0)
    if isinstance(dwt, DwtPlane):
        padding = dwt.padding
        dwt = dwt.values
    us, lbp, dwt = np.asarray(us), np.asarray(lbp), np.asarray(dwt, dtype=np.float64)
    if not (us.shape == lbp.shape == dwt.shape):
        raise ValueError(f"fuse: dimension mismatch us={us.shape} lbp={lbp.shape} dwt={dwt.shape}")
    stack = np.stack([us.astype(np.float64) / 255.0, lbp.astype(np.float64) / 255.0, minmax(dwt)], axis=-1)
    return FusionObject(stack, padding)


def featurize(img: np.ndarray) -> FusionObject:
    """Full fusion pipeline for one image; odd sizes are padded first."""
    img = check_gray(img)
    padded, padding = pad_even(img)
    fo = fuse(padded, lbp_image(padded), dwt_image(padded))
    fo.padding = padding
    return fo


def downsample(planes: np.ndarray, size: int) -> np.ndarray:
    """Area-average an (h, w, c) array down to (size, size, c); integer factors only."""
    h, w = planes.shape[:2]
    if h == size and w == size:
        return planes
    if h % size or w % size:
        raise ValueError(f"cannot area-downsample {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    return planes.reshape(size, fh, size, fw, -1).mean(axis=(1, 3))


INPUT_MODES = ("raw", "augmented", "fused")


def mode_views(fo: FusionObject, mode: str) -> list[np.ndarray]:
    """Network inputs (c, h, w) for one nodule under an input mode.

    raw: the US channel replicated three times.  augmented: US, LBP and DWT as
    three separate replicated images.  fused: the fusion object itself.
    """
    d = fo.data
    if mode == "fused":
        return [d.transpose(2, 0, 1)]
    if mode == "raw":
        return [np.repeat(d[None, :, :, 0], 3, axis=0)]
    if mode == "augmented":
        return [np.repeat(d[None, :, :, k], 3, axis=0) for k in range(3)]
    raise ValueError(f"unknown input mode {mode!r}; expected one of {INPUT_MODES}")
