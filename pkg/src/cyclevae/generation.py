"""Swap grids, interpolation grids and conditional samples, written as PGM/PNG files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .model import ModelParams, decode, encode
from .tensor import no_grad


@dataclass
class ImageGrid:
    """``cells[r, c]`` is one (channels, h, w) image; optional source images frame the grid."""

    cells: np.ndarray  # (rows, cols, c, h, w)
    header_row: np.ndarray | None = None  # (cols, c, h, w), drawn above the cells
    header_col: np.ndarray | None = None  # (rows, c, h, w), drawn left of the cells

    @property
    def rows(self) -> int:
        return self.cells.shape[0] + (self.header_row is not None)

    @property
    def cols(self) -> int:
        return self.cells.shape[1] + (self.header_col is not None)

    def layout(self) -> np.ndarray:
        """All images including headers as (rows, cols, c, h, w); an unused corner is white."""
        r, c = self.cells.shape[:2]
        top, left = int(self.header_row is not None), int(self.header_col is not None)
        full = np.ones((r + top, c + left) + self.cells.shape[2:], dtype=self.cells.dtype)
        full[top:, left:] = self.cells
        if top:
            full[0, left:] = self.header_row
        if left:
            full[top:, 0] = self.header_col
        return full


# Codes and cells are computed one image at a time so every cell is bitwise equal
# to a stand-alone reconstruction, whatever the grid size.


def _codes(images: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    mus, ss = [], []
    with no_grad():
        for image in images:
            code = encode(image[None], params)
            mus.append(code.mu.data[0])
            ss.append(code.s.data[0])
    return np.stack(mus), np.stack(ss)


def _decode(z: np.ndarray, s: np.ndarray, params: ModelParams) -> np.ndarray:
    with no_grad():
        return np.stack([decode(zi[None], si[None], params).data[0] for zi, si in zip(z, s)])


def reconstruction(image: np.ndarray, params: ModelParams) -> np.ndarray:
    """Dec(mu(x), s(x)) for a single (c, h, w) image."""
    mu, s = _codes(image[None], params)
    return _decode(mu, s, params)[0]


def swap_grid(row_images: np.ndarray, col_images: np.ndarray, params: ModelParams) -> ImageGrid:
    """Cell (i, j) = Dec(mu(col_images[i]), s(row_images[j])): z fixed along a row, s down a column."""
    if len(row_images) == 0 or len(col_images) == 0:
        raise ValueError("swap_grid needs at least one row image and one column image")
    mu_col, _ = _codes(col_images, params)
    _, s_row = _codes(row_images, params)
    n, m = len(col_images), len(row_images)
    z = np.repeat(mu_col, m, axis=0)
    s = np.tile(s_row, (n, 1))
    cells = _decode(z, s, params).reshape((n, m) + row_images.shape[1:])
    return ImageGrid(cells, header_row=np.asarray(row_images), header_col=np.asarray(col_images))


def interpolation_grid(corner_a: np.ndarray, corner_b: np.ndarray, steps: int, params: ModelParams) -> ImageGrid:
    """z moves from mu(a) to mu(b) down the rows, s from s(a) to s(b) across the columns."""
    if steps < 2:
        raise ValueError(f"interpolation needs steps >= 2, got {steps}")
    mu, s = _codes(np.stack([corner_a, corner_b]), params)
    alpha = np.linspace(0.0, 1.0, steps, dtype=mu.dtype)[:, None]
    z_path = (1 - alpha) * mu[0] + alpha * mu[1]
    s_path = (1 - alpha) * s[0] + alpha * s[1]
    # exact endpoints regardless of rounding in the affine formula, and no drift where they agree
    z_path = np.where(mu[0] == mu[1], mu[0], z_path)
    s_path = np.where(s[0] == s[1], s[0], s_path)
    z_path[0], z_path[-1], s_path[0], s_path[-1] = mu[0], mu[1], s[0], s[1]
    z = np.repeat(z_path, steps, axis=0)
    s_all = np.tile(s_path, (steps, 1))
    cells = _decode(z, s_all, params).reshape((steps, steps) + np.shape(corner_a))
    return ImageGrid(cells)


def conditional_sample(source_images: np.ndarray, samples_per_source: int, params: ModelParams,
                       rng: np.random.Generator) -> tuple[ImageGrid, np.ndarray]:
    """Row i = Dec(z_j, s(source_images[i])) with prior draws z_j shared down each column.

    Returns the grid (sources as the header column) and the (n, z_dim) prior draws.
    """
    _, s = _codes(source_images, params)
    k, n = len(source_images), samples_per_source
    draws = rng.standard_normal((n, params.config.z_dim)).astype(s.dtype)
    z = np.tile(draws, (k, 1))
    s_all = np.repeat(s, n, axis=0)
    cells = _decode(z, s_all, params).reshape((k, n) + source_images.shape[1:])
    return ImageGrid(cells, header_col=np.asarray(source_images)), draws


# ---------------------------------------------------------------- image files


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 with round-half-up: floor(p * 255 + 0.5)."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0 or not np.isfinite(p).all()):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def tile(grid: ImageGrid) -> np.ndarray:
    """Paste a grid into one (c, H, W) canvas with 1-pixel white separators."""
    full = grid.layout()
    rows, cols, c, h, w = full.shape
    canvas = np.ones((c, rows * (h + 1) - 1, cols * (w + 1) - 1), dtype=np.float64)
    for r in range(rows):
        for q in range(cols):
            canvas[:, r * (h + 1) : r * (h + 1) + h, q * (w + 1) : q * (w + 1) + w] = full[r, q]
    return canvas


def write_image(image, path, fmt: str | None = None) -> Path:
    """Write a (c, h, w) image or an ImageGrid as 8-bit PGM (grayscale, raw P5) or PNG."""
    pixels = tile(image) if isinstance(image, ImageGrid) else np.asarray(image)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, h, w) image, got shape {pixels.shape}")
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).upper()
    data = quantize(pixels)
    if fmt == "PGM":
        if data.shape[0] != 1:
            raise ValueError("PGM holds grayscale images only")
        Image.fromarray(data[0]).save(path, format="PPM")
    elif fmt == "PNG":
        arr = data[0] if data.shape[0] == 1 else data.transpose(1, 2, 0)
        Image.fromarray(arr).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {fmt!r}")
    return path


def read_image(path) -> np.ndarray:
    """Read back a PGM/PNG as uint8 (c, h, w)."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def grid_filename(mode: str, seed: int, grid: ImageGrid, fmt: str) -> str:
    return f"{mode}_{seed}_{grid.rows}x{grid.cols}.{fmt.lower()}"
