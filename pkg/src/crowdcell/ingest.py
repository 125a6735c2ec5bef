"""Frame sequence I/O: binary PGM/PPM decoding and cell-mask writers."""

from __future__ import annotations

import fnmatch
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ImageFormatError, SequenceError

DEFAULT_PATTERN = "*.p[gp]m"

# ITU-R BT.601 luma weights.
_LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class CellGridSpec:
    """Partition of a frame into non-overlapping ``cell_size`` squares.

    Pixels right of ``grid_w * cell_size`` or below ``grid_h * cell_size``
    do not belong to any cell.
    """

    cell_size: int
    grid_w: int
    grid_h: int

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValueError(f"cell_size must be >= 2, got {self.cell_size}")
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError(
                f"frame too small for {self.cell_size}px cells "
                f"(grid {self.grid_w}x{self.grid_h})"
            )

    @classmethod
    def for_frame(cls, width: int, height: int, cell_size: int = 16) -> "CellGridSpec":
        return cls(cell_size, width // cell_size, height // cell_size)

    @property
    def shape(self):
        """Grid shape as ``(rows, cols)`` = ``(grid_h, grid_w)``."""
        return (self.grid_h, self.grid_w)

    @property
    def pixel_shape(self):
        return (self.grid_h * self.cell_size, self.grid_w * self.cell_size)

    def crop(self, image):
        """Drop trailing rows/columns that fall outside the last full cell."""
        h, w = self.pixel_shape
        return image[..., :h, :w]

    def cell_sums(self, image):
        """Sum ``image`` (…, H, W) over every cell, giving (…, grid_h, grid_w)."""
        n = self.cell_size
        img = self.crop(image)
        lead = img.shape[:-2]
        return img.reshape(*lead, self.grid_h, n, self.grid_w, n).sum(axis=(-3, -1))

    def upsample(self, grid):
        """Expand a per-cell grid to pixel resolution (cropped size)."""
        n = self.cell_size
        return np.repeat(np.repeat(np.asarray(grid), n, axis=-2), n, axis=-1)

    def check_cell(self, cell):
        i, j = cell
        if not (0 <= i < self.grid_w and 0 <= j < self.grid_h):
            raise IndexError(
                f"cell (i={i}, j={j}) outside {self.grid_w}x{self.grid_h} grid"
            )
        return int(i), int(j)

    def cell_slice(self, cell):
        i, j = self.check_cell(cell)
        n = self.cell_size
        return (slice(j * n, (j + 1) * n), slice(i * n, (i + 1) * n))


@dataclass
class FrameSequence:
    """Time-ordered greyscale frames stored as a ``(T, H, W)`` uint8 array."""

    frames: np.ndarray
    fps_hint: Optional[float] = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or len(self.frames) < 1:
            raise SequenceError("a FrameSequence needs a non-empty (T, H, W) array")
        if self.frames.dtype != np.uint8:
            raise SequenceError(f"frames must be uint8, got {self.frames.dtype}")
        if not self.names:
            self.names = [f"frame_{t:04d}" for t in range(len(self.frames))]
        elif len(self.names) != len(self.frames):
            raise SequenceError("names and frames differ in length")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, t):
        return self.frames[t]

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def height(self):
        return self.frames.shape[1]


def _read_header(data: bytes, path):
    """Parse a PNM header; return (magic, width, height, maxval, data_offset)."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError(f"{path}: truncated header")
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing raster data")
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(
            f"{path}: unsupported magic {magic!r} (only binary P5/P6 are read)"
        )
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header field") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (must be 255)")
    return magic, width, height, maxval, pos


def rgb_to_luma(rgb):
    """Convert an (..., 3) uint8 RGB array to 8-bit luma with round-half-up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = _LUMA[0] * rgb[..., 0] + _LUMA[1] * rgb[..., 1] + _LUMA[2] * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file into a ``(H, W)`` uint8 array.

    Colour images are reduced to luma.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: cannot read ({exc})") from exc
    magic, width, height, _, offset = _read_header(data, path)
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raster = data[offset : offset + expected]
    if len(raster) < expected:
        raise ImageFormatError(
            f"{path}: raster truncated ({len(raster)} of {expected} bytes)"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8)
    if channels == 3:
        return rgb_to_luma(pixels.reshape(height, width, 3))
    return pixels.reshape(height, width).copy()


def write_pgm(path, image) -> None:
    """Write a 2-D uint8 array as a binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.dtype == bool:
            image = image.astype(np.uint8) * 255
        else:
            image = np.clip(image, 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def list_frames(dir_path, pattern=DEFAULT_PATTERN) -> list:
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise SequenceError(f"{dir_path}: not a directory")
    names = sorted(
        name
        for name in os.listdir(dir_path)
        if fnmatch.fnmatch(name, pattern) and (dir_path / name).is_file()
    )
    if not names:
        raise SequenceError(f"{dir_path}: no frames matched {pattern!r}")
    return [dir_path / name for name in names]


def load_images(paths: Sequence) -> np.ndarray:
    frames = []
    shape = None
    for path in paths:
        img = read_pnm(path)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise SequenceError(
                f"{path}: size {img.shape[1]}x{img.shape[0]} differs from "
                f"first frame {shape[1]}x{shape[0]}"
            )
        frames.append(img)
    return np.stack(frames)


def load_sequence(dir_path, pattern=DEFAULT_PATTERN, fps_hint=None) -> FrameSequence:
    """Load every file in ``dir_path`` matching ``pattern``, in filename order."""
    paths = list_frames(dir_path, pattern)
    return FrameSequence(load_images(paths), fps_hint, [p.stem for p in paths])


def find_sequences(root, pattern=DEFAULT_PATTERN) -> list:
    """Return sequence directories under ``root``.

    ``root`` itself is a sequence when it directly holds matching frames;
    otherwise each immediate subdirectory with matching frames is one.
    """
    root = Path(root)
    if not root.is_dir():
        raise SequenceError(f"{root}: not a directory")
    if any(fnmatch.fnmatch(p.name, pattern) and p.is_file() for p in root.iterdir()):
        return [root]
    subdirs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if any(fnmatch.fnmatch(p.name, pattern) for p in sub.iterdir()):
            subdirs.append(sub)
    if not subdirs:
        raise SequenceError(f"{root}: no frames matched {pattern!r}")
    return subdirs


def _check_grid(grid, spec: CellGridSpec):
    grid = np.asarray(grid, dtype=bool)
    if grid.shape != spec.shape:
        raise ValueError(
            f"grid shape {grid.shape} does not match {spec.grid_h}x{spec.grid_w} cells"
        )
    return grid


def write_cell_mask(grid, spec: CellGridSpec, path) -> None:
    """Write a per-cell flag grid as a ``grid_w x grid_h`` PGM (255 = anomalous)."""
    grid = _check_grid(grid, spec)
    write_pgm(path, grid.astype(np.uint8) * 255)


def render_overlay(frame, grid, spec: CellGridSpec) -> np.ndarray:
    """Paint anomalous cells at maximum intensity over ``frame``."""
    grid = _check_grid(grid, spec)
    out = np.array(frame, dtype=np.uint8, copy=True)
    h, w = spec.pixel_shape
    if out.shape[0] < h or out.shape[1] < w:
        raise ValueError("frame smaller than the cell grid")
    out[:h, :w][spec.upsample(grid)] = 255
    return out


def write_overlay(frame, grid, spec: CellGridSpec, path) -> None:
    write_pgm(path, render_overlay(frame, grid, spec))


def write_frame_outputs(out_dir, stem, grid, spec: CellGridSpec, frame=None) -> None:
    """Write ``<stem>_cells.pgm`` and, given the source frame, ``<stem>_overlay.pgm``."""
    out_dir = Path(out_dir)
    write_cell_mask(grid, spec, out_dir / f"{stem}_cells.pgm")
    if frame is not None:
        write_overlay(frame, grid, spec, out_dir / f"{stem}_overlay.pgm")
