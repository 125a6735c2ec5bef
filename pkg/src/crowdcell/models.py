"""Per-cell feature models.

Scalars (motion, size) are modelled by a Gaussian-kernel density evaluated
only on a fixed grid ``s * delta_x`` and normalised to a pmf, so training
samples can be dropped afterwards.  Texture vectors are modelled by a
codebook grown online, matched by Pearson correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import ModelFormatError, ModelVersionError

MATCH_THRESHOLD = 0.9
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class Pmf:
    delta_x: float
    upper_s: int
    probs: np.ndarray
    sample_count: int
    bandwidth: float = float("nan")

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if not self.delta_x > 0:
            raise ValueError("delta_x must be positive")
        if len(self.probs) != self.upper_s + 1:
            raise ValueError(f"expected {self.upper_s + 1} probabilities, got {len(self.probs)}")

    @property
    def upper(self):
        return self.upper_s * self.delta_x

    def __call__(self, value):
        return pmf_lookup(self, value)


def silverman_bandwidth(samples, delta_x):
    """Silverman's rule ``sigma * (4 / 3n)^(1/5)``, floored at ``delta_x``."""
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    sigma = float(np.std(x, ddof=1)) if n > 1 else 0.0
    return max(sigma * (4.0 / (3.0 * n)) ** 0.2, delta_x)


def kde_on_grid(samples, delta_x, upper_s, bandwidth, chunk=4096):
    """Unnormalised Gaussian KDE evaluated at ``s * delta_x``, s = 0..S."""
    grid = np.arange(upper_s + 1, dtype=np.float64) * delta_x
    x = np.asarray(samples, dtype=np.float64)
    acc = np.zeros(upper_s + 1)
    norm = 1.0 / (bandwidth * _SQRT_2PI)
    for start in range(0, len(x), chunk):
        d = grid[None, :] - x[start : start + chunk, None]
        acc += np.exp(-(d * d) / (2.0 * bandwidth * bandwidth)).sum(axis=0)
    return acc * norm / len(x)


def fit_pmf(samples, delta_x=0.25, upper_s=40, bandwidth="auto") -> Optional[Pmf]:
    """Smoothed pmf on the grid 0, delta_x, ..., upper_s * delta_x.

    Samples are clamped into the grid range first.  Returns None (an empty
    model) when there are no samples.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) == 0:
        return None
    if upper_s < 1:
        raise ValueError("upper_s must be >= 1")
    x = np.clip(x, 0.0, upper_s * delta_x)
    h = silverman_bandwidth(x, delta_x) if bandwidth in (None, "auto") else float(bandwidth)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    dens = kde_on_grid(x, delta_x, upper_s, h)
    total = dens.sum()
    if not total > 0:
        # every kernel underflowed between grid points: fall back to the
        # nearest grid point of each sample
        idx = np.clip(np.floor(x / delta_x + 0.5).astype(np.int64), 0, upper_s)
        dens = np.bincount(idx, minlength=upper_s + 1).astype(np.float64)
        total = dens.sum()
    return Pmf(delta_x, int(upper_s), dens / total, len(x), h)


def pmf_lookup(pmf: Pmf, value) -> float:
    """Probability at the grid point nearest ``value`` (clamped, ties round up)."""
    if pmf is None:
        raise ValueError("cannot look up an empty pmf")
    idx = math.floor(float(value) / pmf.delta_x + 0.5)
    idx = min(max(idx, 0), pmf.upper_s)
    return float(pmf.probs[idx])


def pmf_lookup_array(pmf: Pmf, values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    idx = np.floor(v / pmf.delta_x + 0.5)
    idx = np.clip(np.nan_to_num(idx, nan=0.0), 0, pmf.upper_s).astype(np.int64)
    return pmf.probs[idx]


def pearson(a, b) -> float:
    """Pearson correlation of two vectors; 0 when either has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    na = math.sqrt(float(da @ da))
    nb = math.sqrt(float(db @ db))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(1.0, max(-1.0, float(da @ db) / (na * nb)))


def _pearson_rows(entries, x):
    """Correlation of ``x`` with each row of ``entries`` (same rules as pearson)."""
    dx = x - x.mean()
    nx = math.sqrt(float(dx @ dx))
    de = entries - entries.mean(axis=1, keepdims=True)
    ne = np.sqrt(np.einsum("ij,ij->i", de, de))
    if nx == 0.0:
        return np.zeros(len(entries))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (de @ dx) / (ne * nx)
    rho = np.where(ne == 0.0, 0.0, rho)
    return np.clip(rho, -1.0, 1.0)


@dataclass
class TextureCodebook:
    entries: List[np.ndarray] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)
    match_threshold: float = MATCH_THRESHOLD

    def __len__(self):
        return len(self.entries)

    def as_array(self):
        if not self.entries:
            return np.empty((0, 4))
        return np.vstack(self.entries)

    def observe(self, x):
        return codebook_observe(self, x)

    def best_match(self, x):
        return codebook_best_match(self, x)


def codebook_observe(cb: TextureCodebook, x) -> TextureCodebook:
    """Absorb ``x`` into its best-matching entry (running mean) or append it.

    Updates ``cb`` in place and returns it.  Ties on correlation go to the
    lowest entry index.
    """
    x = np.array(x, dtype=np.float64).ravel()
    if not cb.entries:
        cb.entries.append(x)
        cb.counts.append(1)
        return cb
    rho = _pearson_rows(cb.as_array(), x)
    k = int(np.argmax(rho))  # first maximum
    if rho[k] > cb.match_threshold:
        w = cb.counts[k]
        cb.entries[k] = cb.entries[k] + (x - cb.entries[k]) / (w + 1)
        cb.counts[k] = w + 1
    else:
        cb.entries.append(x)
        cb.counts.append(1)
    return cb


def codebook_best_match(cb: TextureCodebook, x) -> float:
    """Highest correlation between ``x`` and any entry; -1 for an empty codebook."""
    if not cb.entries:
        return -1.0
    return float(np.max(_pearson_rows(cb.as_array(), np.asarray(x, dtype=np.float64).ravel())))


@dataclass
class CellModel:
    motion_pmf: Optional[Pmf] = None
    size_pmf: Optional[Pmf] = None
    codebook: TextureCodebook = field(default_factory=TextureCodebook)
    motion_samples: int = 0
    size_samples: int = 0
    texture_samples: int = 0


# ---------------------------------------------------------------------------
# Persistence

MAGIC = "CROWDCELL-MODEL v1"


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _pmf_line(tag, pmf: Optional[Pmf]):
    if pmf is None:
        return f"{tag} empty"
    probs = " ".join(_fmt(p) for p in pmf.probs)
    return (
        f"{tag} {pmf.sample_count} {_fmt(pmf.delta_x)} {pmf.upper_s} "
        f"{_fmt(pmf.bandwidth)} {probs}"
    )


def dump_models(models, params=None, background=None) -> str:
    """Serialise a (grid_h, grid_w) grid of CellModel to text.

    ``params`` is an optional mapping of pipeline settings stored alongside;
    ``background`` an optional (image, threshold) pair.
    """
    gh = len(models)
    gw = len(models[0]) if gh else 0
    lines = [MAGIC]
    for key, value in sorted((params or {}).items()):
        lines.append(f"param {key} {value}")
    if background is not None:
        image, threshold = background
        image = np.asarray(image, dtype=np.uint8)
        lines.append(f"background {image.shape[1]} {image.shape[0]} {int(threshold)}")
        lines.append(image.tobytes().hex())
    lines.append(f"grid {gw} {gh}")
    for j in range(gh):
        for i in range(gw):
            m = models[j][i]
            cb = m.codebook
            lines.append(
                f"cell {i} {j} {m.motion_samples} {m.size_samples} {m.texture_samples}"
            )
            lines.append(_pmf_line("motion", m.motion_pmf))
            lines.append(_pmf_line("size", m.size_pmf))
            lines.append(f"codebook {len(cb)} {_fmt(cb.match_threshold)}")
            for entry, count in zip(cb.entries, cb.counts):
                lines.append(f"entry {count} " + " ".join(_fmt(v) for v in entry))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_models(models, path, params=None, background=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_models(models, params, background))


class _Reader:
    def __init__(self, text: str):
        self.data = text.encode("utf-8")
        self.lines = self.data.split(b"\n")
        self.pos = 0
        self.offset = 0
        self.line_offset = 0

    def next(self, expect=None):
        while self.pos < len(self.lines):
            raw = self.lines[self.pos]
            self.line_offset = self.offset
            self.offset += len(raw) + 1
            self.pos += 1
            if self.pos == len(self.lines) and raw == b"":
                break  # trailing newline
            fields = raw.decode("utf-8").split()
            if expect is not None and (not fields or fields[0] != expect):
                self.fail(f"expected {expect!r} record, found {raw[:40]!r}")
            return fields
        self.line_offset = len(self.data)
        self.fail(f"file truncated: expected {expect or 'more'} record")

    def fail(self, message):
        raise ModelFormatError(message, offset=self.line_offset)


def _parse_pmf(rd: _Reader, tag):
    f = rd.next(tag)
    if len(f) == 2 and f[1] == "empty":
        return None
    try:
        count, dx, s, bw = int(f[1]), float(f[2]), int(f[3]), float(f[4])
        probs = np.array([float(v) for v in f[5:]])
    except (ValueError, IndexError):
        rd.fail(f"malformed {tag} record")
    if len(probs) != s + 1:
        rd.fail(f"{tag} record holds {len(probs)} probabilities, expected {s + 1}")
    try:
        return Pmf(dx, s, probs, count, bw)
    except ValueError as exc:
        rd.fail(f"invalid {tag} pmf: {exc}")


def loads_models(text: str):
    """Inverse of :func:`dump_models`: returns ``(models, params, background)``."""
    rd = _Reader(text)
    first = rd.lines[0].decode("utf-8", errors="replace").strip() if rd.lines else ""
    if first != MAGIC:
        raise ModelVersionError(f"unsupported model header {first[:40]!r}, expected {MAGIC!r}", 0)
    rd.next()
    params = {}
    background = None
    while True:
        f = rd.next()
        if f and f[0] == "param":
            if len(f) < 3:
                rd.fail("malformed param record")
            params[f[1]] = " ".join(f[2:])
            continue
        if f and f[0] == "background":
            try:
                w, h, thr = int(f[1]), int(f[2]), int(f[3])
            except (ValueError, IndexError):
                rd.fail("malformed background record")
            blob = rd.next()
            try:
                pixels = bytes.fromhex(blob[0]) if blob else b""
            except ValueError:
                rd.fail("background raster is not hex")
            if len(pixels) != w * h:
                rd.fail(f"background raster holds {len(pixels)} bytes, expected {w * h}")
            background = (np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy(), thr)
            continue
        if f and f[0] == "grid":
            break
        rd.fail(f"unexpected record {' '.join(f)[:40]!r}")
    try:
        gw, gh = int(f[1]), int(f[2])
    except (ValueError, IndexError):
        rd.fail("malformed grid record")
    models = [[None] * gw for _ in range(gh)]
    for _ in range(gw * gh):
        c = rd.next("cell")
        try:
            i, j, n_mot, n_size, n_txt = (int(v) for v in c[1:6])
        except ValueError:
            rd.fail("malformed cell record")
        if len(c) != 6 or not (0 <= i < gw and 0 <= j < gh) or models[j][i] is not None:
            rd.fail(f"invalid cell record {' '.join(c)!r}")
        motion = _parse_pmf(rd, "motion")
        size = _parse_pmf(rd, "size")
        cbf = rd.next("codebook")
        try:
            k, thr = int(cbf[1]), float(cbf[2])
        except (ValueError, IndexError):
            rd.fail("malformed codebook record")
        cb = TextureCodebook(match_threshold=thr)
        for _ in range(k):
            e = rd.next("entry")
            if len(e) != 6:
                rd.fail("codebook entry must hold a count and 4 values")
            try:
                cb.counts.append(int(e[1]))
                cb.entries.append(np.array([float(v) for v in e[2:]]))
            except ValueError:
                rd.fail("malformed codebook entry")
        models[j][i] = CellModel(motion, size, cb, n_mot, n_size, n_txt)
    rd.next("end")
    return models, params, background


def load_models(path):
    """Load a model file; returns the (grid_h, grid_w) grid of CellModel."""
    return load_model_file(path)[0]


def load_model_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"{path}: not UTF-8 text", offset=exc.start) from None
    return loads_models(text)
