"""Dataset ingestion: IDX binary files and a built-in synthetic digit set.

The synthetic generator renders 28x28 grayscale digits from a 5x7 bitmap
font with random affine placement, stroke intensity jitter, blur, and
additive noise. It is fully determined by (n, seed), so experiments are
reproducible without shipping image files.
"""

from __future__ import annotations

import struct

import numpy as np

from .seeds import substream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(OSError):
    """Raised for malformed IDX files (bad magic, truncation, mismatch)."""


# 5x7 digit glyphs, one row string per scanline
_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

_GLYPHS = np.stack(
    [
        np.array([[float(ch) for ch in row] for row in _FONT[d]], dtype=np.float32)
        for d in range(10)
    ]
)  # (10, 7, 5)

IMG_SIDE = 28
_CHUNK = 2048  # fixed render chunk; part of the deterministic draw order


def _bilinear_sample(glyphs: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample per-item glyphs at fractional (row=v, col=u), zero outside."""
    gh, gw = glyphs.shape[1], glyphs.shape[2]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = (u - u0).astype(np.float32)
    fv = (v - v0).astype(np.float32)

    def tap(vi, ui):
        inside = (vi >= 0) & (vi < gh) & (ui >= 0) & (ui < gw)
        vc = np.clip(vi, 0, gh - 1)
        uc = np.clip(ui, 0, gw - 1)
        idx = np.arange(glyphs.shape[0])[:, None, None]
        return np.where(inside, glyphs[idx, vc, uc], np.float32(0.0))

    top = tap(v0, u0) * (1 - fu) + tap(v0, u0 + 1) * fu
    bot = tap(v0 + 1, u0) * (1 - fu) + tap(v0 + 1, u0 + 1) * fu
    return top * (1 - fv) + bot * fv


def _blur3(x: np.ndarray) -> np.ndarray:
    """Separable (1,2,1)/4 blur on the last two axes, edge replicated."""
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    x = (p[:, :-2, 1:-1] + 2 * p[:, 1:-1, 1:-1] + p[:, 2:, 1:-1]) * np.float32(0.25)
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    return (p[:, 1:-1, :-2] + 2 * p[:, 1:-1, 1:-1] + p[:, 1:-1, 2:]) * np.float32(0.25)


def _render_chunk(labels, params, fg, sigma, noise) -> np.ndarray:
    n = labels.shape[0]
    side = IMG_SIDE
    rows, cols = np.meshgrid(
        np.arange(side, dtype=np.float32), np.arange(side, dtype=np.float32), indexing="ij"
    )
    rot, sx, sy, shear, tx, ty = (params[:, i][:, None, None] for i in range(6))
    # map output pixel -> glyph coordinates: undo translation, rotation,
    # shear, then scale into the 5x7 glyph frame
    yc = rows[None] - (side / 2 + ty)
    xc = cols[None] - (side / 2 + tx)
    cos, sin = np.cos(rot), np.sin(rot)
    xr = cos * xc + sin * yc
    yr = -sin * xc + cos * yc
    xr = xr - shear * yr
    gw, gh = _GLYPHS.shape[2], _GLYPHS.shape[1]
    u = xr / sx + (gw - 1) / 2
    v = yr / sy + (gh - 1) / 2
    img = _bilinear_sample(_GLYPHS[labels], u.astype(np.float32), v.astype(np.float32))
    img = _blur3(img) * fg
    img = img + noise * sigma
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_dataset(n: int, seed: int):
    """Synthesize n labeled digit images.

    Returns (images, labels): images float32 (n, 1, 28, 28) in [0, 1],
    labels int64 (n,). Identical (n, seed) gives identical arrays.
    """
    if n <= 0:
        raise ValueError(f"make_dataset: n must be positive, got {n}")
    rng = substream(seed, "synthetic-digits")
    labels = rng.integers(0, 10, size=n)
    params = np.empty((n, 6), dtype=np.float32)
    params[:, 0] = rng.uniform(-0.30, 0.30, n)  # rotation, rad
    params[:, 1] = rng.uniform(2.2, 3.4, n)  # x scale, glyph px -> image px
    params[:, 2] = rng.uniform(2.2, 3.4, n)  # y scale
    params[:, 3] = rng.uniform(-0.25, 0.25, n)  # shear
    params[:, 4] = rng.uniform(-3.5, 3.5, n)  # x shift
    params[:, 5] = rng.uniform(-3.5, 3.5, n)  # y shift
    # Low stroke contrast keeps decision margins small relative to the
    # 0-1 pixel range (so small-budget gradient attacks succeed at
    # realistic rates) while the noise floor stays well below typical
    # attack budgets (so clean activations are predictable and attacks
    # stand out); the aggregate stroke signal keeps accuracy high.
    fg = rng.uniform(0.15, 0.30, n).astype(np.float32)[:, None, None]
    sigma = rng.uniform(0.005, 0.02, n).astype(np.float32)[:, None, None]

    images = np.empty((n, IMG_SIDE, IMG_SIDE), dtype=np.float32)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        noise = rng.normal(size=(stop - start, IMG_SIDE, IMG_SIDE)).astype(np.float32)
        images[start:stop] = _render_chunk(
            labels[start:stop], params[start:stop], fg[start:stop], sigma[start:stop], noise
        )
    return images[:, None, :, :], labels.astype(np.int64)


def _read_exact(f, count: int, path: str, offset: int) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise DataFormatError(
            f"{path}: truncated at byte {offset}, expected {count} more bytes, got {len(buf)}"
        )
    return buf


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into float32 (n, rows, cols) scaled to [0, 1]."""
    path = str(path)
    with open(path, "rb") as f:
        header = _read_exact(f, 16, path, 0)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise DataFormatError(
                f"{path}: bad image magic 0x{magic:08x} at byte 0, expected 0x{IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, count * rows * cols, path, 16)
        extra = f.read(1)
        if extra:
            raise DataFormatError(f"{path}: trailing data at byte {16 + count * rows * cols}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    return pixels.astype(np.float32) / np.float32(255.0)


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into int64 (n,)."""
    path = str(path)
    with open(path, "rb") as f:
        header = _read_exact(f, 8, path, 0)
        magic, count = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise DataFormatError(
                f"{path}: bad label magic 0x{magic:08x} at byte 0, expected 0x{LABEL_MAGIC:08x}"
            )
        raw = _read_exact(f, count, path, 8)
        extra = f.read(1)
        if extra:
            raise DataFormatError(f"{path}: trailing data at byte {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path, labels_path):
    """Load a paired IDX image/label set as ((n,1,r,c) float32, (n,) int64)."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images_path} has {images.shape[0]} images but "
            f"{labels_path} has {labels.shape[0]} labels"
        )
    return images[:, None, :, :], labels


def write_idx_images(path, images: np.ndarray) -> None:
    """Write (n, rows, cols) or (n, 1, rows, cols) pixels in [0, 1] as IDX."""
    if images.ndim == 4:
        images = images[:, 0]
    n, rows, cols = images.shape
    quantized = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(str(path), "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(quantized.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with open(str(path), "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
