"""Synthetic handwritten-digit data in the IDX container format.

The generator draws a 5x7 bitmap font, upscales it, and perturbs each
sample with a random shear, shift, blur, and intensity so that a small
convnet has something real to learn.  Every image carries two labels:

* the digit (0-9), the task the network is trained for, and
* the style (0-3), a private attribute crossing stroke thickness with
  slant that an adversary might try to recover from activations.

Files use the classic IDX layout (big-endian magic + extents, raw
payload), so any MNIST tooling can open them.  ``.gz`` paths are
compressed transparently.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class DatasetError(ValueError):
    """Raised for malformed IDX files or bad generator arguments."""


# --------------------------------------------------------------------------
# IDX container
# --------------------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_DTYPES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    code = _IDX_CODES.get(arr.dtype.newbyteorder(">"))
    if code is None:
        raise DatasetError(f"dtype {arr.dtype} has no IDX type code")
    if not 1 <= arr.ndim <= 255:
        raise DatasetError(f"rank {arr.ndim} not representable in IDX")
    with _open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(np.asarray(arr.shape, ">u4").tobytes())
        fh.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def read_idx(path) -> np.ndarray:
    with _open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] or head[1]:
            raise DatasetError(f"{path}: not an IDX file")
        code, rank = head[2], head[3]
        if code not in _IDX_DTYPES:
            raise DatasetError(f"{path}: unknown IDX type code 0x{code:02x}")
        raw = fh.read(4 * rank)
        if len(raw) != 4 * rank:
            raise DatasetError(f"{path}: truncated dimension list")
        shape = tuple(int(n) for n in np.frombuffer(raw, ">u4"))
        dtype = _IDX_DTYPES[code]
        want = int(np.prod(shape)) * dtype.itemsize
        payload = fh.read(want + 1)
        if len(payload) < want:
            raise DatasetError(f"{path}: payload truncated ({len(payload)}/{want} bytes)")
        if len(payload) > want:
            raise DatasetError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype).reshape(shape).astype(dtype.newbyteorder("="))


# --------------------------------------------------------------------------
# Glyph font and rendering
# --------------------------------------------------------------------------

_FONT = {
    0: (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    1: ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    2: (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    3: (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    4: ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    5: ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    6: (".###.", "#....", "####.", "#...#", "#...#", "#...#", ".###."),
    7: ("#####", "....#", "...#.", "..#..", "..#..", ".#...", ".#..."),
    8: (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    9: (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}

#: style id -> (dilation passes, shear) crossing thickness with slant
STYLES = {0: (0, 0.0), 1: (0, 0.35), 2: (1, 0.0), 3: (1, 0.35)}

IMAGE_SIZE = 28


def _glyph(digit: int) -> np.ndarray:
    rows = _FONT[digit]
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


def render_digit(digit: int, style: int, rng: np.random.Generator) -> np.ndarray:
    """One uint8 28x28 image of ``digit`` drawn in ``style``."""
    if digit not in _FONT:
        raise DatasetError(f"digit {digit} out of range")
    if style not in STYLES:
        raise DatasetError(f"style {style} out of range")
    thick, shear = STYLES[style]

    glyph = np.kron(_glyph(digit), np.ones((3, 3), bool))  # 21x15
    for _ in range(thick):
        glyph = ndimage.binary_dilation(glyph)

    canvas = np.zeros((IMAGE_SIZE, IMAGE_SIZE), np.float64)
    top = 3 + rng.integers(-1, 2)
    left = 6 + rng.integers(-2, 3)
    canvas[top : top + glyph.shape[0], left : left + glyph.shape[1]] = glyph

    # shear x by y around the canvas centre, plus a subpixel jitter
    centre = (IMAGE_SIZE - 1) / 2
    matrix = np.array([[1.0, 0.0], [shear, 1.0]])
    offset = np.array([0.0, -shear * centre]) + rng.uniform(-0.5, 0.5, 2)
    canvas = ndimage.affine_transform(canvas, matrix, offset=offset, order=1)

    canvas = ndimage.gaussian_filter(canvas, sigma=rng.uniform(0.4, 0.7))
    canvas *= rng.uniform(0.75, 1.0) / max(canvas.max(), 1e-9)
    canvas += rng.normal(0.0, 0.02, canvas.shape)
    return (np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)


# --------------------------------------------------------------------------
# Dataset assembly
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledImages:
    """A batch of images with task labels and the private style attribute."""

    images: np.ndarray  # uint8 (N, 28, 28)
    labels: np.ndarray  # uint8 (N,) digit 0-9
    styles: np.ndarray  # uint8 (N,) style 0-3

    def __post_init__(self):
        n = len(self.images)
        if self.images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
            raise DatasetError(f"images must be (N, 28, 28), got {self.images.shape}")
        if self.labels.shape != (n,) or self.styles.shape != (n,):
            raise DatasetError("labels/styles must have one entry per image")

    def __len__(self) -> int:
        return len(self.images)


def synth_digits(n: int, seed: int) -> LabeledImages:
    """Generate ``n`` samples with digits and styles drawn uniformly."""
    if n <= 0:
        raise DatasetError("need a positive sample count")
    rng = np.random.Generator(np.random.Philox(seed))
    labels = rng.integers(0, 10, n).astype(np.uint8)
    styles = rng.integers(0, 4, n).astype(np.uint8)
    images = np.stack([render_digit(int(d), int(s), rng) for d, s in zip(labels, styles)])
    return LabeledImages(images, labels, styles)


def to_model_input(images: np.ndarray) -> np.ndarray:
    """uint8 (N, 28, 28) -> float32 (N, 1, 28, 28) scaled to [0, 1]."""
    return (images.astype(np.float32) / 255.0)[:, None, :, :]


_FILES = ("images", "labels", "styles")


def write_dataset(directory, train: LabeledImages, test: LabeledImages) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("test", test)):
        for field in _FILES:
            write_idx(directory / f"{name}-{field}.idx", getattr(part, field))


def load_dataset(directory) -> tuple[LabeledImages, LabeledImages]:
    directory = Path(directory)
    parts = []
    for name in ("train", "test"):
        arrays = {}
        for field in _FILES:
            path = directory / f"{name}-{field}.idx"
            if not path.exists():
                raise DatasetError(f"missing dataset file {path}")
            arrays[field] = read_idx(path)
        parts.append(LabeledImages(**arrays))
    return parts[0], parts[1]
