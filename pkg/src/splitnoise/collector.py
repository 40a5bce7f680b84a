"""Fitting learned noise tensors to Laplace distributions and storing them.

A trained noise tensor is reduced to (mu, b) by maximum likelihood, gated
by the squared error between its density histogram and the fitted density,
and kept together with the descending order of its elements.  That order
is what lets inference-time sampling reproduce the *structure* of the
learned tensor without ever persisting the tensor itself.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np
from scipy import stats

from .tensor import Tensor

COLLECTION_MAGIC = b"SHRC"
COLLECTION_VERSION = 1

DEFAULT_SSE_THRESHOLD = 0.05
DEFAULT_SSE_BINS = 50


class CollectorError(Exception):
    pass


class ConstantTensorError(CollectorError):
    """All elements equal: no spread to fit."""


class CollectionFormatError(CollectorError):
    pass


class CollectionMismatchError(CollectorError):
    """Collection was produced for a different network or cut."""


@dataclass(frozen=True)
class LaplaceParams:
    mu: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.b)) or self.b <= 0:
            raise CollectorError(f"bad Laplace parameters mu={self.mu}, b={self.b}")


@dataclass(frozen=True)
class Rejection:
    """Why a candidate was not collected."""

    reason: str
    sse: float


@dataclass(frozen=True)
class DistributionEntry:
    params: LaplaceParams
    order: np.ndarray  # descending argsort of the learned tensor, uint32
    accuracy: float
    sse: float
    seed: int
    accuracy_ci: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        order = np.ascontiguousarray(self.order, dtype=np.uint32)
        order.setflags(write=False)
        object.__setattr__(self, "order", order)
        sorted_order = np.sort(order)
        if not np.array_equal(sorted_order, np.arange(order.size, dtype=np.uint32)):
            raise CollectorError("order is not a permutation of 0..P-1")


@dataclass
class DistributionCollection:
    network_hash: bytes
    cut_index: int
    noise_shape: tuple[int, ...]
    entries: list[DistributionEntry] = field(default_factory=list)

    def __post_init__(self):
        if len(self.network_hash) != 32:
            raise CollectorError("network hash must be 32 bytes")
        self.noise_shape = tuple(int(e) for e in self.noise_shape)

    @property
    def numel(self) -> int:
        return int(np.prod(self.noise_shape))

    def append(self, entry: DistributionEntry) -> None:
        if entry.order.size != self.numel:
            raise CollectorError(
                f"entry order has {entry.order.size} elements, noise shape "
                f"{self.noise_shape} needs {self.numel}"
            )
        self.entries.append(entry)

    def check_compatible(self, network_hash: bytes, cut_index: int, noise_shape) -> None:
        if self.network_hash != network_hash:
            raise CollectionMismatchError("collection was trained on a different network")
        if self.cut_index != cut_index:
            raise CollectionMismatchError(
                f"collection was trained at cut {self.cut_index}, not {cut_index}"
            )
        if self.noise_shape != tuple(noise_shape):
            raise CollectionMismatchError(
                f"collection noise shape {self.noise_shape} != split "
                f"activation shape {tuple(noise_shape)}"
            )


# ---------------------------------------------------------------------------
# fitting and gating
# ---------------------------------------------------------------------------


def fit_laplace(noise: Tensor) -> LaplaceParams:
    """Maximum-likelihood Laplace fit: location = median, scale = mean
    absolute deviation from the median."""
    flat = noise.flat.astype(np.float64)
    mu = float(np.median(flat))
    b = float(np.mean(np.abs(flat - mu)))
    if b <= 0.0:
        raise ConstantTensorError("all noise elements are equal; cannot fit a scale")
    return LaplaceParams(mu=mu, b=b)


def histogram_sse(noise: Tensor, params: LaplaceParams, bins: int = DEFAULT_SSE_BINS) -> float:
    """Squared error between the sample's density histogram and the fitted
    Laplace density, both over ``bins`` equal-width bins spanning the
    sample's [min, max]."""
    flat = noise.flat.astype(np.float64)
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        raise ConstantTensorError("all noise elements are equal; histogram is degenerate")
    observed, edges = np.histogram(flat, bins=bins, range=(lo, hi), density=True)
    cdf = stats.laplace.cdf(edges, loc=params.mu, scale=params.b)
    width = edges[1] - edges[0]
    fitted = np.diff(cdf) / width
    return float(np.sum((observed - fitted) ** 2))


def descending_order(noise: Tensor) -> np.ndarray:
    """Flat indices of elements from largest to smallest.

    Equal elements keep ascending flat-index order among themselves, so
    the result is deterministic.
    """
    flat = noise.flat
    return np.argsort(-flat, kind="stable").astype(np.uint32)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% binomial confidence interval (Wilson score)."""
    if n <= 0:
        raise CollectorError("interval needs at least one trial")
    phat = successes / n
    denom = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def try_collect(
    noise: Tensor,
    accuracy: float,
    *,
    seed: int,
    sse_threshold: float = DEFAULT_SSE_THRESHOLD,
    bins: int = DEFAULT_SSE_BINS,
    holdout_n: int | None = None,
) -> DistributionEntry | Rejection:
    """Fit the candidate and accept it if the histogram SSE is within the
    threshold; otherwise report the rejection."""
    params = fit_laplace(noise)
    sse = histogram_sse(noise, params, bins=bins)
    if sse > sse_threshold:
        return Rejection(reason=f"histogram SSE {sse:.4f} above threshold {sse_threshold}", sse=sse)
    if holdout_n:
        ci = wilson_interval(round(accuracy * holdout_n), holdout_n)
    else:
        ci = (0.0, 1.0)
    return DistributionEntry(
        params=params,
        order=descending_order(noise),
        accuracy=float(accuracy),
        sse=sse,
        seed=int(seed),
        accuracy_ci=ci,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_collection(path, collection: DistributionCollection) -> None:
    with open(path, "wb") as fh:
        write_collection(fh, collection)


def write_collection(fh: BinaryIO, collection: DistributionCollection) -> None:
    if len(collection.entries) > 0xFFFF:
        raise CollectionFormatError("too many entries for the file format")
    fh.write(COLLECTION_MAGIC)
    fh.write(struct.pack("<B", COLLECTION_VERSION))
    fh.write(collection.network_hash)
    fh.write(struct.pack("<I", collection.cut_index))
    rank = len(collection.noise_shape)
    fh.write(struct.pack("<B", rank))
    fh.write(struct.pack(f"<{rank}I", *collection.noise_shape))
    fh.write(struct.pack("<H", len(collection.entries)))
    for entry in collection.entries:
        fh.write(struct.pack("<dddd", entry.params.mu, entry.params.b, entry.accuracy, entry.sse))
        fh.write(entry.order.astype("<u4", copy=False).tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CollectionFormatError(f"truncated collection file while reading {what}")
    return data


def load_collection(
    path,
    *,
    expect_hash: bytes | None = None,
    expect_cut: int | None = None,
    expect_shape=None,
) -> DistributionCollection:
    with open(path, "rb") as fh:
        collection = read_collection(fh)
    if expect_hash is not None and collection.network_hash != expect_hash:
        raise CollectionMismatchError("collection was trained on a different network")
    if expect_cut is not None and collection.cut_index != expect_cut:
        raise CollectionMismatchError(
            f"collection was trained at cut {collection.cut_index}, not {expect_cut}"
        )
    if expect_shape is not None and collection.noise_shape != tuple(expect_shape):
        raise CollectionMismatchError("collection noise shape does not match the split")
    return collection


def read_collection(fh: BinaryIO) -> DistributionCollection:
    if _read_exact(fh, 4, "magic") != COLLECTION_MAGIC:
        raise CollectionFormatError("not a collection file (bad magic)")
    (version,) = struct.unpack("<B", _read_exact(fh, 1, "version"))
    if version != COLLECTION_VERSION:
        raise CollectionFormatError(f"unsupported collection version {version}")
    network_hash = _read_exact(fh, 32, "network hash")
    (cut_index,) = struct.unpack("<I", _read_exact(fh, 4, "cut index"))
    (rank,) = struct.unpack("<B", _read_exact(fh, 1, "noise rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "noise shape"))
    (count,) = struct.unpack("<H", _read_exact(fh, 2, "entry count"))
    numel = int(np.prod(shape))
    collection = DistributionCollection(
        network_hash=network_hash, cut_index=cut_index, noise_shape=shape
    )
    for i in range(count):
        mu, b, accuracy, sse = struct.unpack("<dddd", _read_exact(fh, 32, f"entry {i} params"))
        order = np.frombuffer(
            _read_exact(fh, 4 * numel, f"entry {i} order"), dtype="<u4"
        ).copy()
        collection.append(
            DistributionEntry(
                params=LaplaceParams(mu=mu, b=b),
                order=order,
                accuracy=accuracy,
                sse=sse,
                seed=0,
            )
        )
    if fh.read(1):
        raise CollectionFormatError("trailing bytes after final entry")
    return collection
