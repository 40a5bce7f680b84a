"""Order-preserving noise sampling for inference time.

Each stored distribution contributes fresh i.i.d. Laplace draws, but the
draws are *placed* so that the descending order of the sampled tensor's
elements reproduces the stored order of the learned tensor exactly.  The
largest draw lands where the learned tensor was largest, and so on —
every sampled tensor therefore argsorts to the stored permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collector import DistributionCollection, DistributionEntry
from .tensor import Tensor


class SamplerError(Exception):
    pass


def make_rng(seed: int | None) -> np.random.Generator:
    """Counter-based generator; a fixed seed fixes the whole draw stream."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SampledNoise:
    values: Tensor
    entry_index: int


def _distinct_laplace(rng: np.random.Generator, mu: float, b: float, n: int) -> np.ndarray:
    """n i.i.d. Laplace draws, re-drawing collisions so the float32 values
    are pairwise distinct (distinctness makes the placed order exact)."""
    vals = rng.laplace(mu, b, size=n).astype(np.float32)
    for _ in range(64):
        uniq, counts = np.unique(vals, return_counts=True)
        if uniq.size == n:
            return vals
        dupes = uniq[counts > 1]
        redraw = np.zeros(n, dtype=bool)
        for v in dupes:
            positions = np.flatnonzero(vals == v)
            redraw[positions[1:]] = True
        k = int(redraw.sum())
        vals[redraw] = rng.laplace(mu, b, size=k).astype(np.float32)
    raise SamplerError("could not draw pairwise-distinct noise values")


def sample_entry(entry: DistributionEntry, shape, rng: np.random.Generator) -> Tensor:
    """Sample one noise tensor from a single stored distribution."""
    p = entry.order.size
    draws = _distinct_laplace(rng, entry.params.mu, entry.params.b, p)
    ranked = np.sort(draws)[::-1]  # descending
    flat = np.empty(p, dtype=np.float32)
    flat[entry.order] = ranked  # k-th largest draw goes to flat index order[k]
    return Tensor(flat.reshape(shape))


def sample_noise(
    collection: DistributionCollection,
    rng: np.random.Generator,
    entry_index: int | None = None,
) -> SampledNoise:
    """Pick a stored distribution (uniformly unless pinned) and sample an
    order-preserving noise tensor from it."""
    if not collection.entries:
        raise SamplerError("collection has no entries")
    if entry_index is None:
        entry_index = int(rng.integers(0, len(collection.entries)))
    elif not 0 <= entry_index < len(collection.entries):
        raise SamplerError(f"entry index {entry_index} out of range")
    entry = collection.entries[entry_index]
    values = sample_entry(entry, collection.noise_shape, rng)
    return SampledNoise(values=values, entry_index=entry_index)


def add_noise(activation: Tensor, noise: SampledNoise) -> Tensor:
    """Elementwise float32 addition of the sampled noise to the activation."""
    values = noise.values if isinstance(noise, SampledNoise) else noise
    if activation.shape != values.shape:
        raise SamplerError(
            f"noise shape {values.shape} does not match activation {activation.shape}"
        )
    return Tensor(activation.array + values.array)
