"""Information and signal-strength measurements on sample matrices.

Two views of how private the transmitted activation is:

* in vivo  — one number per training step, the reciprocal of the
  signal-to-noise ratio at the cut (cheap, differentiable context);
* ex vivo  — a k-nearest-neighbour mutual-information estimate between
  the raw inputs and the (noisy) activations, in bits, measured offline
  on a sample matrix.

Both estimators use the max-norm.  Sample matrices are (N, D) float
arrays, one row per example, flattened activations as columns; no
dimensionality reduction is applied before estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import digamma

LN2 = math.log(2.0)

# joint dimensionality at or below which a k-d tree beats brute force
_TREE_DIM_LIMIT = 12
# row-chunk size for the brute-force pairwise distance sweep
_CHUNK = 256


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class MIEstimate:
    bits: float
    estimator: str
    k: int
    n_samples: int


def _prepare(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 1:
        raise MetricsError(f"{name} must be an (N, D) sample matrix with N >= 2")
    if not np.isfinite(arr).all():
        raise MetricsError(f"{name} contains non-finite values")
    return arr


def _jitter(arr: np.ndarray) -> np.ndarray:
    """Deterministic sub-resolution perturbation keyed to row index.

    Breaks exact duplicates (including zero-variance columns) without
    moving any point by more than ~1e-10 of its column's spread.
    """
    n, d = arr.shape
    rng = np.random.Generator(np.random.Philox(key=0x5EED_0F_11))
    noise = rng.standard_normal((n, d))
    scale = 1e-10 * np.maximum(arr.std(axis=0), 1.0)
    return arr + noise * scale


def _kth_distance_tree(z: np.ndarray, k: int) -> tuple[cKDTree, np.ndarray]:
    tree = cKDTree(z)
    dists, _ = tree.query(z, k=k + 1, p=np.inf)
    return tree, dists[:, k]


def _count_within_tree(z: np.ndarray, radii: np.ndarray) -> np.ndarray:
    tree = cKDTree(z)
    # strictly-inside count: shrink each radius to the next float toward 0
    shrunk = np.nextafter(radii, 0.0)
    counts = tree.query_ball_point(z, shrunk, p=np.inf, return_length=True)
    return np.asarray(counts) - 1  # drop the point itself


def _kth_distance_brute(z: np.ndarray, k: int) -> np.ndarray:
    n = z.shape[0]
    eps = np.empty(n)
    for start in range(0, n, _CHUNK):
        block = cdist(z[start : start + _CHUNK], z, metric="chebyshev")
        # row i's own zero distance occupies rank 0, so rank k is the
        # k-th neighbour
        eps[start : start + _CHUNK] = np.partition(block, k, axis=1)[:, k]
    return eps


def _count_within_brute(z: np.ndarray, radii: np.ndarray) -> np.ndarray:
    n = z.shape[0]
    counts = np.empty(n, dtype=np.int64)
    for start in range(0, n, _CHUNK):
        block = cdist(z[start : start + _CHUNK], z, metric="chebyshev")
        within = block < radii[start : start + _CHUNK, None]
        counts[start : start + _CHUNK] = within.sum(axis=1) - 1  # drop self
    return counts


def estimate_mi(x, y, k: int = 3) -> MIEstimate:
    """Mutual information I(x; y) in bits via the k-NN (KSG) estimator.

    Max-norm neighbourhoods in the joint space set per-point radii; the
    marginal spaces are then counted strictly inside those radii.  The
    raw estimate can dip slightly negative for independent data and is
    clamped at zero.
    """
    xa = _prepare(x, "x")
    ya = _prepare(y, "y")
    if xa.shape[0] != ya.shape[0]:
        raise MetricsError("x and y must have the same number of rows")
    n = xa.shape[0]
    if n <= k + 1:
        raise MetricsError(f"need more than k+1={k + 1} samples, got {n}")
    joint = _jitter(np.hstack([xa, ya]))
    xa, ya = joint[:, : xa.shape[1]], joint[:, xa.shape[1] :]
    if joint.shape[1] <= _TREE_DIM_LIMIT:
        _, eps = _kth_distance_tree(joint, k)
        nx = _count_within_tree(xa, eps)
        ny = _count_within_tree(ya, eps)
    else:
        eps = _kth_distance_brute(joint, k)
        nx = _count_within_brute(xa, eps)
        ny = _count_within_brute(ya, eps)
    nats = digamma(k) + digamma(n) - float(np.mean(digamma(nx + 1) + digamma(ny + 1)))
    return MIEstimate(bits=max(0.0, nats / LN2), estimator="ksg1", k=k, n_samples=n)


def estimate_entropy(x, k: int = 3) -> float:
    """Differential entropy in bits via the k-NN spacing estimator.

    With max-norm balls (volume ``(2 eps)^D``) the estimate is
    ``digamma(N) - digamma(k) + D * mean(log2(2 eps_k))``; additive in
    coordinate scaling, so doubling the data adds exactly D bits.
    """
    xa = _jitter(_prepare(x, "x"))
    n, d = xa.shape
    if n <= k + 1:
        raise MetricsError(f"need more than k+1={k + 1} samples, got {n}")
    if d <= _TREE_DIM_LIMIT:
        _, eps = _kth_distance_tree(xa, k)
    else:
        eps = _kth_distance_brute(xa, k)
    eps = np.maximum(eps, np.finfo(np.float64).tiny)
    nats = digamma(n) - digamma(k) + d * float(np.mean(np.log(2.0 * eps)))
    return nats / LN2


def snr(activations, noise_variance: float) -> float:
    """Mean squared activation over noise variance."""
    arr = np.asarray(activations, dtype=np.float64)
    if arr.size == 0:
        raise MetricsError("need at least one activation value")
    if not math.isfinite(noise_variance) or noise_variance <= 0:
        raise MetricsError("noise variance must be positive")
    return float(np.mean(arr * arr)) / noise_variance


def laplace_variance(b: float) -> float:
    if b <= 0:
        raise MetricsError("Laplace scale must be positive")
    return 2.0 * b * b


def surrogate_objective(b_y: float, b_w: float, lam: float, ce_sum: float) -> float:
    """Scale-based privacy proxy traded off against summed cross-entropy.

    Diagnostic only — the trainable loss uses the L1 multiplier, not this.
    """
    if b_y <= 0 or b_w <= 0:
        raise MetricsError("scales must be positive")
    return math.log(b_y + b_w) - math.log(b_w) + lam * ce_sum


# ---------------------------------------------------------------------------
# sample-matrix persistence (weights-container format, single tensor)
# ---------------------------------------------------------------------------


def save_sample_matrix(path, matrix) -> None:
    from .network import save_weights
    from .tensor import Tensor

    arr = np.asarray(matrix, dtype=np.float32)
    if arr.ndim != 2:
        raise MetricsError("sample matrix must be 2-D")
    save_weights(path, {"samples": Tensor(arr)})


def load_sample_matrix(path) -> np.ndarray:
    from .network import WeightsFormatError, load_weights

    tensors = load_weights(path)
    if "samples" not in tensors:
        raise WeightsFormatError("file does not contain a 'samples' tensor")
    return tensors["samples"].array
