"""Gradient learning of the additive noise tensor.

The network weights are frozen throughout: every step builds a small tape
from the noise leaf through the cloud partition only, so gradients flow
into the noise and nowhere else.  The loss rewards large noise through a
decaying L1 bonus while cross-entropy pulls accuracy back up; a hold-out
gate decides when the current tensor is good enough to hand to the
distribution collector, and each accepted tensor restarts the search from
a fresh seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .collector import (
    DEFAULT_SSE_BINS,
    DEFAULT_SSE_THRESHOLD,
    DistributionCollection,
    DistributionEntry,
    Rejection,
    try_collect,
)
from .network import LayerSpec, Split, run_edge
from .tensor import Tensor, TensorError


class NoiseLearningError(Exception):
    """Raised when a learning round cannot produce an acceptable tensor."""


# --------------------------------------------------------------------------
# configuration and optimizer state
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0001        # L1 weight at iteration 0 (>0 grows noise, 0 = plain CE,
                                 # <0 penalizes magnitude, shrinking from a large init);
                                 # kept gentle by default so the drift it adds does not
                                 # pull the tensor off the Laplace shape the fit gate checks
    gamma: float = 0.0           # private-head loss weight (0 = off)
    learning_rate: float = 0.01
    alpha_decay: float = 0.1     # multiplier applied every alpha_period steps
    alpha_period: int = 500
    batch_size: int = 4
    init_scale: float = 1.5      # Laplace b of the starting noise; sized so that
                                 # accepted entries land where sampled noise still
                                 # preserves cloud-side accuracy at inference time
    epsilon: float = 0.02        # tolerated hold-out accuracy drop
    holdout_fraction: float = 0.1
    seed: int = 0
    target_entries: int = 20
    eval_every: int = 100
    max_round_iters: int = 3000
    round_retries: int = 8       # fresh starting draws per round before giving up; the
                                 # first attempt always uses the round's canonical seed,
                                 # so retrying never changes a run that succeeds without it
    sse_threshold: float = DEFAULT_SSE_THRESHOLD
    sse_bins: int = DEFAULT_SSE_BINS

    def __post_init__(self):
        checks = [
            (np.isfinite(self.alpha), "alpha must be finite"),
            (self.gamma >= 0.0, "gamma must be >= 0"),
            (self.learning_rate > 0.0, "learning rate must be positive"),
            (0.0 < self.alpha_decay <= 1.0, "alpha decay must be in (0, 1]"),
            (self.alpha_period >= 1, "alpha period must be >= 1"),
            (self.batch_size >= 1, "batch size must be >= 1"),
            (self.init_scale > 0.0, "init noise scale must be positive"),
            (self.epsilon >= 0.0, "epsilon must be >= 0"),
            (0.0 < self.holdout_fraction <= 0.5, "holdout fraction must be in (0, 0.5]"),
            (self.target_entries >= 1, "target collection size must be >= 1"),
            (self.eval_every >= 1, "eval interval must be >= 1"),
            (self.max_round_iters >= self.eval_every, "round budget below eval interval"),
            (self.round_retries >= 1, "round retries must be at least 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise NoiseLearningError(msg)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape, np.float64), v=np.zeros(shape, np.float64))

    def apply(self, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """One minimization step; mutates the moment buffers."""
        if self.m.shape != values.shape:
            raise T.ShapeError("adam", self.m.shape, values.shape)
        g = grad.astype(np.float64)
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mhat = self.m / (1.0 - self.beta1**self.step)
        vhat = self.v / (1.0 - self.beta2**self.step)
        out = values.astype(np.float64) - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out.astype(np.float32)


def alpha_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise NoiseLearningError("iteration must be >= 0")
    return cfg.alpha * cfg.alpha_decay ** (iteration // cfg.alpha_period)


def init_noise(shape, b0: float, seed: int) -> Tensor:
    if b0 <= 0.0:
        raise NoiseLearningError("init noise scale must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    return Tensor(rng.laplace(0.0, b0, shape).astype(np.float32))


# --------------------------------------------------------------------------
# loss values (scalar helpers mirroring what the tape computes)
# --------------------------------------------------------------------------


def loss_no_private(logits: Tensor, label: int, noise: Tensor, alpha: float) -> float:
    return T.cross_entropy(logits, label) - alpha * float(np.abs(noise.flat, dtype=np.float64).sum())


def loss_private(
    primary_logits: Tensor,
    primary_label: int,
    private_logits: Tensor,
    private_label: int,
    noise: Tensor,
    alpha: float,
    gamma: float,
) -> float:
    ce_p = T.cross_entropy(primary_logits, primary_label)
    ce_s = T.cross_entropy(private_logits, private_label)
    return ce_p - gamma * ce_s - alpha * float(np.abs(noise.flat, dtype=np.float64).sum())


# --------------------------------------------------------------------------
# private head: a small frozen classifier on the noisy activation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PrivateHead:
    """Frozen flatten->fc->relu->fc classifier used by the private loss."""

    layers: tuple[LayerSpec, ...]
    weights: Mapping[str, Tensor]
    num_classes: int

    @classmethod
    def from_weights(cls, weights: Mapping[str, Tensor], activation_shape) -> "PrivateHead":
        for name in ("head1.weight", "head1.bias", "head2.weight", "head2.bias"):
            if name not in weights:
                raise NoiseLearningError(f"private head weights missing tensor '{name}'")
        w1, w2 = weights["head1.weight"], weights["head2.weight"]
        n_in = int(np.prod(activation_shape))
        if w1.shape[1] != n_in:
            raise T.ShapeError("private head input", (w1.shape[0], n_in), w1.shape)
        if w2.shape[1] != w1.shape[0]:
            raise T.ShapeError("private head hidden", (w2.shape[0], w1.shape[0]), w2.shape)
        layers = (
            LayerSpec(name="head_flat", kind="flatten"),
            LayerSpec(name="head1", kind="fc", features=int(w1.shape[0])),
            LayerSpec(name="head_relu", kind="relu"),
            LayerSpec(name="head2", kind="fc", features=int(w2.shape[0])),
        )
        return cls(layers=layers, weights=dict(weights), num_classes=int(w2.shape[0]))


# --------------------------------------------------------------------------
# datasets of cut-point activations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseDataset:
    """Cut-point activations with task labels (and optional private labels).

    Caching activations is sound because the edge partition is as frozen as
    the cloud one; recomputing it every step would change nothing.
    """

    activations: np.ndarray  # float32 (N, *activation_shape)
    labels: np.ndarray       # (N,) int
    styles: np.ndarray | None = None

    def __post_init__(self):
        if len(self.activations) == 0:
            raise NoiseLearningError("dataset is empty")
        if self.labels.shape != (len(self.activations),):
            raise NoiseLearningError("one label per activation required")
        if self.styles is not None and self.styles.shape != self.labels.shape:
            raise NoiseLearningError("one private label per activation required")

    def __len__(self) -> int:
        return len(self.activations)

    @property
    def activation_shape(self) -> tuple[int, ...]:
        return self.activations.shape[1:]

    def subset(self, idx: np.ndarray) -> "NoiseDataset":
        return NoiseDataset(
            self.activations[idx],
            self.labels[idx],
            None if self.styles is None else self.styles[idx],
        )

    def split_holdout(self, fraction: float, seed: int) -> tuple["NoiseDataset", "NoiseDataset"]:
        if not 0.0 < fraction <= 0.5:
            raise NoiseLearningError("holdout fraction must be in (0, 0.5]")
        n = len(self)
        n_hold = max(1, int(round(n * fraction)))
        if n_hold >= n:
            raise NoiseLearningError("dataset too small to split a holdout")
        perm = np.random.Generator(np.random.Philox(seed)).permutation(n)
        return self.subset(perm[n_hold:]), self.subset(perm[:n_hold])


def precompute_activations(
    split: Split,
    weights: Mapping[str, Tensor],
    inputs: np.ndarray,
    labels: np.ndarray,
    styles: np.ndarray | None = None,
) -> NoiseDataset:
    """Run the edge partition once over ``inputs`` (float32 (N, C, H, W))."""
    acts = np.stack([run_edge(split, weights, Tensor(x)).array for x in inputs])
    return NoiseDataset(acts, np.asarray(labels), None if styles is None else np.asarray(styles))


# --------------------------------------------------------------------------
# one optimizer step
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepMetrics:
    loss: float
    ce: float
    ce_private: float | None
    l1: float
    alpha: float
    inv_snr: float
    accuracy: float


def _as_activation(split: Split, weights: Mapping[str, Tensor], x) -> np.ndarray:
    arr = x.array if isinstance(x, Tensor) else np.asarray(x, np.float32)
    if arr.shape == split.activation_shape:
        return arr
    if arr.shape == split.net.input_shape:
        return run_edge(split, weights, Tensor(arr)).array
    raise T.ShapeError("train batch input", split.activation_shape, arr.shape)


def train_step(
    split: Split,
    weights: Mapping[str, Tensor],
    noise: Tensor,
    batch: Sequence[tuple],
    cfg: TrainConfig,
    adam: AdamState,
    private_head: PrivateHead | None = None,
) -> tuple[Tensor, StepMetrics]:
    """One Adam update of the noise from a batch of (input, label[, private])
    samples; inputs may be raw model inputs or precomputed activations."""
    if len(batch) == 0:
        raise NoiseLearningError("empty batch")
    if noise.shape != split.activation_shape:
        raise T.ShapeError("noise", split.activation_shape, noise.shape)
    use_private = private_head is not None and cfg.gamma > 0.0
    alpha = alpha_at(adam.step, cfg)
    inv_b = 1.0 / len(batch)

    noise_node = T.leaf(noise.array)
    ce_total = None
    priv_total = None
    correct = 0
    signal_power = 0.0
    try:
        for item in batch:
            x, label = item[0], int(item[1])
            a = _as_activation(split, weights, x)
            signal_power += float(np.mean(a.astype(np.float64) ** 2)) * inv_b
            noisy = T.add(noise_node, T.constant(a))
            logits = T.apply_layers_node(split.cloud_layers, noisy, weights)
            correct += int(np.argmax(logits.value) == label)
            ce = T.cross_entropy_node(logits, label)
            ce_total = ce if ce_total is None else T.add(ce_total, ce)
            if use_private:
                if len(item) < 3:
                    raise NoiseLearningError("private training needs a private label per sample")
                plogits = T.apply_layers_node(private_head.layers, noisy, private_head.weights)
                pce = T.cross_entropy_node(plogits, int(item[2]))
                priv_total = pce if priv_total is None else T.add(priv_total, pce)

        loss = T.scale(ce_total, inv_b)
        if priv_total is not None:
            loss = T.add(loss, T.scale(priv_total, -cfg.gamma * inv_b))
        l1_node = T.l1_norm(noise_node)
        loss = T.add(loss, T.scale(l1_node, -alpha))
        T.backward(loss)
    except TensorError as exc:
        raise NoiseLearningError(
            f"step {adam.step} diverged (alpha={alpha:g}, "
            f"|n| max={np.abs(noise.array).max():g}): {exc}"
        ) from exc

    new_values = adam.apply(noise.array, noise_node.grad, cfg.learning_rate)
    noise_var = float(np.var(noise.array.astype(np.float64)))
    metrics = StepMetrics(
        loss=float(loss.value),
        ce=float(ce_total.value) * inv_b,
        ce_private=None if priv_total is None else float(priv_total.value) * inv_b,
        l1=float(l1_node.value),
        alpha=alpha,
        inv_snr=noise_var / max(signal_power, 1e-30),
        accuracy=correct * inv_b,
    )
    return Tensor(new_values), metrics


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def holdout_accuracy(
    split: Split,
    weights: Mapping[str, Tensor],
    noise: Tensor | None,
    holdout: NoiseDataset,
) -> float:
    """Top-1 accuracy over the holdout with a fixed noise added at the cut
    (``None`` means clean inference)."""
    if holdout.activation_shape != split.activation_shape:
        raise T.ShapeError("holdout activations", split.activation_shape, holdout.activation_shape)
    offset = np.zeros(split.activation_shape, np.float32) if noise is None else noise.array
    correct = 0
    for a, label in zip(holdout.activations, holdout.labels):
        logits = T.forward_layers(split.cloud_layers, Tensor(a + offset), weights)
        correct += int(np.argmax(logits.array) == int(label))
    return correct / len(holdout)


# --------------------------------------------------------------------------
# the collection loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    """One gate-passing tensor and what the collector decided about it."""

    round_index: int
    iteration: int
    noise: Tensor
    accuracy: float
    outcome: DistributionEntry | Rejection
    seed: int


def round_seed(base_seed: int, round_index: int) -> int:
    return int(np.random.SeedSequence((base_seed, round_index)).generate_state(1)[0])


def attempt_seed(base_seed: int, round_index: int, attempt: int) -> int:
    """Seed of one training attempt; attempt 0 is the round's canonical seed."""
    if attempt == 0:
        return round_seed(base_seed, round_index)
    return int(
        np.random.SeedSequence((base_seed, round_index, attempt)).generate_state(1)[0]
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def _batch_items(train: NoiseDataset, idx: np.ndarray, with_styles: bool) -> list[tuple]:
    if with_styles:
        return [
            (train.activations[i], int(train.labels[i]), int(train.styles[i])) for i in idx
        ]
    return [(train.activations[i], int(train.labels[i])) for i in idx]


def train_noise(
    split: Split,
    weights: Mapping[str, Tensor],
    dataset: NoiseDataset,
    cfg: TrainConfig,
    collection: DistributionCollection,
    private_head: PrivateHead | None = None,
    start_round: int | None = None,
) -> Iterator[Candidate]:
    """Yield every gate-passing candidate until the collection holds
    ``cfg.target_entries`` accepted distributions.

    The hold-out gate passes when accuracy stays within ``cfg.epsilon`` of
    the clean baseline; the collector then accepts or rejects the fit.  An
    acceptance ends the round and the next one restarts from fresh noise
    with a fresh seed.  A round whose attempt exhausts its iteration budget
    (an unlucky starting draw can leave the fit gate unreachable) retries
    from a fresh derived seed up to ``cfg.round_retries`` attempts, then
    raises ``NoiseLearningError`` with a progress report.

    Rounds are independent given the base seed, so callers may run them
    in parallel: ``start_round`` pins the first round index, and entries
    produced for rounds k, k+1, ... merge deterministically by index.
    """
    if collection.noise_shape != split.activation_shape:
        raise NoiseLearningError(
            f"collection shape {collection.noise_shape} != split activation "
            f"shape {split.activation_shape}"
        )
    use_private = private_head is not None and cfg.gamma > 0.0
    if use_private and dataset.styles is None:
        raise NoiseLearningError("private training needs a dataset with private labels")

    train, holdout = dataset.split_holdout(cfg.holdout_fraction, cfg.seed)
    baseline = holdout_accuracy(split, weights, None, holdout)

    round_index = len(collection.entries) if start_round is None else start_round
    while len(collection.entries) < cfg.target_entries:
        best_acc = -1.0
        last_rejection: Rejection | None = None
        accepted = False

        for attempt in range(cfg.round_retries):
            seed = attempt_seed(cfg.seed, round_index, attempt)
            rng = np.random.Generator(np.random.Philox(seed))
            noise = init_noise(split.activation_shape, cfg.init_scale, seed)
            adam = AdamState.zeros(split.activation_shape)

            for idx in _batches(len(train), cfg.batch_size, rng):
                noise, _ = train_step(
                    split, weights, noise, _batch_items(train, idx, use_private),
                    cfg, adam, private_head,
                )
                if adam.step % cfg.eval_every == 0:
                    acc = holdout_accuracy(split, weights, noise, holdout)
                    best_acc = max(best_acc, acc)
                    if acc >= baseline - cfg.epsilon:
                        outcome = try_collect(
                            noise, acc, seed=seed,
                            sse_threshold=cfg.sse_threshold, bins=cfg.sse_bins,
                            holdout_n=len(holdout),
                        )
                        if isinstance(outcome, DistributionEntry):
                            collection.append(outcome)
                            accepted = True
                        else:
                            last_rejection = outcome
                        yield Candidate(round_index, adam.step, noise, acc, outcome, seed)
                        if accepted:
                            break
                if adam.step >= cfg.max_round_iters:
                    break
            if accepted:
                break

        if not accepted:
            detail = f"; last fit rejection: {last_rejection.reason}" if last_rejection else ""
            raise NoiseLearningError(
                f"round {round_index} found no acceptable tensor in "
                f"{cfg.round_retries} attempt(s) of {cfg.max_round_iters} iterations "
                f"(best holdout accuracy {best_acc:.4f} vs baseline {baseline:.4f}, "
                f"epsilon {cfg.epsilon}){detail}"
            )
        round_index += 1


# --------------------------------------------------------------------------
# ungated learning curve (for trend checks and plots)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    iteration: int
    accuracy: float
    inv_snr: float
    noise_l1: float


def learning_curve(
    split: Split,
    weights: Mapping[str, Tensor],
    dataset: NoiseDataset,
    cfg: TrainConfig,
    iterations: int,
    record_every: int = 100,
) -> list[CurvePoint]:
    """Train one round without any gating, recording hold-out accuracy and
    the 1/SNR privacy proxy (noise variance over mean squared holdout
    activation) at a fixed cadence."""
    train, holdout = dataset.split_holdout(cfg.holdout_fraction, cfg.seed)
    signal_power = float(np.mean(holdout.activations.astype(np.float64) ** 2))
    seed = round_seed(cfg.seed, 0)
    rng = np.random.Generator(np.random.Philox(seed))
    noise = init_noise(split.activation_shape, cfg.init_scale, seed)
    adam = AdamState.zeros(split.activation_shape)

    def point() -> CurvePoint:
        values = noise.array.astype(np.float64)
        return CurvePoint(
            iteration=adam.step,
            accuracy=holdout_accuracy(split, weights, noise, holdout),
            inv_snr=float(np.var(values)) / signal_power,
            noise_l1=float(np.abs(values).sum()),
        )

    points = [point()]
    for idx in _batches(len(train), cfg.batch_size, rng):
        noise, _ = train_step(split, weights, noise, _batch_items(train, idx, False), cfg, adam)
        if adam.step % record_every == 0:
            points.append(point())
        if adam.step >= iterations:
            break
    return points
