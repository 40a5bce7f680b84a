#!/usr/bin/env python3
"""Build the desk-scale fixture artifacts used by the tests and the CLI
walkthrough: a synthetic digit dataset, trained reference-net weights, a
frozen private-style head, and device cost profiles.

Everything is seeded, so rerunning reproduces byte-identical files.  The
trainer here is an independent batched implementation (it needs weight
gradients, which the package's noise tape deliberately does not compute);
it cross-checks its forward pass against the package before training.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from splitnoise import datasets as D
from splitnoise import network as N
from splitnoise.tensor import Tensor, _conv_col_indices

# --------------------------------------------------------------------------
# batched layers with weight gradients (float64 throughout)
# --------------------------------------------------------------------------


def conv_forward(x, w, b, stride, pad):
    B = x.shape[0]
    f, c, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, OH, OW, k, k)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, oh * ow, c * k * k)
    y = cols @ w.reshape(f, -1).T + b
    return y.transpose(0, 2, 1).reshape(B, f, oh, ow), (cols, xp.shape[1:], x.shape)


def conv_backward(g, w, cache, stride, pad):
    cols, xp_shape, x_shape = cache
    B, f, oh, ow = g.shape
    k = w.shape[2]
    g2 = g.reshape(B, f, oh * ow).transpose(0, 2, 1)  # (B, P, F)
    dw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = g.sum(axis=(0, 2, 3))
    dcols = g2 @ w.reshape(f, -1)  # (B, P, C*k*k)
    idx = _conv_col_indices(xp_shape, k, stride)  # (C*k*k, P)
    dxp = np.zeros((B, int(np.prod(xp_shape))))
    np.add.at(dxp, (np.arange(B)[:, None, None], idx.T[None]), dcols)
    dxp = dxp.reshape((B,) + xp_shape)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dw, db, dxp


def pool_forward(x, k, stride):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    am = flat.argmax(-1)
    y = np.take_along_axis(flat, am[..., None], -1)[..., 0]
    return y, (am, x.shape)


def pool_backward(g, cache, k, stride):
    am, x_shape = cache
    B, C, oh, ow = g.shape
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = oy[None, None] * stride + am // k
    cols = ox[None, None] * stride + am % k
    dx = np.zeros(x_shape)
    bi = np.arange(B)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    np.add.at(dx, (bi, ci, rows, cols), g)
    return dx


def forward(layers, weights, x, caches=None):
    """Batched forward; pass a list as ``caches`` to record backward state."""
    for layer in layers:
        if layer.kind == "conv2d":
            x, cache = conv_forward(
                x, weights[layer.weight_name], weights[layer.bias_name],
                layer.stride, layer.padding,
            )
        elif layer.kind == "maxpool2d":
            x, cache = pool_forward(x, layer.kernel, layer.stride)
        elif layer.kind == "relu":
            cache = x
            x = np.maximum(x, 0.0)
        elif layer.kind == "flatten":
            cache = x.shape
            x = x.reshape(len(x), -1)
        elif layer.kind == "fc":
            cache = x
            x = x @ weights[layer.weight_name].T + weights[layer.bias_name]
        else:  # pragma: no cover - parser rejects unknown kinds
            raise ValueError(layer.kind)
        if caches is not None:
            caches.append(cache)
    return x


def backward(layers, weights, caches, g):
    grads = {}
    for layer, cache in zip(reversed(layers), reversed(caches)):
        if layer.kind == "conv2d":
            dw, db, g = conv_backward(g, weights[layer.weight_name], cache,
                                      layer.stride, layer.padding)
            grads[layer.weight_name], grads[layer.bias_name] = dw, db
        elif layer.kind == "maxpool2d":
            g = pool_backward(g, cache, layer.kernel, layer.stride)
        elif layer.kind == "relu":
            g = np.where(cache > 0, g, 0.0)
        elif layer.kind == "flatten":
            g = g.reshape(cache)
        elif layer.kind == "fc":
            grads[layer.weight_name] = g.T @ cache
            grads[layer.bias_name] = g.sum(axis=0)
            g = g @ weights[layer.weight_name]
    return grads


def softmax_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.log(p[np.arange(n), labels] + 1e-300).mean()
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


def he_init(net, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    weights = {}
    for name, shape in net.parameter_shapes().items():
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return weights


def sgd_train(layers, weights, x, y, *, epochs, batch, lr, momentum, seed, log=print):
    rng = np.random.Generator(np.random.Philox(seed))
    vel = {k: np.zeros_like(v) for k, v in weights.items()}
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            caches = []
            logits = forward(layers, weights, x[idx], caches)
            loss, dlogits = softmax_ce(logits, y[idx])
            losses.append(loss)
            grads = backward(layers, weights, caches, dlogits)
            for k, gk in grads.items():
                vel[k] = momentum * vel[k] - lr * gk
                weights[k] += vel[k]
        log(f"  epoch {epoch + 1}/{epochs}: mean loss {np.mean(losses):.4f}")
    return weights


def accuracy(layers, weights, x, y, batch=256):
    hits = 0
    for start in range(0, len(x), batch):
        logits = forward(layers, weights, x[start : start + batch])
        hits += int((logits.argmax(axis=1) == y[start : start + batch]).sum())
    return hits / len(x)


def cross_check(net, weights, x):
    """The batched forward must match the package's per-sample path."""
    f32 = {k: Tensor(v.astype(np.float32)) for k, v in weights.items()}
    batched = forward(net.layers, weights, x[:8])
    for i in range(8):
        single = N.full_forward(net, f32, Tensor(x[i].astype(np.float32)))
        if not np.allclose(batched[i], single.array, atol=1e-3):
            raise AssertionError("batched trainer disagrees with the package forward pass")


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

PROFILES = {
    # a slow edge device on a 250 kbit/s uplink: transmit cost matters
    "desk.txt": """\
bandwidth_bytes_per_s 31250
latency_ms 5
edge conv1 8.0
edge relu1 0.5
edge pool1 1.0
edge conv2 12.0
edge relu2 0.3
edge pool2 0.8
edge flat 0.05
edge fc1 2.5
edge relu3 0.05
edge fc2 0.6
edge relu4 0.03
edge fc3 0.2
cloud conv1 0.8
cloud relu1 0.05
cloud pool1 0.1
cloud conv2 1.2
cloud relu2 0.03
cloud pool2 0.08
cloud flat 0.005
cloud fc1 0.25
cloud relu3 0.005
cloud fc2 0.06
cloud relu4 0.003
cloud fc3 0.02
""",
    # gigabit link + weak edge: shipping the raw input would win if allowed
    "fast-link.txt": """\
bandwidth_bytes_per_s 1000000000
latency_ms 0.1
edge conv1 50.0
edge relu1 2.0
edge pool1 4.0
edge conv2 60.0
edge relu2 1.5
edge pool2 3.0
edge flat 0.2
edge fc1 12.0
edge relu3 0.2
edge fc2 3.0
edge relu4 0.1
edge fc3 1.0
cloud conv1 0.8
cloud relu1 0.05
cloud pool1 0.1
cloud conv2 1.2
cloud relu2 0.03
cloud pool2 0.08
cloud flat 0.005
cloud fc1 0.25
cloud relu3 0.005
cloud fc2 0.06
cloud relu4 0.003
cloud fc3 0.02
""",
    # 10 B/s uplink: only the smallest frames are affordable
    "starved.txt": """\
bandwidth_bytes_per_s 10
latency_ms 20
edge conv1 8.0
edge relu1 0.5
edge pool1 1.0
edge conv2 12.0
edge relu2 0.3
edge pool2 0.8
edge flat 0.05
edge fc1 2.5
edge relu3 0.05
edge fc2 0.6
edge relu4 0.03
edge fc3 0.2
cloud conv1 0.8
cloud relu1 0.05
cloud pool1 0.1
cloud conv2 1.2
cloud relu2 0.03
cloud pool2 0.08
cloud flat 0.005
cloud fc1 0.25
cloud relu3 0.005
cloud fc2 0.06
cloud relu4 0.003
cloud fc3 0.02
""",
}


def build(out: Path, train_size: int, test_size: int, epochs: int, seed: int,
          fit_size: int = 800) -> None:
    t0 = time.time()
    out.mkdir(parents=True, exist_ok=True)
    net = N.parse_network_spec(N.REFERENCE_SPEC)
    (out / "lenet.txt").write_text(N.render_network_spec(net))

    print(f"generating {train_size}+{test_size} synthetic digit images ...")
    train = D.synth_digits(train_size, seed=seed)
    test = D.synth_digits(test_size, seed=seed + 1)
    D.write_dataset(out / "dataset", train, test)

    x_train = D.to_model_input(train.images).astype(np.float64)[:, :, :, :]
    x_test = D.to_model_input(test.images).astype(np.float64)
    print(f"training the reference net on the first {fit_size} images ...")
    # Fit on a slice only: the frozen net must keep a live loss signal on the
    # rest of the corpus, which is where the noise learner operates.  A net
    # that memorizes the whole distribution gives the noise optimizer a flat
    # cross-entropy landscape and degenerate training dynamics.
    weights = he_init(net, seed + 2)
    cross_check(net, weights, x_train)
    weights = sgd_train(net.layers, weights, x_train[:fit_size],
                        train.labels.astype(int)[:fit_size],
                        epochs=epochs, batch=64, lr=0.05, momentum=0.9, seed=seed + 3)
    train_acc = accuracy(net.layers, weights, x_train[:fit_size], train.labels.astype(int)[:fit_size])
    test_acc = accuracy(net.layers, weights, x_test, test.labels.astype(int))
    print(f"  digit accuracy: fit-slice {train_acc:.4f}, test {test_acc:.4f}")
    if test_acc < 0.9:
        raise AssertionError(f"reference net too weak ({test_acc:.3f}); fixtures unusable")
    N.save_weights(out / "lenet.shrw", {k: Tensor(v.astype(np.float32)) for k, v in weights.items()})

    print("training the private style head on cut-6 activations ...")
    split = N.make_split(net, 6)
    acts = forward(split.edge_layers, weights, x_train)  # (N, 400)
    rms = float(np.sqrt(np.mean(acts**2)))
    head_layers = (
        N.LayerSpec(name="head1", kind="fc", features=64),
        N.LayerSpec(name="head_relu", kind="relu"),
        N.LayerSpec(name="head2", kind="fc", features=4),
    )
    rng = np.random.Generator(np.random.Philox(seed + 4))
    head = {
        "head1.weight": rng.normal(0.0, np.sqrt(2.0 / acts.shape[1]), (64, acts.shape[1])),
        "head1.bias": np.zeros(64),
        "head2.weight": rng.normal(0.0, np.sqrt(2.0 / 64), (4, 64)),
        "head2.bias": np.zeros(4),
    }
    # train on noise-augmented activations so the head stays informative
    # in the regime the noise learner explores
    aug_scales = np.array([0.0, 0.25, 0.5, 1.0]) * rms
    x_aug = np.concatenate(
        [acts + rng.laplace(0.0, s, acts.shape) if s else acts for s in aug_scales]
    )
    y_aug = np.tile(train.styles.astype(int), len(aug_scales))
    head = sgd_train(head_layers, head, x_aug, y_aug,
                     epochs=max(2, epochs // 2), batch=128, lr=0.02, momentum=0.9,
                     seed=seed + 5)
    style_acc = accuracy(head_layers, head, acts, train.styles.astype(int))
    print(f"  style accuracy on clean activations: {style_acc:.4f}")
    N.save_weights(out / "head.shrw", {k: Tensor(v.astype(np.float32)) for k, v in head.items()})

    profile_dir = out / "profiles"
    profile_dir.mkdir(exist_ok=True)
    for name, text in PROFILES.items():
        (profile_dir / name).write_text(text)

    lines = [f"seed {seed}", f"train {train_size}", f"test {test_size}",
             f"epochs {epochs}", f"fit {fit_size}"]
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "MANIFEST.txt"):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.relative_to(out)}")
    (out / "MANIFEST.txt").write_text("\n".join(lines) + "\n")
    print(f"done in {time.time() - t0:.1f}s -> {out}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "fixtures")
    ap.add_argument("--train-size", type=int, default=9000)
    ap.add_argument("--test-size", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--fit-size", type=int, default=800,
                    help="number of leading train images the net is fitted on")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    build(args.out, args.train_size, args.test_size, args.epochs, args.seed,
          fit_size=args.fit_size)
    return 0


if __name__ == "__main__":
    sys.exit(main())
