"""Dense float32 tensors and a minimal reverse-mode tape.

Implements exactly the layer set needed to evaluate one frozen
convolutional classifier and to differentiate a scalar loss with respect
to an additive perturbation injected between two halves of the network:
``conv2d``, ``fc``, ``relu``, ``maxpool2d``, ``flatten``, plus
cross-entropy and the scalar arithmetic the noise losses are built from.

Parameters are constants on the tape: gradients only ever flow to layer
*inputs*, so nothing in this module can train network weights.  Values
are stored as float32; reductions (matrix products, log-sum-exp, L1)
accumulate in float64 before rounding back.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32


class TensorError(Exception):
    """Base class for tensor and tape failures."""


class ShapeError(TensorError):
    """An operand's shape does not match what an op requires."""

    def __init__(self, where: str, expected, got):
        self.where = where
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"{where}: expected shape {self.expected}, got {self.got}")


class NonFiniteError(TensorError):
    """A produced value contains NaN or Inf."""


class Tensor:
    """Immutable dense float32 array with strictly positive extents."""

    __slots__ = ("array",)

    def __init__(self, values):
        arr = np.array(values, dtype=DTYPE, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise TensorError("tensor extents must all be positive")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def flat(self) -> np.ndarray:
        """Row-major 1-D read-only view of the payload."""
        return self.array.reshape(-1)

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=DTYPE))

    @staticmethod
    def full(shape, value: float) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=DTYPE))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape})"


def _as_f32(arr: np.ndarray) -> np.ndarray:
    # np.asarray keeps 0-d scalars 0-d (ascontiguousarray would promote them)
    out = np.asarray(arr, dtype=DTYPE, order="C")
    if not np.isfinite(out).all():
        raise NonFiniteError("op produced NaN or Inf")
    return out


# ---------------------------------------------------------------------------
# layer kernels (plain ndarray in / ndarray out, shared by both eval paths)
# ---------------------------------------------------------------------------


def _conv_cols(xp: np.ndarray, kernel: int, stride: int):
    """im2col for a padded (C, Hp, Wp) input.

    Returns the column matrix (C*k*k, OH*OW) and the flat source indices
    of each column entry inside the padded input, used to scatter
    gradients back.
    """
    c, hp, wp = xp.shape
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, OH, OW, k, k)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kernel * kernel, oh * ow)
    return cols, (oh, ow)


def _conv_col_indices(shape_padded, kernel: int, stride: int) -> np.ndarray:
    """Flat padded-input index of every im2col entry, shape (C*k*k, OH*OW)."""
    c, hp, wp = shape_padded
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    ci, ki, kj = np.meshgrid(
        np.arange(c), np.arange(kernel), np.arange(kernel), indexing="ij"
    )
    row = (ci * hp + ki) * wp + kj  # (C, k, k) origin offsets
    oy, ox = np.meshgrid(np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij")
    col = oy.reshape(-1) * wp + ox.reshape(-1)  # (OH*OW,)
    return row.reshape(-1, 1) + col.reshape(1, -1)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int):
    """Cross-correlation of one (C, H, W) input with (F, C, k, k) filters.

    Returns ``(y, cols)`` where ``cols`` is the im2col matrix kept for the
    backward pass.
    """
    f, c, kh, kw = w.shape
    if x.ndim != 3 or x.shape[0] != c:
        raise ShapeError("conv2d input", (c, "H", "W"), x.shape)
    if kh != kw:
        raise TensorError("conv2d kernels must be square")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError("conv2d input (kernel too large)", (c, kh, kw), x.shape)
    cols, (oh, ow) = _conv_cols(xp.astype(np.float64, copy=False), kh, stride)
    wmat = w.reshape(f, -1).astype(np.float64, copy=False)
    y = wmat @ cols + b.astype(np.float64, copy=False).reshape(f, 1)
    return _as_f32(y.reshape(f, oh, ow)), cols


def conv2d_backward(
    g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int
) -> np.ndarray:
    """Gradient w.r.t. the conv2d input (weights are frozen constants)."""
    f = w.shape[0]
    kernel = w.shape[2]
    c, h, wd = x_shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    gmat = g.reshape(f, -1).astype(np.float64, copy=False)
    wmat = w.reshape(f, -1).astype(np.float64, copy=False)
    gcols = wmat.T @ gmat  # (C*k*k, OH*OW)
    dxp = np.zeros(c * hp * wp, dtype=np.float64)
    idx = _conv_col_indices((c, hp, wp), kernel, stride)
    np.add.at(dxp, idx.reshape(-1), gcols.reshape(-1))
    dxp = dxp.reshape(c, hp, wp)
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding]
    return _as_f32(dxp)


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 1 or x.shape[0] != w.shape[1]:
        raise ShapeError("fc input", (w.shape[1],), x.shape)
    y = w.astype(np.float64, copy=False) @ x.astype(np.float64, copy=False)
    return _as_f32(y + b.astype(np.float64, copy=False))


def fc_backward(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _as_f32(w.astype(np.float64, copy=False).T @ g.astype(np.float64, copy=False))


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0))


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, g, DTYPE(0))


def maxpool2d_forward(x: np.ndarray, kernel: int, stride: int):
    """Max pooling over (C, H, W); ties go to the lowest flat input index.

    Returns ``(y, argmax)`` with ``argmax`` holding flat indices into the
    *input* for each pooled output element.
    """
    if x.ndim != 3:
        raise ShapeError("maxpool2d input", ("C", "H", "W"), x.shape)
    c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError("maxpool2d input (kernel too large)", (c, kernel, kernel), x.shape)
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, OH, OW, k, k)
    oh, ow = win.shape[1], win.shape[2]
    flatwin = win.reshape(c, oh, ow, kernel * kernel)
    # np.argmax returns the first maximum, which inside a row-major window
    # is the lowest (dy, dx) and therefore the lowest flat input index.
    local = np.argmax(flatwin, axis=3)
    dy, dx = np.divmod(local, kernel)
    oy = np.arange(oh).reshape(1, -1, 1) * stride
    ox = np.arange(ow).reshape(1, 1, -1) * stride
    ci = np.arange(c).reshape(-1, 1, 1)
    argmax = (ci * h + oy + dy) * w + (ox + dx)
    y = np.take_along_axis(flatwin, local[..., None], axis=3)[..., 0]
    return _as_f32(y), argmax


def maxpool2d_backward(g: np.ndarray, x_shape, argmax: np.ndarray) -> np.ndarray:
    dx = np.zeros(int(np.prod(x_shape)), dtype=np.float64)
    np.add.at(dx, argmax.reshape(-1), g.reshape(-1).astype(np.float64, copy=False))
    return _as_f32(dx.reshape(x_shape))


def _softmax_f64(logits: np.ndarray) -> tuple[np.ndarray, float]:
    z = logits.astype(np.float64, copy=False)
    m = float(z.max())
    e = np.exp(z - m)
    s = float(e.sum())
    return e / s, m + np.log(s)


def cross_entropy(logits: Tensor, label: int) -> float:
    """Softmax cross-entropy of a rank-1 logit vector against one label.

    Log-sum-exp is stabilised by the max logit and accumulated in
    float64, so arbitrarily large logits stay finite.
    """
    arr = logits.array if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 1:
        raise ShapeError("cross_entropy logits", ("M",), arr.shape)
    if not 0 <= int(label) < arr.shape[0]:
        raise TensorError(f"label {label} out of range for {arr.shape[0]} classes")
    _, lse = _softmax_f64(arr)
    loss = lse - float(arr[int(label)])
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy is not finite")
    return float(loss)


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------


class Node:
    """One tape entry: a value plus the chain-rule closure to its parents."""

    __slots__ = ("value", "parents", "_backward", "grad")

    def __init__(self, value: np.ndarray, parents: tuple = (), backward=None):
        self.value = value
        self.parents = parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = backward
        self.grad: np.ndarray | None = None


def constant(t: Tensor | np.ndarray) -> Node:
    arr = t.array if isinstance(t, Tensor) else _as_f32(np.asarray(t))
    return Node(arr)


leaf = constant  # a leaf is just a node whose .grad the caller reads afterwards


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError("add", a.value.shape, b.value.shape)
    out = _as_f32(a.value + b.value)
    # The adder's local gradient is the identity in both directions.
    return Node(out, (a, b), lambda g: (g, g))


def scale(a: Node, c: float) -> Node:
    cf = DTYPE(c)
    return Node(_as_f32(a.value * cf), (a,), lambda g: (g * cf,))


def relu(a: Node) -> Node:
    x = a.value
    return Node(relu_forward(x), (a,), lambda g: (relu_backward(g, x),))


def flatten(a: Node) -> Node:
    shape = a.value.shape
    return Node(a.value.reshape(-1), (a,), lambda g: (g.reshape(shape),))


def fc(a: Node, w: np.ndarray, b: np.ndarray) -> Node:
    out = fc_forward(a.value, w, b)
    return Node(out, (a,), lambda g: (fc_backward(g, w),))


def conv2d(a: Node, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> Node:
    out, _cols = conv2d_forward(a.value, w, b, stride, padding)
    x_shape = a.value.shape
    return Node(out, (a,), lambda g: (conv2d_backward(g, w, x_shape, stride, padding),))


def maxpool2d(a: Node, kernel: int, stride: int) -> Node:
    out, argmax = maxpool2d_forward(a.value, kernel, stride)
    x_shape = a.value.shape
    return Node(out, (a,), lambda g: (maxpool2d_backward(g, x_shape, argmax),))


def sum_all(a: Node) -> Node:
    val = np.array(a.value.astype(np.float64).sum(), dtype=DTYPE)
    shape = a.value.shape
    return Node(val, (a,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def l1_norm(a: Node) -> Node:
    """Sum of absolute values; subgradient at 0 is taken as 0."""
    val = np.array(np.abs(a.value.astype(np.float64)).sum(), dtype=DTYPE)
    sgn = np.sign(a.value)
    return Node(val, (a,), lambda g: ((sgn * g).astype(DTYPE),))


def cross_entropy_node(logits: Node, label: int) -> Node:
    arr = logits.value
    if arr.ndim != 1:
        raise ShapeError("cross_entropy logits", ("M",), arr.shape)
    if not 0 <= int(label) < arr.shape[0]:
        raise TensorError(f"label {label} out of range for {arr.shape[0]} classes")
    p, lse = _softmax_f64(arr)
    loss = np.array(lse - float(arr[int(label)]), dtype=DTYPE)
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy is not finite")
    lab = int(label)

    def backward(g):
        d = p.copy()
        d[lab] -= 1.0
        return ((d * float(g)).astype(DTYPE),)

    return Node(loss, (logits,), backward)


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar ``root`` into every tape node."""
    if root.value.ndim != 0 and root.value.size != 1:
        raise TensorError("backward() requires a scalar root")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value, dtype=DTYPE)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=DTYPE).reshape(parent.value.shape)
            else:
                parent.grad = parent.grad + np.asarray(g, dtype=DTYPE).reshape(parent.value.shape)
    for node in order:
        if node.grad is not None and not np.isfinite(node.grad).all():
            raise NonFiniteError("backward produced non-finite gradients")


# ---------------------------------------------------------------------------
# layer dispatch
# ---------------------------------------------------------------------------


def _layer_params(layer, weights: Mapping[str, Tensor]):
    try:
        w = weights[layer.weight_name].array
        b = weights[layer.bias_name].array
    except KeyError as exc:
        raise TensorError(f"layer {layer.name!r}: missing parameter tensor {exc.args[0]!r}")
    return w, b


def forward_layer(layer, x: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
    """Evaluate one layer outside the tape."""
    arr = x.array
    kind = layer.kind
    if kind == "conv2d":
        w, b = _layer_params(layer, weights)
        out, _ = conv2d_forward(arr, w, b, layer.stride, layer.padding)
    elif kind == "fc":
        w, b = _layer_params(layer, weights)
        out = fc_forward(arr, w, b)
    elif kind == "relu":
        out = relu_forward(arr)
    elif kind == "maxpool2d":
        out, _ = maxpool2d_forward(arr, layer.kernel, layer.stride)
    elif kind == "flatten":
        out = arr.reshape(-1)
    else:
        raise TensorError(f"unknown layer kind {kind!r}")
    return Tensor(out)


def forward_layers(layers: Iterable, x: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
    out = x
    for layer in layers:
        out = forward_layer(layer, out, weights)
    return out


def apply_layer_node(layer, x: Node, weights: Mapping[str, Tensor]) -> Node:
    """Evaluate one layer on the tape (layer parameters stay constants)."""
    kind = layer.kind
    if kind == "conv2d":
        w, b = _layer_params(layer, weights)
        return conv2d(x, w, b, layer.stride, layer.padding)
    if kind == "fc":
        w, b = _layer_params(layer, weights)
        return fc(x, w, b)
    if kind == "relu":
        return relu(x)
    if kind == "maxpool2d":
        return maxpool2d(x, layer.kernel, layer.stride)
    if kind == "flatten":
        return flatten(x)
    raise TensorError(f"unknown layer kind {kind!r}")


def apply_layers_node(layers: Iterable, x: Node, weights: Mapping[str, Tensor]) -> Node:
    out = x
    for layer in layers:
        out = apply_layer_node(layer, out, weights)
    return out


def grad_wrt_noise(
    cloud_layers: Sequence,
    weights: Mapping[str, Tensor],
    a: Tensor,
    n: Tensor,
    loss_fn: Callable[[Node], Node],
) -> Tensor:
    """Gradient of ``loss_fn(cloud(a + n))`` with respect to ``n``.

    The perturbation enters through a plain adder, so the gradient with
    respect to ``n`` is bit-identical to the gradient with respect to the
    perturbed activation itself.
    """
    if a.shape != n.shape:
        raise ShapeError("grad_wrt_noise (a vs n)", a.shape, n.shape)
    n_node = leaf(n)
    h = add(constant(a), n_node)
    logits = apply_layers_node(cloud_layers, h, weights)
    loss = loss_fn(logits)
    backward(loss)
    assert n_node.grad is not None
    return Tensor(n_node.grad)
