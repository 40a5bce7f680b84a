"""Frozen feed-forward network description, weights I/O, and splitting.

A network is a linear chain of layers read from a small text format, with
parameters stored separately in a binary tensor container.  The model can
be split at a cut index into an edge partition and a cloud partition; the
cloud partition must begin with a computational layer (conv2d or fc) and
the edge partition must contain at least one computational layer, so the
raw input is never what crosses the link.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import Tensor, forward_layers

WEIGHTS_MAGIC = b"SHRW"
WEIGHTS_VERSION = 1

LAYER_KINDS = ("conv2d", "fc", "relu", "maxpool2d", "flatten")
COMPUTE_KINDS = ("conv2d", "fc")

#: The classic small digit convnet used by the fixtures and examples.
#: Cut 6 (after the second pool + flatten) is the canonical split: the
#: cloud partition is the fully-connected stack on a (400,) activation.
REFERENCE_SPEC = """\
input 1 28 28
classes 10

layer conv1 conv2d
  filters 6
  kernel 5
  padding 2
layer relu1 relu
layer pool1 maxpool2d
  kernel 2
layer conv2 conv2d
  filters 16
  kernel 5
layer relu2 relu
layer pool2 maxpool2d
  kernel 2
layer flat flatten
layer fc1 fc
  features 120
layer relu3 relu
layer fc2 fc
  features 84
layer relu4 relu
layer fc3 fc
  features 10
"""


class NetworkError(Exception):
    """Base class for model description problems."""


class SpecFormatError(NetworkError):
    pass


class WeightsFormatError(NetworkError):
    pass


class SplitError(NetworkError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the chain; hyperparameters depend on ``kind``."""

    name: str
    kind: str
    filters: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    features: int | None = None

    @property
    def is_computational(self) -> bool:
        return self.kind in COMPUTE_KINDS

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape this layer produces for ``in_shape``, or raise."""
        if self.kind == "conv2d":
            if len(in_shape) != 3:
                raise SpecFormatError(
                    f"layer {self.name!r}: conv2d needs a (C,H,W) input, got {in_shape}"
                )
            c, h, w = in_shape
            k, s, p = self.kernel, self.stride, self.padding
            oh = (h + 2 * p - k) // s + 1
            ow = (w + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise SpecFormatError(f"layer {self.name!r}: kernel {k} too large for {in_shape}")
            return (self.filters, oh, ow)
        if self.kind == "maxpool2d":
            if len(in_shape) != 3:
                raise SpecFormatError(
                    f"layer {self.name!r}: maxpool2d needs a (C,H,W) input, got {in_shape}"
                )
            c, h, w = in_shape
            k, s = self.kernel, self.stride
            oh = (h - k) // s + 1
            ow = (w - k) // s + 1
            if oh < 1 or ow < 1:
                raise SpecFormatError(f"layer {self.name!r}: kernel {k} too large for {in_shape}")
            return (c, oh, ow)
        if self.kind == "fc":
            if len(in_shape) != 1:
                raise SpecFormatError(
                    f"layer {self.name!r}: fc needs a flat input, got {in_shape}"
                )
            return (self.features,)
        if self.kind == "relu":
            return in_shape
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        raise SpecFormatError(f"layer {self.name!r}: unknown kind {self.kind!r}")

    def parameter_shapes(self, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv2d":
            return {
                self.weight_name: (self.filters, in_shape[0], self.kernel, self.kernel),
                self.bias_name: (self.filters,),
            }
        if self.kind == "fc":
            return {
                self.weight_name: (self.features, in_shape[0]),
                self.bias_name: (self.features,),
            }
        return {}


@dataclass(frozen=True)
class NetworkSpec:
    """Layer chain plus declared input shape and class count."""

    input_shape: tuple[int, ...]
    num_classes: int
    layers: tuple[LayerSpec, ...]

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer (validates chain composition)."""
        shapes = []
        cur = self.input_shape
        for layer in self.layers:
            cur = layer.output_shape(cur)
            shapes.append(cur)
        if shapes[-1] != (self.num_classes,):
            raise SpecFormatError(
                f"final layer produces {shapes[-1]}, expected ({self.num_classes},) logits"
            )
        return shapes

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        cur = self.input_shape
        for layer in self.layers:
            out.update(layer.parameter_shapes(cur))
            cur = layer.output_shape(cur)
        return out

    def validate_weights(self, weights: Mapping[str, Tensor]) -> None:
        for name, shape in self.parameter_shapes().items():
            if name not in weights:
                raise WeightsFormatError(f"weights file is missing tensor {name!r}")
            got = weights[name].shape
            if got != shape:
                raise WeightsFormatError(
                    f"tensor {name!r} has shape {got}, expected {shape}"
                )


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_INT_KEYS = ("filters", "kernel", "stride", "padding", "features")
_REQUIRED = {"conv2d": ("filters", "kernel"), "maxpool2d": ("kernel",), "fc": ("features",)}
_ALLOWED = {
    "conv2d": {"filters", "kernel", "stride", "padding"},
    "maxpool2d": {"kernel", "stride"},
    "fc": {"features"},
    "relu": set(),
    "flatten": set(),
}


def parse_network_spec(text: str) -> NetworkSpec:
    """Parse the layer-chain text format.

    Grammar: an ``input C H W`` line, a ``classes M`` line, then ``layer
    <name> <kind>`` blocks whose following ``key value`` lines set that
    layer's hyperparameters.  ``#`` comments and blank lines are ignored.
    """
    input_shape: tuple[int, ...] | None = None
    num_classes: int | None = None
    layers: list[LayerSpec] = []
    current: dict | None = None
    names: set[str] = set()

    def finish():
        nonlocal current
        if current is None:
            return
        kind = current["kind"]
        for key in _REQUIRED.get(kind, ()):
            if key not in current["params"]:
                raise SpecFormatError(
                    f"layer {current['name']!r} ({kind}) is missing {key!r}"
                )
        params = current["params"]
        if kind == "maxpool2d" and "stride" not in params:
            params["stride"] = params["kernel"]
        layers.append(LayerSpec(name=current["name"], kind=kind, **params))
        current = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key == "input":
            if len(parts) != 4:
                raise SpecFormatError(f"line {lineno}: input needs three extents")
            input_shape = tuple(int(p) for p in parts[1:])
        elif key == "classes":
            if len(parts) != 2:
                raise SpecFormatError(f"line {lineno}: classes needs one count")
            num_classes = int(parts[1])
        elif key == "layer":
            if len(parts) != 3:
                raise SpecFormatError(f"line {lineno}: expected 'layer <name> <kind>'")
            finish()
            name, kind = parts[1], parts[2]
            if kind not in LAYER_KINDS:
                raise SpecFormatError(f"line {lineno}: unknown layer kind {kind!r}")
            if name in names:
                raise SpecFormatError(f"line {lineno}: duplicate layer name {name!r}")
            names.add(name)
            current = {"name": name, "kind": kind, "params": {}}
        else:
            if current is None:
                raise SpecFormatError(f"line {lineno}: {key!r} outside a layer block")
            if len(parts) != 2 or key not in _INT_KEYS:
                raise SpecFormatError(f"line {lineno}: expected '<key> <int>'")
            if key not in _ALLOWED[current["kind"]]:
                raise SpecFormatError(
                    f"line {lineno}: {key!r} not valid for {current['kind']}"
                )
            value = int(parts[1])
            if value < 0 or (value == 0 and key != "padding"):
                raise SpecFormatError(f"line {lineno}: {key} must be positive")
            current["params"][key] = value
    finish()

    if input_shape is None or num_classes is None:
        raise SpecFormatError("spec needs both an 'input' and a 'classes' line")
    if not layers:
        raise SpecFormatError("spec declares no layers")
    net = NetworkSpec(input_shape=input_shape, num_classes=num_classes, layers=tuple(layers))
    net.activation_shapes()  # composition check
    return net


def render_network_spec(net: NetworkSpec) -> str:
    """Canonical text for a spec; parse(render(net)) == net."""
    out = [f"input {' '.join(str(e) for e in net.input_shape)}", f"classes {net.num_classes}"]
    for layer in net.layers:
        out.append(f"layer {layer.name} {layer.kind}")
        if layer.kind == "conv2d":
            out += [
                f"  filters {layer.filters}",
                f"  kernel {layer.kernel}",
                f"  stride {layer.stride}",
                f"  padding {layer.padding}",
            ]
        elif layer.kind == "maxpool2d":
            out += [f"  kernel {layer.kernel}", f"  stride {layer.stride}"]
        elif layer.kind == "fc":
            out.append(f"  features {layer.features}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# weights container
# ---------------------------------------------------------------------------


def save_weights(path, weights: Mapping[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        write_weights(fh, weights)


def write_weights(fh: BinaryIO, weights: Mapping[str, Tensor]) -> None:
    fh.write(WEIGHTS_MAGIC)
    fh.write(struct.pack("<B", WEIGHTS_VERSION))
    fh.write(struct.pack("<I", len(weights)))
    for name, tensor in weights.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", tensor.ndim))
        fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        fh.write(tensor.array.astype("<f4", copy=False).tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise WeightsFormatError(f"truncated weights file while reading {what}")
    return data


def load_weights(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        return read_weights(fh)


def read_weights(fh: BinaryIO) -> dict[str, Tensor]:
    if _read_exact(fh, 4, "magic") != WEIGHTS_MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    (version,) = struct.unpack("<B", _read_exact(fh, 1, "version"))
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
        numel = int(np.prod(shape)) if rank else 1
        payload = _read_exact(fh, 4 * numel, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        if name in out:
            raise WeightsFormatError(f"duplicate tensor {name!r}")
        out[name] = Tensor(arr)
    if fh.read(1):
        raise WeightsFormatError("trailing bytes after final tensor")
    return out


def network_hash(net: NetworkSpec, weights: Mapping[str, Tensor]) -> bytes:
    """32-byte identity of topology plus parameters (canonical order)."""
    h = hashlib.sha256()
    h.update(render_network_spec(net).encode("utf-8"))
    buf = io.BytesIO()
    write_weights(buf, {k: weights[k] for k in sorted(weights)})
    h.update(buf.getvalue())
    return h.digest()


def load_network(spec_path, weights_path) -> tuple[NetworkSpec, dict[str, Tensor]]:
    with open(spec_path, "r", encoding="utf-8") as fh:
        net = parse_network_spec(fh.read())
    weights = load_weights(weights_path)
    net.validate_weights(weights)
    return net, weights


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    """A cut of the chain: edge = layers[0..cut], cloud = layers[cut+1..]."""

    net: NetworkSpec
    cut_index: int

    @property
    def edge_layers(self) -> tuple[LayerSpec, ...]:
        return self.net.layers[: self.cut_index + 1]

    @property
    def cloud_layers(self) -> tuple[LayerSpec, ...]:
        return self.net.layers[self.cut_index + 1 :]

    @property
    def activation_shape(self) -> tuple[int, ...]:
        """Shape of the tensor that crosses the link (the noise shape)."""
        return self.net.activation_shapes()[self.cut_index]


def valid_cuts(net: NetworkSpec) -> list[int]:
    """Cut indices where the cloud partition starts with conv2d or fc and
    the edge partition contains at least one computational layer."""
    cuts = []
    for cut in range(len(net.layers) - 1):
        if not net.layers[cut + 1].is_computational:
            continue
        if not any(l.is_computational for l in net.layers[: cut + 1]):
            continue
        cuts.append(cut)
    return cuts


def make_split(net: NetworkSpec, cut_index: int) -> Split:
    if not 0 <= cut_index <= len(net.layers) - 2:
        raise SplitError(
            f"cut {cut_index} out of range; the raw input and the full chain "
            f"cannot be cut points (valid cuts: {valid_cuts(net)})"
        )
    if cut_index not in valid_cuts(net):
        raise SplitError(
            f"cut {cut_index} invalid: cloud partition must start with a conv2d "
            f"or fc layer and the edge partition must compute something "
            f"(valid cuts: {valid_cuts(net)})"
        )
    return Split(net=net, cut_index=cut_index)


def run_edge(split: Split, weights: Mapping[str, Tensor], x: Tensor) -> Tensor:
    if x.shape != split.net.input_shape:
        raise SplitError(
            f"edge input has shape {x.shape}, network expects {split.net.input_shape}"
        )
    return forward_layers(split.edge_layers, x, weights)


def run_cloud(split: Split, weights: Mapping[str, Tensor], activation: Tensor) -> Tensor:
    if activation.shape != split.activation_shape:
        raise SplitError(
            f"cloud input has shape {activation.shape}, cut {split.cut_index} "
            f"expects {split.activation_shape}"
        )
    return forward_layers(split.cloud_layers, activation, weights)


def full_forward(net: NetworkSpec, weights: Mapping[str, Tensor], x: Tensor) -> Tensor:
    if x.shape != net.input_shape:
        raise SplitError(f"input has shape {x.shape}, network expects {net.input_shape}")
    return forward_layers(net.layers, x, weights)
