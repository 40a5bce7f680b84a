import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitnoise import network as N
from splitnoise.tensor import Tensor

LENET_SPEC = """\
# five computational layers: conv1 conv2 fc1 fc2 fc3
input 1 28 28
classes 10

layer conv1 conv2d
  filters 6
  kernel 5
  stride 1
  padding 2
layer relu1 relu
layer pool1 maxpool2d
  kernel 2
  stride 2
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


def random_weights(net, seed=0):
    rng = np.random.default_rng(seed)
    return {
        name: Tensor((rng.standard_normal(shape) * 0.1).astype(np.float32))
        for name, shape in net.parameter_shapes().items()
    }


@pytest.fixture
def lenet():
    net = N.parse_network_spec(LENET_SPEC)
    return net, random_weights(net)


class TestSpecFormat:
    def test_parse_shapes(self, lenet):
        net, _ = lenet
        shapes = net.activation_shapes()
        assert shapes[2] == (6, 14, 14)  # after pool1
        assert shapes[5] == (16, 5, 5)  # after pool2
        assert shapes[6] == (400,)  # after flatten
        assert shapes[-1] == (10,)

    def test_round_trips_through_render(self, lenet):
        net, _ = lenet
        assert N.parse_network_spec(N.render_network_spec(net)) == net

    def test_pool_stride_defaults_to_kernel(self, lenet):
        net, _ = lenet
        pool2 = [l for l in net.layers if l.name == "pool2"][0]
        assert pool2.stride == 2

    def test_bad_composition_rejected(self):
        text = "input 1 8 8\nclasses 2\nlayer fc1 fc\n  features 2\n"
        with pytest.raises(N.SpecFormatError):
            N.parse_network_spec(text)

    def test_wrong_logit_count_rejected(self):
        text = "input 4 1 1\nclasses 3\nlayer f flatten\nlayer o fc\n  features 2\n"
        with pytest.raises(N.SpecFormatError):
            N.parse_network_spec(text)

    def test_duplicate_layer_name_rejected(self):
        text = (
            "input 4 1 1\nclasses 2\nlayer f flatten\n"
            "layer o fc\n  features 2\nlayer o fc\n  features 2\n"
        )
        with pytest.raises(N.SpecFormatError):
            N.parse_network_spec(text)

    def test_unknown_kind_rejected(self):
        with pytest.raises(N.SpecFormatError):
            N.parse_network_spec("input 1 4 4\nclasses 2\nlayer z sigmoid\n")


class TestWeightsContainer:
    def test_round_trip_bit_exact(self, lenet, tmp_path):
        _, weights = lenet
        path = tmp_path / "w.shrw"
        N.save_weights(path, weights)
        loaded = N.load_weights(path)
        assert set(loaded) == set(weights)
        for name in weights:
            assert loaded[name].array.tobytes() == weights[name].array.tobytes()
            assert loaded[name].shape == weights[name].shape

    def test_missing_tensor_named_in_error(self, lenet, tmp_path):
        net, weights = lenet
        partial = {k: v for k, v in weights.items() if k != "conv2.bias"}
        with pytest.raises(N.WeightsFormatError, match="conv2.bias"):
            net.validate_weights(partial)

    def test_truncated_file_fails_deterministically(self, lenet, tmp_path):
        _, weights = lenet
        path = tmp_path / "w.shrw"
        N.save_weights(path, weights)
        blob = path.read_bytes()
        clipped = tmp_path / "clipped.shrw"
        clipped.write_bytes(blob[: len(blob) // 2])
        msgs = set()
        for _ in range(3):
            with pytest.raises(N.WeightsFormatError) as err:
                N.load_weights(clipped)
            msgs.add(str(err.value))
        assert len(msgs) == 1 and "truncated" in msgs.pop()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(N.WeightsFormatError, match="magic"):
            N.load_weights(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        buf = io.BytesIO()
        N.write_weights(buf, {"t": Tensor(np.ones(2, np.float32))})
        path = tmp_path / "t.shrw"
        path.write_bytes(buf.getvalue() + b"\x00")
        with pytest.raises(N.WeightsFormatError, match="trailing"):
            N.load_weights(path)

    def test_wrong_shape_detected(self, lenet):
        net, weights = lenet
        bad = dict(weights)
        bad["fc3.bias"] = Tensor(np.zeros(11, np.float32))
        with pytest.raises(N.WeightsFormatError, match="fc3.bias"):
            net.validate_weights(bad)

    def test_hash_changes_with_any_bit(self, lenet):
        net, weights = lenet
        h0 = N.network_hash(net, weights)
        assert len(h0) == 32
        bumped = dict(weights)
        arr = bumped["fc3.bias"].array.copy()
        arr[0] += np.float32(1e-6)
        bumped["fc3.bias"] = Tensor(arr)
        assert N.network_hash(net, bumped) != h0
        # insertion order must not matter
        shuffled = dict(reversed(list(weights.items())))
        assert N.network_hash(net, shuffled) == h0


names = st.text(
    alphabet=st.sampled_from("abcdefgh0123456789._"), min_size=1, max_size=12
)


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        names,
        st.tuples(
            st.integers(min_value=1, max_value=4),
            st.integers(min_value=1, max_value=5),
        ),
        min_size=1,
        max_size=5,
    ),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_weights_round_trip_property(shapes, seed):
    rng = np.random.default_rng(seed)
    weights = {
        name: Tensor(rng.standard_normal(np.full(rank, extent)).astype(np.float32))
        for name, (rank, extent) in shapes.items()
    }
    buf = io.BytesIO()
    N.write_weights(buf, weights)
    buf.seek(0)
    loaded = N.read_weights(buf)
    assert list(loaded) == list(weights)
    for name in weights:
        assert loaded[name].array.tobytes() == weights[name].array.tobytes()


class TestSplit:
    def test_valid_cuts(self, lenet):
        net, _ = lenet
        # cloud partition must start with conv2 / fc1 / fc2 / fc3
        assert N.valid_cuts(net) == [2, 6, 8, 10]

    def test_last_conv_cut_gives_fc_cloud(self, lenet):
        net, _ = lenet
        split = N.make_split(net, 6)
        assert [l.kind for l in split.cloud_layers] == ["fc", "relu", "fc", "relu", "fc"]
        assert split.activation_shape == (400,)

    def test_cut_zero_rejected(self, lenet):
        net, _ = lenet
        with pytest.raises(N.SplitError):
            N.make_split(net, 0)

    def test_out_of_range_cuts_rejected(self, lenet):
        net, _ = lenet
        for cut in (-1, len(net.layers) - 1, 99):
            with pytest.raises(N.SplitError):
                N.make_split(net, cut)

    def test_error_lists_valid_cuts(self, lenet):
        net, _ = lenet
        with pytest.raises(N.SplitError, match=r"\[2, 6, 8, 10\]"):
            N.make_split(net, 3)

    @pytest.mark.parametrize("cut", [2, 6, 8, 10])
    def test_split_composes_bitwise(self, lenet, cut):
        net, weights = lenet
        rng = np.random.default_rng(cut)
        x = Tensor(rng.standard_normal((1, 28, 28)).astype(np.float32))
        split = N.make_split(net, cut)
        via_split = N.run_cloud(split, weights, N.run_edge(split, weights, x))
        direct = N.full_forward(net, weights, x)
        assert via_split.array.tobytes() == direct.array.tobytes()

    def test_huge_noise_still_finite(self, lenet):
        net, weights = lenet
        split = N.make_split(net, 6)
        a = Tensor(np.full(400, 1e6, np.float32))
        logits = N.run_cloud(split, weights, a)
        assert np.isfinite(logits.array).all()

    def test_wrong_activation_shape_rejected(self, lenet):
        net, weights = lenet
        split = N.make_split(net, 6)
        with pytest.raises(N.SplitError):
            N.run_cloud(split, weights, Tensor(np.zeros(401, np.float32)))
        with pytest.raises(N.SplitError):
            N.run_edge(split, weights, Tensor(np.zeros((1, 27, 27), np.float32)))

    def test_forward_never_mutates_weights(self, lenet):
        net, weights = lenet
        before = N.network_hash(net, weights)
        split = N.make_split(net, 6)
        x = Tensor(np.random.default_rng(1).standard_normal((1, 28, 28)).astype(np.float32))
        N.run_cloud(split, weights, N.run_edge(split, weights, x))
        assert N.network_hash(net, weights) == before
