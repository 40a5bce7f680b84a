import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from splitnoise import datasets as D
from splitnoise import learner as L
from splitnoise import network as N
from splitnoise.tensor import Tensor

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

REF_SPEC = """\
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


def make_ref_net():
    return N.parse_network_spec(REF_SPEC)


def make_ref_weights(net, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    return {
        name: Tensor((rng.standard_normal(shape) * scale).astype(np.float32))
        for name, shape in net.parameter_shapes().items()
    }


@pytest.fixture(scope="session")
def ref_net():
    return make_ref_net()


@pytest.fixture(scope="session")
def ref_weights(ref_net):
    return make_ref_weights(ref_net)


@pytest.fixture(scope="session")
def fixtures_dir():
    """Bundled trained net + dataset + profiles, built once if absent."""
    if not (FIXTURES / "MANIFEST.txt").exists():
        script = Path(__file__).resolve().parents[1] / "scripts" / "make_fixtures.py"
        subprocess.run([sys.executable, str(script), "--out", str(FIXTURES)],
                       check=True, capture_output=True, text=True)
    return FIXTURES


@dataclass(frozen=True)
class TrainedSetup:
    """Everything the learning and end-to-end tests share."""

    net: N.NetworkSpec
    weights: dict
    split: N.Split
    train: D.LabeledImages
    test: D.LabeledImages
    noise_data: L.NoiseDataset      # activations of train[3000:6000] at the cut
    train_part: L.NoiseDataset
    holdout: L.NoiseDataset
    baseline: float                 # clean holdout accuracy
    head: dict                      # private style-head weights


@pytest.fixture(scope="session")
def trained(fixtures_dir):
    net = N.parse_network_spec((fixtures_dir / "lenet.txt").read_text())
    weights = N.load_weights(fixtures_dir / "lenet.shrw")
    head = N.load_weights(fixtures_dir / "head.shrw")
    train, test = D.load_dataset(fixtures_dir / "dataset")
    split = N.make_split(net, 6)
    noise_data = L.precompute_activations(
        split, weights,
        D.to_model_input(train.images[3000:6000]),
        train.labels[3000:6000].astype(int),
        styles=train.styles[3000:6000].astype(int),
    )
    train_part, holdout = noise_data.split_holdout(0.1, seed=0)
    baseline = L.holdout_accuracy(split, weights, None, holdout)
    return TrainedSetup(net=net, weights=weights, split=split, train=train,
                        test=test, noise_data=noise_data, train_part=train_part,
                        holdout=holdout, baseline=baseline, head=head)
