import textwrap
from pathlib import Path

import pytest

from randprune.arch import parse_network
from randprune.models import NetworkSpec

# conv 36 weights over 16 positions, fc 40 weights
SMALL_NET = """\
input 1 6 6
classes 10
conv 1->4 k3 pos16
pool global
fc 4->10
"""

# conv 36, fc 100, fc 40
THREE_LAYER_NET = """\
input 4 4 7
classes 4
conv 4->1 k3 pos10
fc 10->10
fc 10->4
"""

TINY_EXPERIMENT = """\
name = "tiny"
output_dir = "tiny"
mask_seed = 1
init_seed = 2
order_seed = 3

[network]
family = "mlp"
width = 8
depth = 1

[dataset]
kind = "gaussian_mixture"
classes = 3
samples = 120
dim = 4
heldout_classes = 1

[sparsity]
method = "erk"
sparsity = 0.5

[train]
epochs = 2
batch_size = 16
learning_rate = 0.05
decay_milestones = [1]
"""


@pytest.fixture
def small_net() -> NetworkSpec:
    return parse_network(SMALL_NET)


@pytest.fixture
def three_layer_net() -> NetworkSpec:
    return parse_network(THREE_LAYER_NET)


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a TOML document next to the test's files and return its path."""

    def write(text: str = TINY_EXPERIMENT, name: str = "experiment.toml") -> Path:
        path = tmp_path / name
        path.write_text(textwrap.dedent(text), encoding="utf-8")
        return path

    return write
