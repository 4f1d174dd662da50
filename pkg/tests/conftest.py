import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from debiaskit.datasets import SynthShapesSpec, synth_generate


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """80-train/16-test shapes dataset with a 5% conflict ratio."""
    out = tmp_path_factory.mktemp("small_ds")
    spec = SynthShapesSpec(train_count=80, test_count=16, conflict_ratio=0.05, seed=3)
    manifest = synth_generate(spec, out)
    return manifest


@pytest.fixture(scope="session")
def medium_dataset(tmp_path_factory):
    """400-train/80-test dataset, enough signal to train the tiny net."""
    out = tmp_path_factory.mktemp("medium_ds")
    spec = SynthShapesSpec(train_count=400, test_count=80, conflict_ratio=0.05, seed=5)
    manifest = synth_generate(spec, out)
    return manifest
