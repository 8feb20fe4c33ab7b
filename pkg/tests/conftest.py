from __future__ import annotations

import pytest

from auxstep.synthgen import SceneSpec, generate_dataset


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    """A small rendered dataset shared across training-level tests.

    32x32 scenes keep full training steps around a millisecond; 14 scenes
    split 11 train / 3 test.
    """
    root = tmp_path_factory.mktemp("world")
    spec = SceneSpec(height=32, width=32, num_classes=6)
    paths = generate_dataset(spec, n=14, seed=5, out_dir=root, name="tiny",
                             train_fraction=0.8)
    return {"spec": spec, "root": root,
            "train": str(paths["train"]), "test": str(paths["test"]),
            "all": str(paths["all"])}
