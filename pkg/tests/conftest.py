import numpy as np
import pytest

from isrf.io import Primitive, SynthSpec, synth_generate


def two_object_spec(seed=7, res=32, image=96, n_train=24, n_test=4):
    """Sphere + box, well separated, distinct features."""
    return SynthSpec(
        seed=seed,
        resolution=(res, res, res),
        primitives=[
            Primitive("sphere", (-0.45, 0.05, 0.0), 0.34, (0.85, 0.3, 0.25), "sphere"),
            Primitive("box", (0.45, -0.05, 0.0), (0.55, 0.5, 0.5), (0.25, 0.45, 0.85), "box"),
        ],
        image_size=(image, image),
        n_train=n_train,
        n_test=n_test,
    )


@pytest.fixture(scope="session")
def tiny_synth():
    """Small, fast ground-truth scene for module-level tests."""
    spec = two_object_spec(seed=3, res=20, image=48, n_train=8, n_test=2)
    return synth_generate(spec)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    spec = two_object_spec(seed=3, res=20, image=48, n_train=8, n_test=2)
    synth_generate(spec, out_dir=out)
    return out


@pytest.fixture(scope="session")
def acceptance_synth():
    """The seeded 32^3 two-object scene used by the acceptance suite."""
    return synth_generate(two_object_spec())
