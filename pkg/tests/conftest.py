import pytest

from ptwin import synth

SMALL = dict(layers_per_step=2)


@pytest.fixture(scope="session")
def small_sample(tmp_path_factory):
    """A 20-layer spacing sample (2 layers per step) written to disk once per session."""
    out = tmp_path_factory.mktemp("small_sample")
    sample = synth.generate_sample("spacing", 3, out, synth.SynthConfig(**SMALL))
    return sample
