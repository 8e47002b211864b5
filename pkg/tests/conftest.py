import pytest

from dermnet.datasets import SynthSpec, gen_synthetic


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Twelve 48-pixel images (9 train, 3 val); inputs are resized to 150 anyway."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest, _ = gen_synthetic(SynthSpec(seed=21, counts=(9, 3, 0), size=48), root)
    return manifest
