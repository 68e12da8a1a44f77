import pytest

from vdu.ingest import convert_dataset
from vdu.synth import GenSpec, generate


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Default synthetic corpus, generated once and converted to the unified format."""
    root = tmp_path_factory.mktemp("corpus-session")
    generate(GenSpec(seed=5), root / "src")
    manifest = convert_dataset("synthetic", root / "src", root / "data" / "synth.jsonl")
    manifest.save(root / "data" / "synth.manifest.json")
    return manifest, root / "data"


@pytest.fixture(scope="session")
def tiny_extractive(tmp_path_factory):
    """Eight extractive instances only; the overfit substrate."""
    root = tmp_path_factory.mktemp("tiny-extractive")
    counts = {k: 0 for k in GenSpec().counts}
    counts["synth_extract"] = 8
    generate(GenSpec(seed=11, counts=counts), root / "src")
    manifest = convert_dataset("synthetic", root / "src", root / "data" / "synth.jsonl")
    manifest.save(root / "data" / "synth.manifest.json")
    return manifest, root / "data"
