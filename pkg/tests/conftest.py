import numpy as np
import pytest

from knnsid.features import SpectrogramConfig
from knnsid.nn import NetworkConfig
from knnsid.pipeline import TrainConfig, build_knn_net, featurize_manifest, train_stage1
from knnsid.synth import generate_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 singers x 10 songs x 4 s, seed 7, featurized."""
    root = tmp_path_factory.mktemp("small")
    manifest = generate_corpus(4, 10, 4.0, 7, root / "corpus")
    featurize_manifest(manifest, SpectrogramConfig(), root / "features")
    return manifest, root / "features"


@pytest.fixture(scope="session")
def small_trained(small_corpus):
    manifest, features = small_corpus
    extractor, singers = train_stage1(manifest, features, NetworkConfig(), TrainConfig(max_epochs=15, seed=7))
    return extractor, singers


@pytest.fixture(scope="session")
def small_net(small_corpus, small_trained):
    manifest, features = small_corpus
    extractor, singers = small_trained
    return build_knn_net(extractor, manifest, features, k=11, singers=singers)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one ``(criterion, passed, detail)`` line per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
