import pytest

from pvnet.dataset import load_split, prepare_cache
from pvnet.model import ModelConfig
from pvnet.synthetic import build_corpus

TINY_MODEL = dict(k=6, edge_widths=(8, 8), block_widths=(8, 12), embed_dim=4, view_channels=(4, 4), view_dim=8,
                  fc_widths=(16, 16), transform_widths=(8, 8, 8))
TINY_PREP = dict(n_points=64, n_views=4, height=16, width=16)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8 train / 8 test shapes, 64 points, 4 views of 16x16."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = build_corpus(root, n_train=8, n_test=8, seed=0)
    summary = prepare_cache(manifest, root / "cache", seed=0, **TINY_PREP)
    assert not summary["failed"]
    return root, manifest


@pytest.fixture
def tiny_sets(tiny_corpus):
    root, manifest = tiny_corpus
    return load_split(manifest, root / "cache", "train"), load_split(manifest, root / "cache", "test")


@pytest.fixture
def tiny_model_config():
    return ModelConfig(**TINY_MODEL)


# one verdict line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
