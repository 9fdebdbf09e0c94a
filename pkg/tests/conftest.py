import numpy as np
import pytest

from sdfholo.model import ModelConfig, PreparedRegion, PreparedStudy, SDFHolo
from sdfholo.synthio import default_phantom_config, generate_phantom

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    if rep.when == "setup" and rep.outcome != "passed":
        _CRITERIA[num] = (title, "FAIL" if rep.failed else "SKIP")
    elif rep.when == "call":
        _CRITERIA[num] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, status = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {status}  {title}")


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(0)


@pytest.fixture(scope="session")
def small_phantom_config():
    return default_phantom_config(dims=(32, 32, 96), spacing=(6.0, 6.0, 10.0))


def micro_config(**over) -> ModelConfig:
    base = dict(embed_dim=16, heads=2, depth=2, decoder_depth=1, gaa_depth=1, text_depth=1, lm_depth=1,
                mlp_ratio=2, vocab_size=32, regions=1, mask_ratio=0.5, atlas_dim=4)
    base.update(over)
    return ModelConfig(**base)


def micro_study(seed=0, n_patches=2, classes=(3, 5), tokens=None, spans=None) -> PreparedStudy:
    """One 32x16x16 region (two patches) with random normalised content."""
    rng = np.random.default_rng(seed)
    coords = np.array([[i, 0, 0] for i in range(n_patches)])
    region = PreparedRegion(0, "micro", rng.uniform(-1, 1, (n_patches, 4096)), rng.uniform(0, 2, (n_patches, 4096)),
                            coords, np.array(classes[:n_patches]))
    if tokens is None:
        tokens = np.array([1, 7, 8, 9, 10, 11, 12, 2])
    if spans is None:
        spans = {classes[0]: [(1, 3)], classes[-1]: [(4, 5)], 9: [(5, 7)]}
    return PreparedStudy([region], np.asarray(tokens), spans, 40.0, {})


@pytest.fixture
def micro_model():
    return SDFHolo(micro_config(), seed=3)
