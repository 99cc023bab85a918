import numpy as np
import pytest

from eyolo.data import SceneSpec, generate_synthetic, load_dataset

# criterion number -> (title, passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SceneSpec(seed=3, object_count=3), root, scenes=8)
    return root


@pytest.fixture(scope="session")
def synth_samples(synth_root):
    return load_dataset(synth_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
