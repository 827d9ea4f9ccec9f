import numpy as np
import pytest

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}
# every ROC report built during the session, checked by the acceptance suite
ROC_REPORTS: list = []


def pytest_collection_modifyitems(config, items):
    # acceptance criteria run last so they see every report the unit tests built
    items.sort(key=lambda it: it.get_closest_marker("acceptance") is not None)


def pytest_configure(config):
    from stereoface import evalkit

    init = evalkit.RocReport.__init__

    def recording_init(self, *args, **kwargs):
        init(self, *args, **kwargs)
        ROC_REPORTS.append(self)

    evalkit.RocReport.__init__ = recording_init


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 subjects x 3-4 samples at desk scale (6 train / 2 test)."""
    from stereoface.facegen.dataset import GenConfig, gen_dataset

    root = tmp_path_factory.mktemp("tiny")
    gen_dataset(GenConfig(subjects=8, samples_min=3, samples_max=4, seed=3, train_fraction=0.75), root)
    return root
