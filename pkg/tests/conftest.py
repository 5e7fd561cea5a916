import numpy as np
import pytest

from dietfield.fixtures import FixtureSpec, make_fixture


@pytest.fixture(scope="session")
def cube_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cube")
    return make_fixture(FixtureSpec(num_views=3, num_test_views=2, image_size=64), out)


@pytest.fixture(scope="session")
def tiny_cube_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return make_fixture(FixtureSpec(num_views=6, num_test_views=2, image_size=16), out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import summary_lines
    except ImportError:
        return
    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
