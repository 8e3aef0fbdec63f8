import pytest


def pytest_addoption(parser):
    parser.addoption("--cora", default=None, help="path to the cora binary")


@pytest.fixture
def cora(request):
    path = request.config.getoption("--cora")
    if not path:
        pytest.skip("--cora not given")
    return path
