import pathlib

import pytest

from failsafe.core import load_config

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "failsafe" / "data"


@pytest.fixture(scope="session")
def llama():
    return load_config(DATA / "llama70b.toml")


@pytest.fixture(scope="session")
def mixtral():
    return load_config(DATA / "mixtral8x22b.toml")


@pytest.fixture(scope="session")
def toy():
    return load_config(DATA / "toy.toml")


@pytest.fixture(scope="session")
def data_dir():
    return DATA
