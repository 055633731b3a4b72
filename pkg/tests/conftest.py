import pytest

from drapekit.fixtures import data_dir
from drapekit.garmentdb import Database, build_database, load_garments


@pytest.fixture(scope="session")
def garments():
    return load_garments(data_dir())


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, garments):
    root = tmp_path_factory.mktemp("corpus") / "db"
    build_database(garments, root)
    return root


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    from drapekit.garmentdb import load_database

    return load_database(corpus_dir)


@pytest.fixture(scope="session")
def towel_db(corpus):
    entries = [e for e in corpus.entries if e.garment_id == "towel"]
    return Database(entries, corpus.manifest)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
