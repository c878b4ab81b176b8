from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def fixture_module():
    return FIXTURES / "mathfns.py"


@pytest.fixture(scope="session")
def golden_missing_argument():
    return (GOLDEN / "missing_argument_error.txt").read_text(encoding="utf-8").rstrip("\n")
