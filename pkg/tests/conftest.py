import sys
from pathlib import Path

import pytest

import est.core as core

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def restore_dtype():
    """Keep a failed fp64 test from leaking precision into the next one."""
    prev = core.default_dtype()
    yield
    core.set_dtype(prev)
