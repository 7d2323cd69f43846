import sys
from pathlib import Path

import pytest

from pvlu import tensor

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def debug_checks():
    """NaN/Inf guards on for every test unless a test turns them off."""
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)
