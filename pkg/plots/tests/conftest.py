import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from figdata import fill_run_dir


@pytest.fixture
def run_dir(tmp_path):
    return fill_run_dir(tmp_path)
