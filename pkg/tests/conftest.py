import sys
from pathlib import Path

import pytest
import torch

# Make tests/oracles.py importable from any test module.
sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(max(torch.get_num_threads(), 2))


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
