import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))  # shared test oracles


def pytest_configure(config):
    import torch

    torch.manual_seed(0)
