"""Pytest configuration for end-to-end runs on real datasets."""
import os
from pathlib import Path

import pytest
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


@pytest.fixture(scope="session")
def mnist_root():
    """Directory holding the four MNIST IDX files (gzipped or not).

    Tests are skipped when MNIST_ROOT is unset or missing.
    """
    root = os.getenv("MNIST_ROOT")
    if not root or not Path(root).is_dir():
        pytest.skip("MNIST_ROOT not set or not a directory")
    return Path(root)


@pytest.fixture(scope="session")
def e2e_epochs():
    return int(os.getenv("E2E_EPOCHS", "10"))


@pytest.fixture(scope="session")
def device():
    return os.getenv("PUZZLE_AE_DEVICE", "cpu")
