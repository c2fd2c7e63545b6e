import sys
from pathlib import Path

import numpy as np
import pytest

# Make tests/helpers.py importable regardless of invocation directory.
sys.path.insert(0, str(Path(__file__).parent))

from recobert.tokenizer import Vocabulary


@pytest.fixture(scope="session")
def tiny_vocab() -> Vocabulary:
    """50-entry vocabulary (45 content tokens + 5 specials)."""
    return Vocabulary.from_tokens([f"w{i}" for i in range(45)])
