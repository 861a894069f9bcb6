import random

import pytest
import torch

from dtr.corpus import SPECIAL_TOKENS, Vocabulary, build_vocab

# Single-threaded math keeps every test bit-reproducible.
torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", ".", "!"]
    return build_vocab([words])


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0)


def pytest_assertrepr_compare(op, left, right):
    # Default reprs of long token lists truncate badly in failures.
    if op == "==" and isinstance(left, list) and isinstance(right, list):
        if all(isinstance(x, str) for x in left + right):
            return [f"token lists differ:", f"  left:  {' '.join(left)}", f"  right: {' '.join(right)}"]
    return None
