"""
Shared fixtures.
"""

import pytest

from src.graphalign.encoder import build_encoder, freeze
from src.graphalign.shapes import build_sample

from tests.helpers import TINY_ENCODER, TINY_SHAPES


@pytest.fixture(scope="session")
def tiny_encoder():
    """Randomly initialised, frozen miniature encoder."""
    encoder, _ = build_encoder(TINY_ENCODER)
    return freeze(encoder)


@pytest.fixture(scope="session")
def tiny_sample():
    """One generated sample with three pairs."""
    return build_sample(TINY_SHAPES, 7)
