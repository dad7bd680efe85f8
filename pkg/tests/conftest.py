import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from trimodal.speech_codec import CodecConfig
from trimodal.tokenizer import build_vocab


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def codec():
    return CodecConfig()


@pytest.fixture(scope="session")
def acceptance():
    """Artifacts of the full three-stage run (cached under build/acceptance)."""
    from acceptance_build import ensure_artifacts

    return ensure_artifacts()
