import pytest

from .synthetic import write_corpus


@pytest.fixture
def make_corpus(tmp_path):
    """Factory writing a synthetic manifest and its audio under tmp_path."""

    def build(**kwargs):
        return write_corpus(tmp_path, **kwargs)

    return build
