"""Shared test configuration."""

import pytest

from gtfc import tensor as T


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    """Roll back any default-dtype change a test or its fixtures make.

    The default dtype is process-global state; without this guard a test
    that switches precision would leak it into every later test.
    """
    prev = T.get_default_dtype()
    yield
    T.set_default_dtype(prev)
