import os

import pytest

from ptsim import set_element_width


@pytest.fixture(autouse=True)
def _default_element_width():
    """Every test starts in the 32-bit default; no env override leaks in."""
    os.environ.pop("PTSIM_ELEMENT_WIDTH", None)
    set_element_width(32)
    yield
    set_element_width(32)
