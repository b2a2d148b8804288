import pytest

from promptseg import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.reset_tape()
    ad.set_debug_checks(False)
    yield
    ad.reset_tape()
