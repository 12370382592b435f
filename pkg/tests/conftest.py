import numpy as np
import pytest

from tadconf import _kernels


@pytest.fixture(params=sorted(_kernels.BACKENDS))
def backend(request):
    return request.param


def interval_arrays(rng, n, span=100.0, max_len=30.0):
    s = rng.uniform(0, span, n)
    return s, s + rng.uniform(0, max_len, n)


_ACCEPTANCE = {}


def record(tag, ok, detail):
    """Remember one acceptance verdict for the end-of-session summary."""
    line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
    _ACCEPTANCE[tag] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for tag in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[tag])
