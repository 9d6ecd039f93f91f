import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prunebp import codes


@pytest.fixture(scope="session")
def rm13():
    return codes.rm_code(1, 3)


@pytest.fixture(scope="session")
def rm13_hoc(rm13):
    return codes.min_weight_dual_checks(rm13)


@pytest.fixture(scope="session")
def rm25():
    return codes.rm_code(2, 5)


@pytest.fixture(scope="session")
def rm25_hoc(rm25):
    return codes.min_weight_dual_checks(rm25)


@pytest.fixture(scope="session")
def ldpc128():
    return codes.ldpc_128_64()
