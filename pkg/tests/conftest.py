import pytest

from hdrstack.noise import CameraNoiseParams, bundled_profile


@pytest.fixture(scope="session")
def a7r3():
    return bundled_profile("sony_a7r3")


@pytest.fixture(scope="session")
def t1i():
    return bundled_profile("canon_t1i")


@pytest.fixture
def unit_camera():
    return CameraNoiseParams("unit", 1.0, 1.0, 1.0, 0.0, 0.0)
