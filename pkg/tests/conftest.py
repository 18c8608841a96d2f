import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfgc import LqSpec, lq_model, nonlinear_model

settings.register_profile(
    "mfgc", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("mfgc")

# coupled LQ model used across the suite (displacement monotone, lambda = 0.25)
COUPLED = LqSpec(lam=0.25, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def lq_coupled():
    return lq_model(COUPLED, sigma0=0.0, horizon=1.0)


@pytest.fixture
def tanh_model():
    return nonlinear_model(0.1, LqSpec(lam=0.5, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5), 0.0, 1.0)
