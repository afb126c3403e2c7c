import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from racestack import _kernels

settings.register_profile(
    "racestack", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("racestack")

BACKENDS = [_kernels.python] + ([_kernels.cython] if _kernels.cython is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda m: m.BACKEND)
def backend(request, monkeypatch):
    """Swap every kernel for the chosen backend for the duration of a test."""
    mod = request.param
    for name in ("ransac_hypotheses", "raycast", "grid_cluster", "layer_smoothness", "plane_patches"):
        monkeypatch.setattr(_kernels, name, getattr(mod, name))
    return mod


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
