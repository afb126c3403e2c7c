"""Hot numerical kernels.

The compiled extension ``_ckernels`` is used when it has been built; otherwise
the numpy/scipy implementations in ``_pykernels`` are loaded.  Set
``RACESTACK_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python

cython = None
if os.environ.get("RACESTACK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as cython
    except ImportError:  # extension not built
        cython = None

active = cython if cython is not None else python
BACKEND = active.BACKEND

ransac_hypotheses = active.ransac_hypotheses
raycast = active.raycast
grid_cluster = active.grid_cluster
layer_smoothness = active.layer_smoothness
plane_patches = active.plane_patches

__all__ = ["BACKEND", "python", "cython", "ransac_hypotheses", "raycast", "grid_cluster", "layer_smoothness", "plane_patches"]
