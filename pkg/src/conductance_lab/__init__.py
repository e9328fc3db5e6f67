"""Biased random walks among random conductances: simulation and estimation."""

import numba

# the TBB layer shipped with some numba wheels is too old; workqueue is always present
numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"
