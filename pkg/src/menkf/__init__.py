"""Mollified ensemble Kalman filtering on a slow-fast Lorenz-96 model.

The package provides the model (a Lorenz-96 system coupled to fast gravity
waves), symmetric time steppers, ensemble statistics with localization and
inflation, synthetic observations, the standard / mollified / incremental
analysis update filter drivers, and the twin-experiment orchestration that
reproduces the balance and RMSE studies.

Numerical hot loops live in `menkf._backend`, which selects a compiled
Cython extension when available and an equivalent NumPy implementation
otherwise (`MENKF_BACKEND=python|cython` forces the choice).
"""

from ._backend import BACKEND as backend_name
from ._backend import available_backends

__version__ = "0.1.0"

__all__ = ["__version__", "backend_name", "available_backends"]
