"""Kernel-independent fast multipole method for the 3D Laplace kernel.

Equivalent-density expansions on cube surface grids, a Morton-keyed octree
over separate source and target point sets, and two interchangeable field
translation back ends: a low-rank BLAS operator chain and an FFT
convolution over sibling clusters.
"""

from .engine import FmmConfig, FmmInstance, attach_charges, evaluate, setup
from .hotloops import BACKEND, COMPILED

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "COMPILED",
    "FmmConfig",
    "FmmInstance",
    "attach_charges",
    "evaluate",
    "setup",
    "__version__",
]
