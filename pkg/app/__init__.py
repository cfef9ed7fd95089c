# app/__init__.py

from . import adaptive
from . import blending
from . import coupling
from . import estimator
from . import femesh
from . import lattice
from . import potential
from . import utils

__all__ = ["adaptive", "blending", "coupling", "estimator", "femesh", "lattice", "potential", "utils"]
