"""Diversity-regularized ensembles."""

from ._divens import *  # noqa: F401,F403
from ._divens import __doc__  # noqa: F401
