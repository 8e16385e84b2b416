"""splitstream: rare-event probability estimation for deterministic chaotic
systems via genealogical importance splitting, with pluggable cloning
strategies (random perturbations or a conditional generative model)."""

from .dynsys import SystemKind, SystemSpec, InitialConditionSampler  # noqa: F401
from .errors import SplitstreamError  # noqa: F401

__version__ = "0.1.0"
