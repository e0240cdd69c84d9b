"""Safe policies with jointly learned energy-function certificates.

A constrained actor-critic learner trains the policy while a distance-based
energy function ``phi = (sigma + d_min)^n - d^n - k d_dot`` is tuned on a
slower timescale, with a magnitude penalty that keeps it from growing more
conservative than it needs to be. Grid oracles check the outcome.
"""

from .config import ExperimentConfig, load_config, parse_config, preset
from .estimator import SafeMR
from .safety_index import DistanceFeature, MagRegWeights, SafetyIndexParams

__all__ = ["ExperimentConfig", "load_config", "parse_config", "preset", "SafeMR",
           "DistanceFeature", "MagRegWeights", "SafetyIndexParams"]
__version__ = "0.1.0"
