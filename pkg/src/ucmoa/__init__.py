"""Utility-conditioned multi-objective alignment on a desk-scale simulator.

Modules:

* ``monotone_net``: monotone utility networks and their strict variant
* ``ensemble``: diversity-promoting ensemble training and serialization
* ``reward_stats``: return normalization and percentile ranks
* ``labeler``: max-percentile token labeling of scored samples
* ``inference``: preference vector to conditioning token
* ``policy_sim``: synthetic environment, conditioned policy, offline/online training
* ``metrics``: Pareto fronts, hypervolume, distributional metrics
* ``cli``: the ``ucmoa`` command
"""

from .ensemble import EnsembleConfig, UtilityEnsemble, linear_ensemble, load_ensemble, save_ensemble, train_ensemble
from .errors import (
    ConfigError,
    DataError,
    DegenerateRangeError,
    NumericError,
    ParseError,
    ShapeError,
    StateError,
    TrainingDivergenceError,
    UCMOAError,
)
from .monotone_net import MonotoneLayer, MonotoneNet, StrictUtility, forward, strict_forward

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateRangeError",
    "EnsembleConfig",
    "MonotoneLayer",
    "MonotoneNet",
    "NumericError",
    "ParseError",
    "ShapeError",
    "StateError",
    "StrictUtility",
    "TrainingDivergenceError",
    "UCMOAError",
    "UtilityEnsemble",
    "forward",
    "linear_ensemble",
    "load_ensemble",
    "save_ensemble",
    "strict_forward",
    "train_ensemble",
]
