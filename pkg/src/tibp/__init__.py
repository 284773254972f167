"""Transformed Indian buffet process models for real-valued images."""

from .core import (IBP_LG, LG_TIBP, M_TIBP, Dataset, Hyperparameters, ModelState, RunConfig,
                   denormalize, init_state, normalize_dataset, prune_empty_features)
from .transform import Transformation, TransformationSpace

__version__ = "0.1.0"
