"""Deep conditional transformation models for ordinal outcomes from images and tables."""
from .latent import LatentDistribution, get_latent
from .models import (MODEL_NAMES, ModelSpec, TransformationModel, linear_coefficients,
                     load_model, make_spec, save_model)
from .ensemble import TransformationEnsemble
from .train import SplitPlan, TrainConfig, fit, make_splits
from .data import Dataset, SyntheticSpec, generate_synthetic

__version__ = "0.1.0"
