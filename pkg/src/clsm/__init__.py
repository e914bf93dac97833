"""Joint latent-space model of social links and user behaviors."""

from .core import BehaviorData, FittedModel, Graph, Hyperparams, VariationalState
from .inference import FitConfig, FitReport, fit

__version__ = "0.1.0"

__all__ = ["BehaviorData", "FitConfig", "FitReport", "FittedModel", "Graph",
           "Hyperparams", "VariationalState", "fit"]
