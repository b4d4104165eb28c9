"""Offline learning for d-rectangular linear robust regularized MDPs."""
from .duals import AlphaSearchConfig, Conjugate, DualResult
from .mdp_core import (DivergenceSpec, FeatureMap, OfflineDataset, Policy, TabularLinearMDP, TabularMDP,
                       collect_dataset, empirical_visitation, validate_linear_mdp)

__all__ = ["AlphaSearchConfig", "Conjugate", "DualResult", "DivergenceSpec", "FeatureMap", "OfflineDataset",
           "Policy", "TabularLinearMDP", "TabularMDP", "collect_dataset", "empirical_visitation",
           "validate_linear_mdp"]
__version__ = "0.1.0"
