"""Group knowledge transfer: edge/server split training with feature and logit exchange.

Subpackages: :mod:`gkt.tensor` (autodiff core), :mod:`gkt.models`,
:mod:`gkt.distillation`, :mod:`gkt.data`, :mod:`gkt.protocol`,
:mod:`gkt.orchestrator`, :mod:`gkt.accounting`, :mod:`gkt.cli`.
"""

__version__ = "0.1.0"

from .estimators import CentralizedClassifier, FedAvgClassifier, GKTClassifier  # noqa: E402
from .orchestrator import GktConfig, OptimizerSpec, run_centralized, run_fedavg, run_gkt  # noqa: E402

__all__ = [
    "CentralizedClassifier",
    "FedAvgClassifier",
    "GKTClassifier",
    "GktConfig",
    "OptimizerSpec",
    "__version__",
    "run_centralized",
    "run_fedavg",
    "run_gkt",
]
