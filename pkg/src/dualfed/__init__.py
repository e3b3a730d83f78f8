"""Desk-scale simulator for dual-representation personalized federated
learning: a shared encoder with a local projection network, two classifiers
reading different representation stages, two-stage local training, uniform
aggregation, and the representation-geometry metrics used to study it."""

from .config import RunConfig, parse_config
from .data import SyntheticSpec, generate_synthetic, load_flatfile
from .errors import DualFedError
from .losses import LossConfig, cross_entropy, stage1_loss, sup_con_loss
from .metrics import accuracy, class_separation, cross_client_cka, linear_cka
from .model import ArchConfig, ModelParams, init_params
from .protocol import TrainConfig, run_federation
from .runner import compare_runs, run_experiment
from .tensor import Tensor, finite_diff_grad
from .variants import MethodVariant, make_variant

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "DualFedError",
    "LossConfig",
    "MethodVariant",
    "ModelParams",
    "RunConfig",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "accuracy",
    "class_separation",
    "compare_runs",
    "cross_client_cka",
    "cross_entropy",
    "finite_diff_grad",
    "generate_synthetic",
    "init_params",
    "linear_cka",
    "load_flatfile",
    "make_variant",
    "parse_config",
    "run_experiment",
    "run_federation",
    "stage1_loss",
    "sup_con_loss",
    "__version__",
]
