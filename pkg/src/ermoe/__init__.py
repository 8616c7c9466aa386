"""Eigen-reparameterized mixture of experts on a small numpy autodiff tape."""

from .analysis import posthoc_calibrate, tail_mass, usage_curve
from .backbone import Model, ModelConfig, age_expectation_head, warm_start_regions
from .baselines import LogitRouter, load_balance_loss
from .expert import EigenExpert, ExpertBank, expert_forward, expert_weight, ortho_penalty, reorthogonalize
from .router import RouterConfig, route_token, select_experts
from .tensor import Tensor, backward
from .training import TrainConfig, gradcheck, train

__version__ = "0.1.0"
