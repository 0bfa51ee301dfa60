"""Gradient estimators for stochastic binary networks.

Exact enumeration oracle, the path-sample-analytic (PSA) estimator, straight-through
variants, REINFORCE, and a harness for measuring estimator accuracy.
"""

from .errors import CapacityError, ContractError, DivergenceError, DomainError, SBNError, ShapeError
from .estimators import (
    EwaBaselineState,
    delta_conv_apply,
    delta_fc,
    hardst_gradient,
    psa_gradient,
    ratio_conv_apply,
    reinforce_gradient,
    st_gradient,
    tanh_relaxation_gradient,
)
from .gradient import GradientEstimate
from .model import (
    LOGISTIC,
    Conv2DLayer,
    FCLayer,
    Network,
    SampleTrace,
    SoftmaxHead,
    expected_loss_mc,
    forward_sample,
    make_rng,
    predict_ensemble,
)
from .oracle import dataset_gradient, enumerate_expected_loss, enumerate_gradient, finite_diff_gradient
from .registry import ESTIMATOR_NAMES, batch_estimate
from .serialize import load_network, save_network
from .training import Dataset, NetworkSpec, gen_toy_data, init_network, lr_grid_search, train

__version__ = "0.1.0"
