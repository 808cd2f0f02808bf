"""A small from-scratch deep-learning stack built around a learnable,
LSTM-based pooling layer, with the experiment harness that compares it
against fixed max/average pooling."""

__version__ = "0.1.0"

from .autodiff import NonFiniteError, ShapeMismatch, Tensor  # noqa: F401
from .gradcheck import grad_check  # noqa: F401
from .pooling import LstmPoolParams, init_pool_params, lstm_pool_fused  # noqa: F401
