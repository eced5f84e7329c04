"""Semi-supervised learning with memory-smoothed pseudo-labels and graph contrastive regularization."""

from .errors import DegenerateInputError, InvalidArgumentError, NumericError, ParseError, StateError
from .experiment import ExperimentConfig, run_eval, run_gradcheck, run_oracle, run_train
from .model import ModelSizes
from .trainer import HyperParams, TrainState, evaluate, init_train_state, train_step

__version__ = "0.1.0"
