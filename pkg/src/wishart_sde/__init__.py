"""Variational inference for SDE flows with Wishart-process diffusion."""

from .dynamics import DynamicalModel, SequenceBatch, forecast, obs_loglik
from .errors import (ConfigError, ContractError, DimensionError, DivergenceError,
                     NumericalError, ParseError, SchemaError, SingularityError, TrainingError,
                     WishartSDEError)
from .kernels import RbfArdKernel
from .models import RegressionModel, build_regression_model
from .sdeflow import FlowConfig, NoiseStream
from .svgp import SvgpLayer
from .train import Schedule, fit
from .wishart import WishartDiffusion

__version__ = "0.1.0"
