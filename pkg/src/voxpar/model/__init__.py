"""Network builders, optimizers, serial oracle, and the training engine."""

from .engine import Plan, train_step, make_plan
from .networks import LayerSpec, NetworkSpec, build_cosmoflow, build_unet_mini
from .optim import OptimizerState, Schedule, adam_step, init_params, lr_at, sgd_step

__all__ = [n for n in dir() if not n.startswith("_")]
