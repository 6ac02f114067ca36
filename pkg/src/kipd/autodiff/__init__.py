from kipd.autodiff.engine import Node, Tape, value
from kipd.autodiff.check import GradCheck, grad_check, numeric_gradient
from kipd.autodiff.kip_grad import grad_kip_loss

__all__ = ["Node", "Tape", "value", "GradCheck", "grad_check", "numeric_gradient",
           "grad_kip_loss"]
