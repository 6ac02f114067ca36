"""Dataset distillation with Kernel Inducing Points and Label Solve."""

__version__ = "0.1.0"
