"""Minimal dense reverse-mode autodiff used by every trainable component."""
from vvdet.autodiff import ops
from vvdet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from vvdet.autodiff.gradcheck import GradCheckReport, grad_check
from vvdet.autodiff.nn import MLP, BatchNorm1d, Linear, MlpSpec, Module, Parameter
from vvdet.autodiff.optim import AdamW, one_cycle_lr, sgd_adam_step
from vvdet.autodiff.value import ShapeError, Value, as_value


def forward(op, *inputs, **kwargs):
    """Apply the named op, e.g. ``forward("relu", x)``; names use dashes or underscores."""
    name = op.replace("-", "_")
    aliases = {"mul_by_scalar": "scale", "reduce_max_by_group": "segment_max",
               "reduce_mean_by_group": "segment_mean"}
    fn = getattr(ops, aliases.get(name, name), None)
    if fn is None:
        raise ValueError(f"unknown op {op!r}")
    return fn(*inputs, **kwargs)


__all__ = [
    "AdamW", "BatchNorm1d", "GradCheckReport", "Linear", "MLP", "MlpSpec", "Module", "Parameter",
    "ShapeError", "Value", "as_value", "forward", "grad_check", "load_checkpoint", "one_cycle_lr",
    "ops", "save_checkpoint", "sgd_adam_step",
]
