"""Minimal dense tensor kernels with hand-written backward passes.

Tensors are plain numpy arrays: activations are NCHW, dense weights are
(out, in). Every differentiable op in :mod:`awdvision.engine.ops` comes as a
forward/backward pair; forwards return ``(y, cache)`` and backwards take
``(dy, cache)`` and return the input gradients. Nothing here mutates its
inputs, so ops are safe for concurrent read-only use.
"""

from awdvision.engine.params import Parameter, trunc_normal
from awdvision.engine.checkpoint import save_checkpoint, load_checkpoint

__all__ = ["Parameter", "trunc_normal", "save_checkpoint", "load_checkpoint"]
