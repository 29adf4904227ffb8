"""Named trainable parameters and deterministic initializers."""

import numpy as np


class Parameter:
    """A named weight array with a same-shape gradient accumulator.

    Layers accumulate into ``grad`` during backward; the optimizer consumes
    and the trainer zeroes it between steps. Names must be unique within a
    model because they key the checkpoint format.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) samples re-drawn until within 2 std (ConvNeXt-style init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)
