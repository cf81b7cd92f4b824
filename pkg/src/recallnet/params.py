import numpy as np

from .errors import DimensionError
from .numcore import parameter


def uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def fan_in_uniform(rng, shape, fan_in):
    return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)


class ParamSet:
    """Named trainable tensors of one network."""

    def __init__(self, arrays):
        self.tensors = {k: parameter(v) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def state(self):
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state):
        missing = set(self.tensors) - set(state)
        if missing:
            raise DimensionError(f"checkpoint lacks tensors: {sorted(missing)}")
        for k, t in self.tensors.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
            t.data = arr.copy()
            t.grad = None

    def subset(self, names):
        return {k: self.tensors[k] for k in names if k in self.tensors}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None
