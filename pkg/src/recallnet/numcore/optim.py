import numpy as np


class Adam:
    """Adam over a name -> Tensor mapping.

    ``step`` consumes whatever is in ``grad`` and does not clear it; call
    ``zero_grad`` before the next backward pass.  ``maximize`` turns the
    update into ascent.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, maximize=False):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.sign = 1.0 if maximize else -1.0
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad ** 2
            if self.lr == 0.0:
                continue
            p.data += self.sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-2, maximize=False):
        self.params = dict(params)
        self.lr = lr
        self.sign = 1.0 if maximize else -1.0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        if self.lr == 0.0:
            return
        for p in self.params.values():
            if p.grad is not None:
                p.data += self.sign * self.lr * p.grad


def make_optimizer(kind, params, lr, maximize=False):
    if kind == "adam":
        return Adam(params, lr=lr, maximize=maximize)
    if kind == "sgd":
        return SGD(params, lr=lr, maximize=maximize)
    raise ValueError(f"unknown optimizer {kind!r}")
