"""SGD-with-momentum and ADAM parameter updates.

Both optimizers are pure functions of (state, params, grads) given the step
counter; learning-rate schedules are applied by the caller mutating `lr`.
"""

import numpy as np

from .errors import PoisonBenchError


class MissingGradError(PoisonBenchError):
    pass


class SGD:
    """v <- momentum*v + g + weight_decay*p;  p <- p - lr*v."""

    kind = "sgd_momentum"

    def __init__(self, params, lr, momentum=0.9, weight_decay=2e-4):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise MissingGradError(f"parameter {p.shape} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            v *= p.dtype.type(self.momentum)
            v += g
            p.data -= p.dtype.type(self.lr) * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Bias-corrected ADAM with betas (0.9, 0.999) and eps 1e-8."""

    kind = "adam"

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise MissingGradError(f"parameter {p.shape} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(kind, params, lr, momentum=0.9, weight_decay=2e-4):
    if kind == "sgd":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer kind {kind!r}")
