"""Small dense numerical kernels with hand-written backward passes.

Every op is a pair ``*_forward`` / ``*_backward``; forwards return the output
and a cache consumed by the matching backward. Arrays are float64 numpy
arrays; leading batch axes are allowed wherever the last axis is the feature
axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# -- affine -----------------------------------------------------------------


def affine_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b, (x, W)


def affine_backward(dy, cache, param_grads=True):
    x, W = cache
    dx = dy @ W.T
    if not param_grads:
        return dx, None, None
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# -- activations ------------------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dy, x):
    # subgradient at 0 is 0
    return dy * (x > 0)


def gelu_forward(x):
    """Exact GeLU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2)), x


def gelu_backward(dy, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax_forward(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def dropout_forward(x, p, train, rng=None):
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if not train or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# -- loss -------------------------------------------------------------------


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"huber: pred{pred.shape} target{target.shape}")
    r = pred - target
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r)) / r.size
    return float(loss.mean()), grad


# -- optimisation -----------------------------------------------------------


class CosineSchedule:
    def __init__(self, base_lr, total):
        self.base_lr = base_lr
        self.total = total

    def __call__(self, t):
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / self.total))


class StepSchedule:
    """``base * factor ** (number of milestones <= t)``."""

    def __init__(self, base_lr, milestones, factor):
        self.base_lr = base_lr
        self.milestones = tuple(sorted(milestones))
        self.factor = factor

    @classmethod
    def thirds(cls, base_lr, total, factor):
        return cls(base_lr, (math.ceil(total / 3), math.ceil(2 * total / 3)), factor)

    def __call__(self, t):
        passed = sum(1 for m in self.milestones if t >= m)
        return self.base_lr * self.factor**passed


@dataclass
class SGD:
    """SGD with heavy-ball momentum and coupled weight decay.

    ``v <- m*v + g + wd*theta``; ``theta <- theta - lr(t)*v``. Parameters are
    updated in place.
    """

    schedule: object
    momentum: float = 0.9
    weight_decay: float = 1e-4
    t: int = 0
    velocity: dict = field(default_factory=dict)

    def lr(self):
        return self.schedule(self.t)

    def step(self, params: dict, grads: dict):
        lr = self.lr()
        for name, theta in params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise ShapeError(f"gradient for {name}: {g.shape} != {theta.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(theta)
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * theta
            theta -= lr * v
        self.t += 1


def sgd_step(params: dict, grads: dict, state: SGD) -> dict:
    state.step(params, grads)
    return params


# -- testing helper -----------------------------------------------------------


def grad_check(f, x, analytic, h=1e-6, n_coords=None, rng=None):
    """Max ``|analytic - numeric| / max(1, |numeric|)`` over (sampled) coordinates.

    ``f`` maps the array ``x`` to a scalar; ``x`` is perturbed in place and
    restored. Central differences with step ``h``.
    """
    x = np.asarray(x)
    analytic = np.asarray(analytic)
    flat = x.reshape(-1)
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        coords = np.random.default_rng(rng).choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("objective is not finite near the check point")
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num)))
    return worst
