"""AdamW with an optional one-cycle learning-rate schedule."""
import math

import numpy as np


class AdamW:
    """Decoupled weight decay Adam.

    Parameters without a gradient are skipped (they still get the weight
    decay shrinkage only when ``decay_without_grad`` is set).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.01,
                 decay_without_grad=True):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_without_grad = decay_without_grad
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                if self.decay_without_grad:
                    p.data *= 1.0 - lr * self.weight_decay
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}


def sgd_adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.01):
    """Functional AdamW step on plain arrays.

    ``state`` is a dict holding ``t``, ``m`` and ``v``; it is created on first
    use and updated in place. Returns the list of new parameter arrays.
    """
    if "t" not in state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    out = []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        step = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p * (1 - lr * weight_decay) - lr * step)
    return out


def one_cycle_lr(step, total, max_lr, pct_start=0.3, div_factor=10.0, final_div=100.0):
    """Cosine one-cycle schedule: warm up to ``max_lr`` then anneal."""
    total = max(int(total), 1)
    warm = max(int(total * pct_start), 1)
    start = max_lr / div_factor
    end = max_lr / (div_factor * final_div)
    if step < warm:
        t = step / warm
        return start + (max_lr - start) * 0.5 * (1 - math.cos(math.pi * t))
    t = min((step - warm) / max(total - warm, 1), 1.0)
    return end + (max_lr - end) * 0.5 * (1 + math.cos(math.pi * t))
