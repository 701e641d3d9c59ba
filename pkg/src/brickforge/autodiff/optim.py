"""Adam with bias correction and decoupled weight decay."""

import numpy as np


def init_adam_state():
    return {"step": 0, "m": {}, "v": {}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Update ``params`` (name -> array) in place.

    Decay is decoupled from the gradient: ``p <- p - lr * wd * p`` before the
    moment update.  Parameters without a gradient are left untouched.
    """
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state["m"].get(name)
        if m is None:
            m = state["m"][name] = np.zeros_like(p)
            state["v"][name] = np.zeros_like(p)
        v = state["v"][name]
        if weight_decay:
            p -= p * p.dtype.type(lr * weight_decay)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return params, state


class Adam:
    def __init__(self, module, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.module = module
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = init_adam_state()

    def step(self):
        named = self.module.named_parameters()
        params = {k: p.data for k, p in named.items()}
        grads = {k: p.grad for k, p in named.items() if p.grad is not None}
        adam_step(params, grads, self.state, self.lr, self.betas[0], self.betas[1],
                  self.eps, self.weight_decay)

    def zero_grad(self):
        self.module.zero_grad()
