# optim.py
#
# Adam and central-difference gradient checking, shared by the
# representation and BC trainers. Parameters are dicts of float64 torch
# tensors updated in place; gradients come from autograd or from a
# closed form, the optimizer does not care which.
#
#----------------------------------------------------------------------

import logging
import math

import torch

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
FD_STEP = 1e-5


class Adam:
    """Bias-corrected Adam with optional decoupled (AdamW-style) weight decay.

    Decay multiplies a parameter by (1 - lr * weight_decay) before its
    moment update; `decay` names the parameters it applies to (None: all).
    """

    def __init__(self, lr=0.01, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS, weight_decay=0.0, decay=None):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0 or lr * weight_decay >= 1.0:
            raise ValueError(f"weight decay must satisfy 0 <= lr * weight_decay < 1, got {weight_decay}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = None if decay is None else frozenset(decay)

        # first / second moment estimates, keyed like the params
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """One bias-corrected update of every tensor in `params`, in place."""
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(params[name].shape)}")
            if not torch.isfinite(g).all():
                raise ValueError(f"{name}: non-finite gradient")

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        with torch.no_grad():
            for name, g in grads.items():
                p = params[name]
                if self.weight_decay and (self.decay is None or name in self.decay):
                    p.mul_(1.0 - self.lr * self.weight_decay)
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                denom = (self.v[name] / bc2).sqrt_().add_(self.eps)
                p.addcdiv_(self.m[name], denom, value=-step_size)

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


def adam_step(state, params, grads):
    """Functional form of Adam.step; returns the (updated) params."""
    state.step(params, grads)
    return params


def finite_diff_grad(loss_fn, params, h=FD_STEP):
    """Central-difference gradient of loss_fn(params) for every coordinate.

    loss_fn must be deterministic; params are perturbed in place and
    restored before returning.
    """
    grads = {}
    with torch.no_grad():
        base = float(loss_fn(params))
        if not math.isfinite(base):
            raise ValueError("loss is not finite at the evaluation point")
        for name, p in params.items():
            grad = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn(params))
                flat[i] = orig - h
                down = float(loss_fn(params))
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise ValueError(f"{name}[{i}]: loss is not finite under perturbation")
                gflat[i] = (up - down) / (2.0 * h)
            grads[name] = grad
    return grads


def relative_error(analytic, numeric, tiny=1e-12):
    """‖a - n‖ / max(‖a‖ + ‖n‖, tiny) over all entries of two gradient dicts."""
    diff = 0.0
    norm_a = 0.0
    norm_n = 0.0
    for name in analytic:
        a = analytic[name].detach().reshape(-1).to(torch.float64)
        n = numeric[name].detach().reshape(-1).to(torch.float64)
        diff += float(((a - n) ** 2).sum())
        norm_a += float((a ** 2).sum())
        norm_n += float((n ** 2).sum())
    return diff ** 0.5 / max(norm_a ** 0.5 + norm_n ** 0.5, tiny)
