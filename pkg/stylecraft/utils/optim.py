#!/usr/bin/python3

import math

import numpy as np


def cosine_lr(base_lr, step, total_steps, floor=0.0):
    if total_steps <= 1:
        return base_lr
    progress = min(step, total_steps - 1) / float(total_steps - 1)
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam(object):

    def __init__(self, named_params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.named_params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (p.grad ** 2)
            update = lr * (self.m[i] / correction1) / (np.sqrt(self.v[i] / correction2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None
