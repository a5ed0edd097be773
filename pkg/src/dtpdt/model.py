"""Small 3D encoder-decoder (UNet-style) built on :mod:`dtpdt.tensor`.

Each block is two 3^3 convolutions, each followed by instance norm (optional)
and a leaky ReLU. Downsampling is 2x average pooling, upsampling is nearest
neighbour followed by concatenation with the skip path.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class ToyUNetConfig:
    levels: int = 2
    base_channels: int = 8
    crop: tuple = (32, 32, 32)
    instance_norm: bool = True
    seed: int = 0
    slope: float = 0.01

    def __post_init__(self):
        if self.levels < 0 or self.base_channels < 1:
            raise ValueError("levels must be >= 0 and base_channels >= 1")
        q = 2 ** self.levels
        if any(c % q for c in self.crop):
            raise ValueError(f"crop dims {self.crop} must be divisible by 2^levels = {q}")


class ToyUNet:
    def __init__(self, cfg=ToyUNetConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.params = {}
        c = cfg.base_channels
        chans = [c * 2 ** i for i in range(cfg.levels + 1)]

        def conv(name, ci, co, k=3):
            std = np.sqrt(2.0 / (ci * k ** 3))
            self.params[name + ".w"] = T.param(rng.normal(0.0, std, (co, ci, k, k, k)), name + ".w")
            self.params[name + ".b"] = T.param(np.zeros(co), name + ".b")

        ci = 1
        for i, co in enumerate(chans):
            conv(f"enc{i}.0", ci, co)
            conv(f"enc{i}.1", co, co)
            ci = co
        for i in reversed(range(cfg.levels)):
            conv(f"dec{i}.0", chans[i + 1] + chans[i], chans[i])
            conv(f"dec{i}.1", chans[i], chans[i])
        conv("head", chans[0], 2, k=1)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def _conv(self, name, x, act=True):
        y = T.conv_layer(x, self.params[name + ".w"], self.params[name + ".b"])
        if not act:
            return y
        if self.cfg.instance_norm:
            y = T.instance_norm(y)
        return T.leaky_relu(y, self.cfg.slope)

    def _block(self, name, x):
        return self._conv(name + ".1", self._conv(name + ".0", x))

    def forward(self, x):
        """(X, Y, Z) or (1, X, Y, Z) input -> (2, X, Y, Z) logits node."""
        x = T.as_node(x)
        if x.value.ndim == 3:
            x = T.DiffNode(x.value[None])
        q = 2 ** self.cfg.levels
        if any(s % q for s in x.shape[1:]):
            raise ValueError(f"input dims {x.shape[1:]} must be divisible by {q}")
        skips = []
        h = x
        for i in range(self.cfg.levels):
            h = self._block(f"enc{i}", h)
            skips.append(h)
            h = T.avgpool2(h)
        h = self._block(f"enc{self.cfg.levels}", h)
        for i in reversed(range(self.cfg.levels)):
            h = T.concat([T.upsample2(h), skips[i]])
            h = self._block(f"dec{i}", h)
        return self._conv("head", h, act=False)

    def probabilities(self, x):
        """(p_bg, p_fg) nodes."""
        logits = self.forward(x)
        return T.channel_softmax((T.take(logits, 0), T.take(logits, 1)))

    def state_arrays(self):
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays):
        for k, v in arrays.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].value[...] = v


class Adam:
    def __init__(self, params, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
