"""Reusable network blocks: conv-bn-act, depthwise-separable blocks, SE,
RSEConv, Global Mix Block (pre-norm transformer block) and the
non-autoregressive attention guide decoder used only at training time.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from . import tensor as T
from .errors import ConfigError
from .module import Module
from .tensor import Tensor


def _kaiming(rng: np.random.Generator, shape) -> Tensor:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, np.float32), requires_grad=True)


_ACTS = {
    "relu": T.relu,
    "hardswish": T.hardswish,
    "sigmoid": T.sigmoid,
    "none": lambda x: x,
}


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = _kaiming(rng, (din, dout))
        self.b = _zeros((dout,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class ConvBNAct(Module):
    """Conv (no bias) + norm + activation.

    norm="batch" keeps running statistics (detector default); norm="group"
    is stateless per-sample group norm, identical in train and eval mode
    (the recognizer needs this for its train/infer bit-equality contract).
    """

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride=1, groups: int = 1, act: str = "hardswish",
                 norm: str = "batch"):
        super().__init__()
        if norm not in ("batch", "group"):
            raise ConfigError(f"unknown norm kind '{norm}'")
        self.stride = stride
        self.groups = groups
        self.pad = k // 2
        self.w = _kaiming(rng, (cout, cin // groups, k, k))
        self.gamma = _ones((cout,))
        self.beta = _zeros((cout,))
        self.norm = norm
        if norm == "batch":
            self.running_mean = np.zeros(cout, np.float32)
            self.running_var = np.ones(cout, np.float32)
        else:
            self.norm_groups = 8
            while cout % self.norm_groups:
                self.norm_groups //= 2
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = K.conv2d(x, self.w, stride=self.stride, padding=self.pad, groups=self.groups)
        if self.norm == "batch":
            y = K.batch_norm(y, self.gamma, self.beta, self.running_mean,
                             self.running_var, training=self.training)
        else:
            y = K.group_norm(y, self.gamma, self.beta, self.norm_groups)
        return _ACTS[self.act](y)


class SEBlock(Module):
    """Channel gate: sigmoid(W2 relu(W1 gap(x))) applied per channel."""

    def __init__(self, c: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        if c < reduction or c % reduction:
            raise ConfigError(f"SE channels ({c}) must be a positive multiple of reduction ({reduction})")
        self.c = c
        self.fc1 = Linear(c, c // reduction, rng)
        self.fc2 = Linear(c // reduction, c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        g = K.adaptive_avg_pool2d(x, (1, 1))
        g = T.reshape(g, (b, self.c))
        g = T.sigmoid(self.fc2(T.relu(self.fc1(g))))
        return x * T.reshape(g, (b, self.c, 1, 1))


class RSEConv(Module):
    """3x3 conv-bn-act with an SE gate and a residual bypass.

    The residual keeps channel information alive even when the SE gate
    closes, so requires in_channels == out_channels.
    """

    def __init__(self, c: int, rng: np.random.Generator, act: str = "relu"):
        super().__init__()
        self.conv = ConvBNAct(c, c, 3, rng, act=act)
        self.se = SEBlock(c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.se(self.conv(x))


class DSBlock(Module):
    """Depthwise-separable block: depthwise k x k + pointwise 1x1, optional SE."""

    def __init__(self, cin: int, cout: int, k: int, stride, rng: np.random.Generator,
                 se: bool = False, act: str = "hardswish", norm: str = "batch"):
        super().__init__()
        self.dw = ConvBNAct(cin, cin, k, rng, stride=stride, groups=cin, act=act, norm=norm)
        self.se = SEBlock(cin, rng) if se else None
        self.pw = ConvBNAct(cin, cout, 1, rng, act=act, norm=norm)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.dw(x)
        if self.se is not None:
            y = self.se(y)
        return self.pw(y)


class LCNetStage(Module):
    """A sequence of depthwise-separable blocks described by
    stage_cfg = [(kernel, stride, out_channels, se_flag), ...]."""

    def __init__(self, cin: int, stage_cfg, rng: np.random.Generator):
        super().__init__()
        blocks = []
        for k, stride, cout, se in stage_cfg:
            blocks.append(DSBlock(cin, cout, k, stride, rng, se=se))
            cin = cout
        self.blocks = blocks
        self.cout = cin

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


class GlobalMixBlock(Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        super().__init__()
        if d % heads:
            raise ConfigError(f"embedding dim {d} not divisible by heads {heads}")
        self.d = d
        self.heads = heads
        self.ln1_g, self.ln1_b = _ones((d,)), _zeros((d,))
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.ln2_g, self.ln2_b = _ones((d,)), _zeros((d,))
        self.mlp1 = Linear(d, d * mlp_ratio, rng)
        self.mlp2 = Linear(d * mlp_ratio, d, rng)
        self._last_attn = None  # numpy copy of the most recent attention weights

    def __call__(self, x: Tensor) -> Tensor:
        h = self.heads
        n = K.layer_norm(x, self.ln1_g, self.ln1_b)
        q = _split_heads(self.wq(n), h)
        k = _split_heads(self.wk(n), h)
        v = _split_heads(self.wv(n), h)
        scale = 1.0 / np.sqrt(self.d // h)
        attn = K.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        self._last_attn = attn.data
        x = x + self.wo(_merge_heads(T.matmul(attn, v)))
        n = K.layer_norm(x, self.ln2_g, self.ln2_b)
        return x + self.mlp2(T.hardswish(self.mlp1(n)))


class AttnGuideDecoder(Module):
    """Non-autoregressive cross-attention decoder with M learned position
    queries, emitting per-position logits over vocab + end-of-sequence.

    Training-signal only: inference never executes this module.
    """

    def __init__(self, d: int, m: int, n_classes: int, rng: np.random.Generator, heads: int = 1):
        super().__init__()
        self.d = d
        self.m = m
        self.heads = heads
        self.queries = Tensor((rng.standard_normal((m, d)) * 0.02).astype(np.float32),
                              requires_grad=True)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.cls = Linear(d, n_classes, rng)

    def __call__(self, enc: Tensor) -> Tensor:
        b = enc.shape[0]
        qin = T.expand_leading(self.queries, b)  # [B,M,D]
        q = _split_heads(self.wq(qin), self.heads)
        k = _split_heads(self.wk(enc), self.heads)
        v = _split_heads(self.wv(enc), self.heads)
        scale = 1.0 / np.sqrt(self.d // self.heads)
        attn = K.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        ctx = _merge_heads(T.matmul(attn, v))
        return self.cls(ctx + qin)
