"""DB-style text detector: small depthwise-separable pyramid backbone,
interchangeable necks (fpn / rse_fpn / lk_pan), DB head and detection loss.

All three necks map a 4-level pyramid (strides 4/8/16/32) to a single
[B, 4N, H/4, W/4] feature; probability / threshold / binary maps live at
stride 4, matching the target masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from . import tensor as T
from .blocks import ConvBNAct, DSBlock, RSEConv, _kaiming, _zeros
from .errors import ConfigError, ShapeError
from .module import Module
from .tensor import Tensor


@dataclass
class DetConfig:
    width_mult: float = 1.0
    neck: str = "fpn"                 # fpn | rse_fpn | lk_pan
    neck_ch: int = 64                 # N
    k: float = 50.0                   # binarization amplification
    alpha: float = 1.0                # binary-map loss weight
    beta: float = 10.0                # threshold-map loss weight
    role: str = "student"
    depth: int = 1                    # DS blocks per backbone stage
    seed: int = 0

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigError("binarization amplification k must be > 0")
        if self.neck not in ("fpn", "rse_fpn", "lk_pan"):
            raise ConfigError(f"unknown neck kind '{self.neck}'")
        if self.neck == "lk_pan" and self.role != "teacher":
            raise ConfigError("lk_pan neck is reserved for teacher configs")


def teacher_config(**kw) -> DetConfig:
    kw.setdefault("width_mult", 2.0)
    kw.setdefault("neck", "lk_pan")
    kw.setdefault("depth", 2)
    kw.setdefault("role", "teacher")
    return DetConfig(**kw)


@dataclass
class FeaturePyramid:
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def levels(self):
        return [self.c2, self.c3, self.c4, self.c5]


@dataclass
class DetOutput:
    prob_map: Tensor      # [B,1,H/4,W/4], sigmoid
    thresh_map: Tensor    # same shape, sigmoid
    binary_map: Tensor    # sigmoid(k * (P - T))


def _widths(mult: float):
    base = (16, 24, 32, 48, 64)  # stem, C2..C5
    return [max(4, int(round(c * mult / 4)) * 4) for c in base]


class Backbone(Module):
    """Four-stage depthwise-separable stack, SE in the last two stages."""

    def __init__(self, cfg: DetConfig, rng: np.random.Generator):
        super().__init__()
        stem_c, c2, c3, c4, c5 = _widths(cfg.width_mult)
        self.stem = ConvBNAct(3, stem_c, 3, rng, stride=2)
        self.stages = []
        cin = stem_c
        for cout, se in ((c2, False), (c3, False), (c4, True), (c5, True)):
            blocks = [DSBlock(cin, cout, 3, 2, rng, se=se)]
            for _ in range(cfg.depth - 1):
                blocks.append(DSBlock(cout, cout, 3, 1, rng, se=se))
            self.stages.append(blocks)
            cin = cout
        # flatten for module discovery
        self.stage_blocks = [b for stage in self.stages for b in stage]
        self.channels = (c2, c3, c4, c5)

    def __call__(self, img: Tensor) -> FeaturePyramid:
        b, c, h, w = img.shape
        if h % 32 or w % 32:
            raise ShapeError(f"backbone input extents must be multiples of 32, got {h}x{w}")
        x = self.stem(img)
        feats = []
        for stage in self.stages:
            for blk in stage:
                x = blk(x)
            feats.append(x)
        return FeaturePyramid(*feats)


class PlainConv(Module):
    """Conv with bias, no norm (neck lateral / smoothing convolutions)."""

    def __init__(self, cin, cout, k, rng, stride=1, groups=1):
        super().__init__()
        self.w = _kaiming(rng, (cout, cin // groups, k, k))
        self.b = _zeros((cout,))
        self.stride = stride
        self.pad = k // 2
        self.groups = groups

    def __call__(self, x):
        return K.conv2d(x, self.w, bias=self.b, stride=self.stride,
                        padding=self.pad, groups=self.groups)


class Neck(Module):
    """FPN-family neck. All kinds share the lateral + top-down wiring;
    rse_fpn swaps the 3x3 convs for RSEConv, lk_pan adds a bottom-up
    path-augmentation pass with depthwise 9x9 + pointwise 1x1 convs."""

    def __init__(self, kind: str, in_channels, n: int, rng: np.random.Generator):
        super().__init__()
        self.kind = kind
        self.n = n
        self.laterals = [PlainConv(c, n, 1, rng) for c in in_channels]
        if kind == "fpn":
            self.smooth = [PlainConv(n, n, 3, rng) for _ in range(4)]
        elif kind == "rse_fpn":
            self.smooth = [RSEConv(n, rng) for _ in range(4)]
        elif kind == "lk_pan":
            self.smooth = [PlainConv(n, n, 3, rng) for _ in range(4)]
            self.down_dw = [PlainConv(n, n, 9, rng, stride=2, groups=n) for _ in range(3)]
            self.down_pw = [PlainConv(n, n, 1, rng) for _ in range(3)]
        else:
            raise ConfigError(f"unknown neck kind '{kind}'")

    def __call__(self, pyr: FeaturePyramid) -> Tensor:
        lat = [l(x) for l, x in zip(self.laterals, pyr.levels())]  # strides 4..32
        # top-down: upsample + add, then smooth
        tops = [None] * 4
        tops[3] = lat[3]
        for i in (2, 1, 0):
            tops[i] = lat[i] + K.upsample_nearest2x(tops[i + 1])
        p = [self.smooth[i](tops[i]) for i in range(4)]
        if self.kind == "lk_pan":
            q = [p[0]]
            for i in range(3):
                q.append(p[i + 1] + self.down_pw[i](self.down_dw[i](q[i])))
            p = q
        up = [p[0]]
        for i, scale in ((1, 2), (2, 4), (3, 8)):
            up.append(K.upsample_nearest2x(p[i], scale))
        return T.concat(up, axis=1)


class DBHead(Module):
    """Two sibling conv towers at stride 4 producing the probability and
    threshold maps; the approximate binary map is sigmoid(k (P - T))."""

    def __init__(self, cin: int, n: int, k: float, rng: np.random.Generator):
        super().__init__()
        self.k = k
        self.p_tower = [ConvBNAct(cin, n, 3, rng, act="relu"),
                        ConvBNAct(n, n, 3, rng, act="relu"),
                        PlainConv(n, 1, 1, rng)]
        self.t_tower = [ConvBNAct(cin, n, 3, rng, act="relu"),
                        ConvBNAct(n, n, 3, rng, act="relu"),
                        PlainConv(n, 1, 1, rng)]

    def _run(self, tower, x):
        for layer in tower:
            x = layer(x)
        return T.sigmoid(x)

    def __call__(self, x: Tensor) -> DetOutput:
        p = self._run(self.p_tower, x)
        t = self._run(self.t_tower, x)
        bhat = T.sigmoid((p - t) * self.k)
        return DetOutput(p, t, bhat)


class DetModel(Module):
    def __init__(self, cfg: DetConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(cfg, rng)
        self.neck = Neck(cfg.neck, self.backbone.channels, cfg.neck_ch, rng)
        self.head = DBHead(4 * cfg.neck_ch, cfg.neck_ch, cfg.k, rng)

    def __call__(self, img: Tensor) -> DetOutput:
        return self.head(self.neck(self.backbone(img)))


def db_loss(out: DetOutput, gt: dict, alpha: float = 1.0, beta: float = 10.0) -> Tensor:
    """L = L_prob + alpha * L_bin + beta * L_thr.

    gt: {"shrink_mask": [B,1,h,w] 0/1, "thresh_target": [B,1,h,w] in [0,1],
         "thresh_mask": [B,1,h,w] 0/1 band mask for the L1 term}
    L_prob is BCE with hard negative mining at a 3:1 negative:positive
    ratio (plain BCE when there are no positives); L_bin is dice loss on
    the binary map; L_thr is masked L1 on the threshold map.
    """
    pos = np.asarray(gt["shrink_mask"], np.float32)
    if pos.shape != tuple(out.prob_map.shape):
        raise ShapeError(f"mask shape {pos.shape} does not match prob map {tuple(out.prob_map.shape)}")
    eps = 1e-6
    pc = out.prob_map * (1.0 - 2.0 * eps) + eps
    bce = (T.log(pc) * Tensor(pos) + T.log(1.0 - out.prob_map * (1.0 - 2.0 * eps) - eps) * Tensor(1.0 - pos)) * -1.0

    npos = int(pos.sum())
    if npos == 0:
        weight = np.ones_like(pos)
    else:
        nneg = min(3 * npos, int(pos.size - npos))
        weight = pos.copy()
        if nneg > 0:
            neg_scores = np.where(pos > 0, -np.inf, bce.data).ravel()
            hard = np.argpartition(neg_scores, -nneg)[-nneg:]
            weight.reshape(-1)[hard] = 1.0
    l_prob = T.tsum(bce * Tensor(weight)) * (1.0 / max(weight.sum(), 1.0))

    inter = T.tsum(out.binary_map * Tensor(pos))
    denom = T.tsum(out.binary_map) + np.float32(pos.sum()) + eps
    l_bin = 1.0 - (inter * 2.0) / denom

    band = np.asarray(gt["thresh_mask"], np.float32)
    tt = np.asarray(gt["thresh_target"], np.float32)
    diff = out.thresh_map - Tensor(tt)
    absdiff = T.relu(diff) + T.relu(-diff)
    l_thr = T.tsum(absdiff * Tensor(band)) * (1.0 / max(band.sum(), 1.0))

    return l_prob + l_bin * alpha + l_thr * beta
