"""Text-line recognizers: an SVTR-Tiny-like reference model and the LCNet
surgery variants ending in SVTR-LCNet (lcnet_g2_postpool).

All variants share the sequence-length law L = W/4: the conv stack divides
width by exactly 4 and the remaining height is averaged away before the CTC
head. The optional attention guide head (GTC) exists only in train mode, so
inference logits and op counts are untouched by it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from . import tensor as T
from .blocks import AttnGuideDecoder, ConvBNAct, DSBlock, GlobalMixBlock, Linear
from .errors import ConfigError, ShapeError
from .losses import ctc_greedy_decode
from .module import Module
from .tensor import Tensor

VARIANTS = ("svtr_tiny_like", "lcnet_g4", "lcnet_g2", "lcnet_g2_postpool")


@dataclass
class RecConfig:
    charset: str
    variant: str = "lcnet_g2_postpool"
    height: int = 32
    max_width: int = 320
    d: int = 128                  # mix-block embedding dim
    heads: int = 4
    max_label_len: int = 25       # M (includes no EOS slot; decoder pads to M)
    gtc_enabled: bool = False
    in_ch: int = 1
    width_mult: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown recognizer variant '{self.variant}'")
        if self.height not in (32, 48):
            raise ConfigError(f"input height must be 32 or 48, got {self.height}")
        if self.max_width % 4:
            raise ConfigError("input width must be a multiple of 4")
        if not self.charset:
            raise ConfigError("charset must be non-empty")
        if len(set(self.charset)) != len(self.charset):
            raise ConfigError("charset contains duplicate symbols")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def n_classes(self) -> int:
        """Charset plus the CTC blank (always the last index)."""
        return len(self.charset) + 1

    @property
    def blank(self) -> int:
        return len(self.charset)

    def mix_count(self) -> int:
        return {"svtr_tiny_like": 6, "lcnet_g4": 4,
                "lcnet_g2": 2, "lcnet_g2_postpool": 2}[self.variant]


@dataclass
class RecOutput:
    backbone_feat: Tensor             # [B,C,h',L] conv-stack tap
    seq_feat: Tensor                  # [B,L,D] post-mix-block sequence
    ctc_logits: Tensor                # [B,L,V+1]
    attn_logits: Tensor | None = None  # [B,M,V+1], train mode + gtc only


def _lcnet_widths(mult: float):
    base = (16, 32, 64, 128)  # stem, stage1..3
    return [max(8, int(round(c * mult / 8)) * 8) for c in base]


class RecModel(Module):
    def __init__(self, cfg: RecConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        # group norm throughout: stateless, so train/infer forwards match
        if cfg.variant == "svtr_tiny_like":
            # patch embed: two stride-2 convs straight to the mix dim
            self.embed = [ConvBNAct(cfg.in_ch, d // 2, 3, rng, stride=2, norm="group"),
                          ConvBNAct(d // 2, d, 3, rng, stride=2, norm="group")]
            self.feat_ch = d
        else:
            stem_c, c1, c2, c3 = _lcnet_widths(cfg.width_mult)
            self.stem = ConvBNAct(cfg.in_ch, stem_c, 3, rng, stride=2, norm="group")
            self.lcnet = [DSBlock(stem_c, c1, 3, 1, rng, norm="group"),
                          DSBlock(c1, c2, 3, (2, 2), rng, norm="group"),
                          DSBlock(c2, c2, 3, 1, rng, norm="group"),
                          DSBlock(c2, c3, 3, (2, 1), rng, se=True, norm="group"),
                          DSBlock(c3, c3, 3, 1, rng, se=True, norm="group")]
            self.proj = ConvBNAct(c3, d, 1, rng, norm="group")
            self.feat_ch = c3
        self.mix = [GlobalMixBlock(d, cfg.heads, rng) for _ in range(cfg.mix_count())]
        self.head = Linear(d, cfg.n_classes, rng)
        if cfg.gtc_enabled:
            self.gtc = AttnGuideDecoder(d, cfg.max_label_len, cfg.n_classes, rng,
                                        heads=1)

    # ------------------------------------------------------------- forward

    def _conv_stack(self, imgs: Tensor):
        """Run the conv feature extractor; returns (backbone_feat, grid[B,D,h',L])."""
        if self.cfg.variant == "svtr_tiny_like":
            x = imgs
            for layer in self.embed:
                x = layer(x)
            return x, x
        x = self.stem(imgs)
        for blk in self.lcnet:
            x = blk(x)
        return x, self.proj(x)

    def __call__(self, imgs: Tensor) -> RecOutput:
        b, c, h, w = imgs.shape
        if h != self.cfg.height or c != self.cfg.in_ch:
            raise ShapeError(f"expected input [{self.cfg.in_ch},{self.cfg.height},W], "
                             f"got [{c},{h},{w}]")
        if w % 4:
            raise ShapeError(f"input width must be a multiple of 4, got {w}")
        backbone_feat, grid = self._conv_stack(imgs)
        d = self.cfg.d
        gh, gw = grid.shape[2], grid.shape[3]
        if self.cfg.variant == "lcnet_g2_postpool":
            pooled = K.adaptive_avg_pool2d(grid, (1, gw))          # [B,D,1,L]
            seq = T.transpose(T.reshape(pooled, (b, d, gw)), (0, 2, 1))
            for blk in self.mix:
                seq = blk(seq)
        else:
            # mix over the full 2-d grid of tokens, then average out height
            tokens = T.transpose(T.reshape(grid, (b, d, gh * gw)), (0, 2, 1))
            for blk in self.mix:
                tokens = blk(tokens)
            seq = T.tmean(T.reshape(tokens, (b, gh, gw, d)), axis=1)
        ctc_logits = self.head(seq)
        attn_logits = None
        if self.cfg.gtc_enabled and self.training:
            attn_logits = self.gtc(seq)
        return RecOutput(backbone_feat, seq, ctc_logits, attn_logits)


def build_recognizer(cfg: RecConfig) -> RecModel:
    return RecModel(cfg)


def rec_forward(model: RecModel, imgs: Tensor, mode: str = "infer") -> RecOutput:
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got '{mode}'")
    model.train(mode == "train")
    if mode == "infer":
        with T.no_grad():
            return model(imgs)
    return model(imgs)


def infer_text(model: RecModel, img) -> tuple:
    """Greedy-decode a single [h,W], [1,h,W] or [1,1,h,W] grayscale image."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, np.float32)
    while arr.ndim < 4:
        arr = arr[None]
    out = rec_forward(model, Tensor(arr), "infer")
    labels, conf = ctc_greedy_decode(out.ctc_logits)[0]
    text = "".join(model.cfg.charset[i] for i in labels)
    return text, conf


# --------------------------------------------------------------- charset IO


def load_charset(path) -> str:
    """One symbol per line; index = line number. Blank lines mean space."""
    symbols = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.rstrip("\n")
            symbols.append(s if s else " ")
    return "".join(symbols)


def save_charset(path, charset: str):
    with open(path, "w", encoding="utf-8") as fh:
        for ch in charset:
            fh.write(("" if ch == " " else ch) + "\n")


# --------------------------------------------------------------- FLOP model


def _conv_flops(cin, cout, k, oh, ow, groups=1):
    return 2 * k * k * (cin // groups) * cout * oh * ow


def _mix_flops(tokens, d, mlp_ratio=2):
    attn = 4 * tokens * d * d * 2 + 2 * 2 * tokens * tokens * d
    mlp = 2 * 2 * tokens * d * (d * mlp_ratio)
    return attn + mlp


def rec_flops(cfg: RecConfig, width: int | None = None) -> int:
    """Analytic multiply-add count (x2) of one forward pass, batch 1."""
    w = width or cfg.max_width
    h, d = cfg.height, cfg.d
    l = w // 4
    total = 0
    if cfg.variant == "svtr_tiny_like":
        total += _conv_flops(cfg.in_ch, d // 2, 3, h // 2, w // 2)
        total += _conv_flops(d // 2, d, 3, h // 4, l)
        tokens = (h // 4) * l
    else:
        stem_c, c1, c2, c3 = _lcnet_widths(cfg.width_mult)
        h2, w2 = h // 2, w // 2
        total += _conv_flops(cfg.in_ch, stem_c, 3, h2, w2)
        plan = [(stem_c, c1, h2, w2), (c1, c2, h // 4, l), (c2, c2, h // 4, l),
                (c2, c3, h // 8, l), (c3, c3, h // 8, l)]
        for cin, cout, oh, ow in plan:
            total += _conv_flops(cin, cin, 3, oh, ow, groups=cin)   # depthwise
            total += _conv_flops(cin, cout, 1, oh, ow)              # pointwise
        total += _conv_flops(c3, d, 1, h // 8, l)                   # projection
        tokens = (h // 8) * l
    if cfg.variant == "lcnet_g2_postpool":
        tokens = l
    total += cfg.mix_count() * _mix_flops(tokens, d)
    total += 2 * l * d * cfg.n_classes                              # CTC head
    return total
