"""Synthetic data: text-line rendering from a built-in 5x7 bitmap font,
detection-scene composition with DB-style ground-truth masks, TextConAug,
TextRotNet pretext data, and UIM confidence mining.

Every generator derives its randomness from (seed, sample_index), so
datasets are reproducible regardless of generation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .det_postproc import Quad
from .errors import DataError
from .geometry import (distance_to_edges, fill_convex, offset_polygon,
                       polygon_area, polygon_iou, perimeter)

DEFAULT_CHARSET = "0123456789"

_ASSET_DIR = Path(__file__).parent / "assets"


def _load_glyphs():
    glyphs = {}
    lines = (_ASSET_DIR / "glyphs_5x7.txt").read_text(encoding="utf-8").splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line or line.startswith("#"):
            i += 1
            continue
        sym = " " if line == "space" else line
        rows = lines[i + 1:i + 8]
        if len(rows) != 7 or any(len(r) != 5 for r in rows):
            raise DataError(f"malformed glyph block for {sym!r}")
        glyphs[sym] = np.array([[c == "#" for c in r] for r in rows], np.float32)
        i += 8
    return glyphs


GLYPHS = _load_glyphs()


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample RNG stream; identical under parallel or serial generation."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# ------------------------------------------------------------- text lines


@dataclass
class TextLineSample:
    image: np.ndarray          # [1,h,w] float32 in [0,1]
    transcript: str
    source: str = "synthetic"  # synthetic | mined


def _pad_width4(img: np.ndarray, bg: float) -> np.ndarray:
    w = img.shape[-1]
    pad = (-w) % 4
    if pad:
        img = np.pad(img, [(0, 0)] * (img.ndim - 1) + [(0, pad)],
                     constant_values=bg)
    return img


def render_text_line(text: str, h: int = 32, seed: int = 0,
                     fg: float | None = None, bg: float | None = None,
                     scale: int | None = None,
                     noise_sigma: float = 0.03) -> TextLineSample:
    """Rasterize `text` with the 5x7 font.

    Glyphs are placed left to right with one-glyph-column base spacing plus
    jittered extra spacing; additive Gaussian noise (sigma <= 0.05) and a
    random fg/bg pair with contrast >= 0.3 complete the sample. Identical
    (text, h, seed, overrides) always produce identical images.
    """
    if noise_sigma > 0.05:
        raise DataError("noise_sigma must be <= 0.05")
    missing = sorted({c for c in text if c not in GLYPHS})
    if missing:
        raise DataError(f"no glyph for symbols: {missing}")
    rng = np.random.default_rng(np.random.SeedSequence([7, int(seed)]))
    if bg is None:
        bg = float(rng.uniform(0.0, 0.55))
    if fg is None:
        lo = bg + 0.3
        fg = float(rng.uniform(lo, max(lo + 0.15, 1.0))) if lo < 1.0 else 1.0
        if fg > 1.0:
            fg = 1.0
    if abs(fg - bg) < 0.3:
        raise DataError(f"fg/bg contrast {abs(fg - bg):.2f} < 0.3")
    if scale is None:
        scale = max(1, int(round(h * 0.6 / 7)))
    gh, gw = 7 * scale, 5 * scale
    margin = scale
    # layout: base advance is one glyph width plus a one-column gap, with
    # up to one extra column of jitter
    xs = []
    x = margin
    for _ in text:
        xs.append(x)
        x += gw + scale + int(rng.integers(0, scale + 1))
    w = (x - scale + margin) if text else 4 * scale
    img = np.full((h, w), bg, np.float32)
    y0 = (h - gh) // 2
    for c, gx in zip(text, xs):
        block = np.kron(GLYPHS[c], np.ones((scale, scale), np.float32))
        patch = img[y0:y0 + gh, gx:gx + gw]
        img[y0:y0 + gh, gx:gx + gw] = np.where(block > 0, fg, patch)
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    img = _pad_width4(img, bg)
    return TextLineSample(img[None], text, "synthetic")


# -------------------------------------------------------- detection scenes


@dataclass
class DetSceneSample:
    image: np.ndarray                       # [3,H,W] float32
    quads: list                             # [(Quad, transcript), ...]
    masks: dict                             # shrink/thresh/region at H/4
    requested: int = 0
    placed: int = 0


def _rotate_points(pts: np.ndarray, angle: float, center: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return (pts - center) @ rot.T + center


def scene_masks(quads, hw, stride: int = 4, shrink_ratio: float = 0.4) -> dict:
    """DB-style ground truth at map resolution: shrunk positive mask,
    threshold target ramping 0.3 -> 0.7 toward the text border inside the
    dilated band, the band mask, and the full text-region mask."""
    mh, mw = hw[0] // stride, hw[1] // stride
    shrink = np.zeros((mh, mw), np.float32)
    region = np.zeros((mh, mw), np.float32)
    band = np.zeros((mh, mw), np.float32)
    target = np.full((mh, mw), 0.3, np.float32)
    for quad, _ in quads:
        poly = np.asarray(quad.points, np.float64) / stride
        area, per = polygon_area(poly), perimeter(poly)
        if area < 1.0 or per < 1e-6:
            continue
        d = shrink_ratio * area / per
        region[fill_convex(poly, mh, mw)] = 1.0
        shrunk = offset_polygon(poly, -d)
        if len(shrunk) >= 3 and polygon_area(shrunk) > 0:
            shrink[fill_convex(shrunk, mh, mw)] = 1.0
        dilated = offset_polygon(poly, d)
        bmask = fill_convex(dilated, mh, mw)
        if not bmask.any():
            continue
        ys, xs = np.nonzero(bmask)
        dist = distance_to_edges(poly, ys.astype(np.float64), xs.astype(np.float64))
        ramp = 0.7 - 0.4 * np.minimum(dist / max(d, 1e-6), 1.0)
        target[ys, xs] = np.maximum(target[ys, xs], ramp.astype(np.float32))
        band[bmask] = 1.0
    band = band * (1.0 - shrink)
    return {"shrink_mask": shrink[None], "thresh_target": target[None],
            "thresh_mask": band[None], "region_mask": region.astype(np.float32)[None]}


def render_det_scene(n_texts: int, hw=(96, 96), rotation_range=(-0.5, 0.5),
                     seed: int = 0, charset: str = DEFAULT_CHARSET,
                     text_len=(2, 5), max_tries: int = 100) -> DetSceneSample:
    """Compose a grayscale-ish RGB scene with up to n_texts non-overlapping
    rotated text lines. Placement uses rejection sampling; fewer lines are
    placed when space runs out (reported via `placed`)."""
    if n_texts < 0:
        raise DataError("n_texts must be >= 0")
    h, w = hw
    rng = sample_rng(seed, 0)
    bg = float(rng.uniform(0.1, 0.4))
    img = np.full((h, w), bg, np.float32)
    quads = []
    for k in range(n_texts):
        srng = sample_rng(seed, k + 1)
        n = int(srng.integers(text_len[0], text_len[1] + 1))
        text = "".join(charset[i] for i in srng.integers(0, len(charset), n))
        line = render_text_line(text, h=14, seed=int(srng.integers(0, 2 ** 31)),
                                bg=bg, fg=min(1.0, bg + 0.5), noise_sigma=0.0,
                                scale=1)
        lh, lw = line.image.shape[1:]
        placed = False
        for _ in range(max_tries):
            angle = float(srng.uniform(*rotation_range))
            cx = float(srng.uniform(lw / 2 + 2, w - lw / 2 - 2)) if w > lw + 4 else w / 2
            cy = float(srng.uniform(lh / 2 + 2, h - lh / 2 - 2)) if h > lh + 4 else h / 2
            center = np.array([cx, cy])
            corners = np.array([[-lw / 2, -lh / 2], [lw / 2, -lh / 2],
                                [lw / 2, lh / 2], [-lw / 2, lh / 2]]) + center
            quad_pts = _rotate_points(corners, angle, center)
            if quad_pts.min() < 1 or quad_pts[:, 0].max() > w - 1 \
                    or quad_pts[:, 1].max() > h - 1:
                continue
            # keep a 3 px safety gap so quads never touch
            grown = offset_polygon(quad_pts, 3.0)
            if any(polygon_iou(grown, q.points) > 0 for q, _ in quads):
                continue
            _paste_rotated(img, line.image[0], center, angle)
            quads.append((Quad(quad_pts.astype(np.float32)), text))
            placed = True
            break
        if not placed:
            break
    noise = sample_rng(seed, n_texts + 1).normal(0.0, 0.02, img.shape)
    img = np.clip(img + noise.astype(np.float32), 0.0, 1.0)
    rgb = np.repeat(img[None], 3, axis=0).astype(np.float32)
    return DetSceneSample(rgb, quads, scene_masks(quads, hw),
                          requested=n_texts, placed=len(quads))


def _paste_rotated(canvas: np.ndarray, patch: np.ndarray, center: np.ndarray,
                   angle: float):
    """Paste `patch` rotated by `angle` about its center at `center`
    (nearest-neighbor inverse mapping)."""
    ph, pw = patch.shape
    half = np.hypot(ph, pw) / 2 + 1
    y0 = max(0, int(center[1] - half))
    y1 = min(canvas.shape[0], int(center[1] + half) + 1)
    x0 = max(0, int(center[0] - half))
    x1 = min(canvas.shape[1], int(center[0] + half) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    c, s = np.cos(-angle), np.sin(-angle)
    dx = xs - center[0]
    dy = ys - center[1]
    sx = c * dx - s * dy + pw / 2
    sy = s * dx + c * dy + ph / 2
    ix = np.round(sx - 0.5).astype(np.int64)
    iy = np.round(sy - 0.5).astype(np.int64)
    ok = (ix >= 0) & (ix < pw) & (iy >= 0) & (iy < ph)
    canvas[ys[ok], xs[ok]] = patch[iy[ok], ix[ok]]


# --------------------------------------------------------------- TextConAug


def _resize_height(img: np.ndarray, h: int) -> np.ndarray:
    """Nearest-neighbor resize of [1,h0,w0] to height h, keeping aspect."""
    _, h0, w0 = img.shape
    if h0 == h:
        return img
    w = max(1, int(round(w0 * h / h0)))
    iy = np.minimum((np.arange(h) * h0 / h).astype(np.int64), h0 - 1)
    ix = np.minimum((np.arange(w) * w0 / w).astype(np.int64), w0 - 1)
    return img[:, iy][:, :, ix]


def text_con_aug(batch: list, prob: float = 0.5, seed: int = 0,
                 max_label_len: int = 25) -> list:
    """ConAug: with probability `prob` per sample, concatenate it with a
    distinct random batch member (image horizontally, transcripts in the
    same order). Pairs whose combined transcript would exceed
    max_label_len - 1 are left unchanged."""
    if len(batch) < 2:
        raise DataError("text_con_aug needs a batch of at least 2 samples")
    rng = np.random.default_rng(np.random.SeedSequence([11, int(seed)]))
    out = []
    for i, s in enumerate(batch):
        if rng.random() >= prob:
            out.append(s)
            continue
        j = int(rng.integers(0, len(batch) - 1))
        if j >= i:
            j += 1
        partner = batch[j]
        joined = s.transcript + partner.transcript
        if len(joined) > max_label_len - 1:
            out.append(s)
            continue
        h = s.image.shape[1]
        pair = _resize_height(partner.image, h)
        bgval = float(s.image[0, 0, -1])
        img = _pad_width4(np.concatenate([s.image, pair], axis=2), bgval)
        out.append(TextLineSample(img.astype(np.float32), joined, s.source))
    return out


# ------------------------------------------------------------- TextRotNet


def square_pad(img: np.ndarray, bg: float | None = None) -> np.ndarray:
    """Pad [1,h,w] to [1,s,s] with the background level (median pixel)."""
    _, h, w = img.shape
    s = max(h, w)
    if bg is None:
        bg = float(np.median(img))
    top = (s - h) // 2
    left = (s - w) // 2
    out = np.full((1, s, s), bg, np.float32)
    out[:, top:top + h, left:left + w] = img
    return out


def rot_pretext_batch(images: list, seed: int = 0):
    """Square-pad each [1,h,w] image and rotate by 90 * label degrees,
    label drawn uniformly from {0,1,2,3}. Rotation is an exact pixel
    permutation (np.rot90)."""
    rng = np.random.default_rng(np.random.SeedSequence([13, int(seed)]))
    labels = rng.integers(0, 4, len(images))
    rotated = [np.ascontiguousarray(np.rot90(square_pad(img), k=int(k), axes=(1, 2)))
               for img, k in zip(images, labels)]
    return rotated, labels.astype(np.int64)


class RotNet:
    """TextRotNet pretext model: the recognizer trunk plus a 4-way
    rotation classifier on the mean-pooled sequence feature."""

    def __init__(self, cfg):
        from .blocks import Linear
        from .rec_models import build_recognizer
        import dataclasses
        self.cfg = dataclasses.replace(cfg, gtc_enabled=False,
                                       max_width=cfg.height)
        self.rec = build_recognizer(self.cfg)
        self.cls = Linear(cfg.d, 4, np.random.default_rng(cfg.seed + 1))

    def __call__(self, imgs):
        from . import tensor as T
        out = self.rec(imgs)
        return self.cls(T.tmean(out.seq_feat, axis=1))

    def parameters(self):
        # the recognizer's CTC head never appears on the rotation loss graph
        head = {id(p) for p in self.rec.head.parameters()}
        trunk = [p for p in self.rec.parameters() if id(p) not in head]
        return trunk + self.cls.parameters()

    def trunk_arrays(self) -> dict:
        """Backbone + mix weights under recognizer names; the CTC head and
        the rotation classifier are both excluded."""
        return {name: arr.copy() for name, arr in self.rec.named_arrays()
                if not name.startswith("head.")}


def pretrain_rotnet(lines: list, cfg, epochs: int = 3, batch_size: int = 32,
                    lr: float = 1e-3, seed: int = 0, holdout: int = 64):
    """Self-supervised rotation pretraining on text-line images.

    Returns (trunk_arrays, report). trunk_arrays transfers into a
    recognizer of the same config via module.load_arrays(strict=False).
    """
    from . import tensor as T
    from .losses import cross_entropy
    from .tensor import Adam, Tensor

    imgs = [_resize_height(s.image if isinstance(s, TextLineSample) else s,
                           cfg.height) for s in lines]
    imgs = [square_pad(im) for im in imgs]
    # square pads are height x height; recognizer wants exactly that size
    imgs = [_resize_square(im, cfg.height) for im in imgs]
    n_hold = min(holdout, max(2, len(imgs) // 5))
    hold, train = imgs[:n_hold], imgs[n_hold:]
    model = RotNet(cfg)
    opt = Adam([{"params": model.parameters(), "weight_decay": 1e-5}], lr=lr)
    history = []
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([17, seed, epoch])).permutation(len(train))
        losses = []
        for start in range(0, len(train) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            rot, labels = rot_pretext_batch([train[i] for i in idx],
                                            seed=seed * 100003 + step)
            x = Tensor(np.stack(rot))
            T.reset_tape()
            model.rec.zero_grad()
            for p in model.cls.parameters():
                p.grad = None
            logits = model(x)
            loss = cross_entropy(logits, labels)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
        history.append(float(np.mean(losses)) if losses else 0.0)
    acc = rotnet_accuracy(model, hold, seed=seed + 999)
    report = {"epochs": epochs, "loss_history": history,
              "holdout_accuracy": acc, "n_train": len(train), "n_holdout": len(hold)}
    return model.trunk_arrays(), report


def rotnet_accuracy(model: RotNet, imgs: list, seed: int = 0) -> float:
    from . import tensor as T
    from .tensor import Tensor
    if not imgs:
        return 0.0
    rot, labels = rot_pretext_batch(imgs, seed=seed)
    with T.no_grad():
        logits = model(Tensor(np.stack(rot)))
    return float((logits.data.argmax(axis=1) == labels).mean())


def _resize_square(img: np.ndarray, s: int) -> np.ndarray:
    _, h, w = img.shape
    if (h, w) == (s, s):
        return img
    iy = np.minimum((np.arange(s) * h / s).astype(np.int64), h - 1)
    ix = np.minimum((np.arange(s) * w / s).astype(np.int64), w - 1)
    return img[:, iy][:, :, ix]


# -------------------------------------------------------------------- UIM


def uim_mine(model, images, conf_thresh: float = 0.95):
    """Unlabeled image mining: keep confident non-empty decodes.

    `images` holds [h,w] / [1,h,w] arrays or paths to P5 files. Returns
    (samples, report) where samples carry source='mined'.
    """
    from .rec_models import infer_text
    kept, skipped = [], 0
    confs = []
    for item in images:
        if isinstance(item, (str, Path)):
            try:
                arr = read_pnm(item)
            except (OSError, DataError) as exc:
                warnings.warn(f"uim_mine: skipping {item}: {exc}")
                skipped += 1
                continue
            if arr.ndim == 3:
                arr = arr.mean(axis=0)
        else:
            arr = np.asarray(item, np.float32)
            if arr.ndim == 3:
                arr = arr[0]
        text, conf = infer_text(model, arr)
        confs.append(conf)
        if text and conf >= conf_thresh:
            kept.append(TextLineSample(arr[None].astype(np.float32), text, "mined"))
    report = {"total": len(images), "kept": len(kept), "skipped": skipped,
              "mean_confidence": float(np.mean(confs)) if confs else 0.0,
              "conf_thresh": conf_thresh}
    return kept, report


# ------------------------------------------------------------------ PNM IO


def write_pnm(path, img: np.ndarray):
    """Write [h,w] as P5 or [3,h,w] as P6 (floats in [0,1], maxval 255)."""
    arr = np.asarray(img)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        if data.ndim == 2:
            fh.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
            fh.write(data.tobytes())
        elif data.ndim == 3 and data.shape[0] == 3:
            h, w = data.shape[1:]
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(np.transpose(data, (1, 2, 0)).tobytes())
        else:
            raise DataError(f"cannot serialize image of shape {arr.shape}")


def read_pnm(path) -> np.ndarray:
    """Read P5 -> [h,w] or P6 -> [3,h,w] floats in [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PNM header in {path}")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval} in {path}")
    body = np.frombuffer(raw, np.uint8, offset=pos)
    if magic == b"P5":
        if body.size < h * w:
            raise DataError(f"short P5 payload in {path}")
        return (body[:h * w].reshape(h, w) / 255.0).astype(np.float32)
    if magic == b"P6":
        if body.size < h * w * 3:
            raise DataError(f"short P6 payload in {path}")
        rgb = body[:h * w * 3].reshape(h, w, 3)
        return (np.transpose(rgb, (2, 0, 1)) / 255.0).astype(np.float32)
    raise DataError(f"unsupported PNM magic {magic!r} in {path}")


# --------------------------------------------------------------- manifests


def write_rec_manifest(path, entries):
    """entries: [(image_path, transcript)], tab-separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for img_path, transcript in entries:
            fh.write(f"{img_path}\t{transcript}\n")


def read_rec_manifest(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{ln}: expected <image>\\t<transcript>")
            img_path, transcript = line.split("\t", 1)
            out.append((img_path, transcript))
    return out


def write_det_manifest(path, entries):
    """entries: [(image_path, [(Quad, text), ...])]; quads are ';'-joined
    ICDAR-style records."""
    from .det_postproc import format_quad_line
    with open(path, "w", encoding="utf-8") as fh:
        for img_path, quads in entries:
            recs = ";".join(format_quad_line(q, t) for q, t in quads)
            fh.write(f"{img_path}\t{recs}\n")


def read_det_manifest(path):
    from .det_postproc import parse_quad_line
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{ln}: expected <image>\\t<quads>")
            img_path, recs = line.split("\t", 1)
            quads = []
            for rec in recs.split(";"):
                if rec:
                    q, t = parse_quad_line(rec)
                    quads.append((q, t if t is not None else ""))
            out.append((img_path, quads))
    return out
