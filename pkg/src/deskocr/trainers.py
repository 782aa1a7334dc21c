"""Training loops and evaluators behind the CLI.

All loops are deterministic given the config: data comes from per-sample
seeded streams, batch order from per-epoch seeded permutations, and
metrics.jsonl records contain no wall-clock values (timings live in the
run summary instead, so re-runs reproduce metrics files bit-for-bit).
"""

import json
import os

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import fingerprint
from .data import (TextLineSample, pretrain_rotnet, read_pnm,
                   read_rec_manifest, render_det_scene, render_text_line,
                   sample_rng, text_con_aug, uim_mine, write_rec_manifest)
from .det_models import DetConfig, DetModel, db_loss
from .det_postproc import Quad, eval_detection, extract_boxes
from .errors import ConfigError, DataError
from .losses import dml_train_step, gtc_loss, udml_loss
from .rec_models import (RecConfig, RecModel, build_recognizer, infer_text,
                         load_charset)
from .schedules import lr_schedule
from .tensor import Adam, Tensor


# ------------------------------------------------------------- plumbing


class MetricsWriter:
    """Append-only JSON-lines metrics file."""

    def __init__(self, path):
        self.path = path

    def write(self, record: dict):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def resolve_charset(data_cfg: dict) -> str:
    if data_cfg.get("charset_path"):
        return load_charset(data_cfg["charset_path"])
    return data_cfg["charset"]


def rec_model_from_cfg(cfg: dict) -> RecModel:
    charset = resolve_charset(cfg["data"])
    return build_recognizer(RecConfig(charset=charset, **cfg["model"]))


def det_model_from_cfg(model_cfg: dict) -> DetModel:
    return DetModel(DetConfig(**model_cfg))


def encode_labels(texts, charset: str, max_label_len: int):
    labels = []
    for text in texts:
        bad = sorted(set(text) - set(charset))
        if bad:
            raise DataError(f"transcript {text!r} has characters outside the charset: {bad}")
        if len(text) > max_label_len:
            raise DataError(f"transcript {text!r} longer than max_label_len={max_label_len}")
        labels.append([charset.index(c) for c in text])
    return labels


# ------------------------------------------------------------- datasets


def make_rec_lines(data_cfg: dict, height: int):
    """Render n_lines + holdout text lines; returns (train, holdout)."""
    charset = resolve_charset(data_cfg)
    lo, hi = data_cfg["text_len"]
    total = data_cfg["n_lines"] + data_cfg["holdout"]
    lines = []
    for i in range(total):
        rng = sample_rng(data_cfg["seed"], i)
        n = int(rng.integers(lo, hi + 1))
        text = "".join(charset[k] for k in rng.integers(0, len(charset), n))
        lines.append(render_text_line(text, h=height, seed=data_cfg["seed"] * 1000003 + i,
                                      noise_sigma=data_cfg.get("noise_sigma", 0.03)))
    n_hold = data_cfg["holdout"]
    return lines[n_hold:], lines[:n_hold]


def make_det_scenes(data_cfg: dict):
    lo, hi = data_cfg["n_texts"]
    total = data_cfg["n_scenes"] + data_cfg["holdout"]
    scenes = []
    for i in range(total):
        rng = sample_rng(data_cfg["seed"], i)
        n = int(rng.integers(lo, hi + 1))
        scenes.append(render_det_scene(
            n, hw=tuple(data_cfg["hw"]), rotation_range=tuple(data_cfg["rotation_range"]),
            seed=data_cfg["seed"] * 1000003 + i, charset=resolve_charset(data_cfg),
            text_len=tuple(data_cfg["text_len"])))
    n_hold = data_cfg["holdout"]
    return scenes[n_hold:], scenes[:n_hold]


def _pad_rec_batch(samples) -> Tensor:
    width = max(s.image.shape[2] for s in samples)
    h = samples[0].image.shape[1]
    out = np.zeros((len(samples), 1, h, width), np.float32)
    for i, s in enumerate(samples):
        out[i, :, :, :s.image.shape[2]] = s.image
    return Tensor(out)


def _width_batches(samples, batch_size):
    """Batch indices grouped by ascending width so padding stays tight."""
    order = sorted(range(len(samples)), key=lambda i: (samples[i].image.shape[2], i))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)
            if len(order[i:i + batch_size]) == batch_size] or [order]


# ------------------------------------------------------------ evaluation


def sentence_accuracy(model: RecModel, samples) -> float:
    """Exact-match rate; images of equal width are decoded in one batch."""
    from .losses import ctc_greedy_decode
    from .rec_models import rec_forward
    if not samples:
        return 0.0
    charset = model.cfg.charset
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.image.shape[2], []).append(i)
    hits = 0
    for idx in groups.values():
        imgs = Tensor(np.stack([samples[i].image for i in idx]))
        out = rec_forward(model, imgs, "infer")
        for i, (labels, _) in zip(idx, ctc_greedy_decode(out.ctc_logits)):
            text = "".join(charset[k] for k in labels)
            hits += text == samples[i].transcript
    return hits / len(samples)


def boxes_from_prob(prob_map: np.ndarray, stride: int = 4,
                    bin_thresh: float = 0.5, unclip_ratio: float = 0.45,
                    **kw) -> list:
    """extract_boxes on a map upsampled to image resolution (nearest), so
    size filters and unclip offsets operate in pixel units.

    unclip_ratio 0.45 inverts this pipeline's 0.4*A/P shrink (plus the
    stride-4 quantization growth); extract_boxes' own 1.5 default matches
    the (1-r^2)*A/P shrink convention instead."""
    full = np.kron(prob_map, np.ones((stride, stride), np.float32))
    return extract_boxes(np.clip(full, 0.0, 1.0), bin_thresh=bin_thresh,
                         unclip_ratio=unclip_ratio, **kw)


def det_scene_eval(model: DetModel, scenes, batch_size: int = 8,
                   iou_thresh: float = 0.5):
    """Aggregate Hmean over held-out scenes (matches summed across images)."""
    model.eval()
    n_match = n_pred = n_gt = 0
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        imgs = Tensor(np.stack([s.image for s in chunk]))
        with T.no_grad():
            out = model(imgs)
        for b, scene in enumerate(chunk):
            pred = boxes_from_prob(out.prob_map.data[b, 0])
            gt = [q for q, _ in scene.quads]
            rep = eval_detection(pred, gt, iou_thresh)
            n_match += len(rep.pairs)
            n_pred += len(pred)
            n_gt += len(gt)
    p = n_match / n_pred if n_pred else 0.0
    r = n_gt and n_match / n_gt
    hmean = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": float(r), "hmean": hmean,
            "n_pred": n_pred, "n_gt": n_gt, "n_match": n_match}


# --------------------------------------------------------- rec training


def _rec_optimizer(models, opt_cfg):
    groups = []
    for m in models:
        head = [p for p in m.head.parameters()]
        head_ids = {id(p) for p in head}
        trunk = [p for p in m.parameters() if id(p) not in head_ids]
        groups.append({"params": trunk, "weight_decay": opt_cfg["weight_decay"]})
        groups.append({"params": head, "weight_decay": opt_cfg["ctc_head_decay"]})
    return Adam(groups, lr=opt_cfg["lr"])


def _load_extra_lines(manifest_path, height):
    extra = []
    base = os.path.dirname(manifest_path)
    for rel, text in read_rec_manifest(manifest_path):
        path = rel if os.path.isabs(rel) else os.path.join(base, rel)
        img = read_pnm(path)
        if img.ndim == 2:
            img = img[None]
        from .data import _resize_height
        extra.append(TextLineSample(_resize_height(img, height), text, source="mined"))
    return extra


def train_rec(cfg: dict) -> dict:
    out_dir = _ensure_dir(cfg["out_dir"])
    fp = fingerprint(cfg)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"))
    tcfg = cfg["train"]
    height = cfg["model"]["height"]
    train_lines, holdout = make_rec_lines(cfg["data"], height)
    if tcfg.get("extra_data"):
        train_lines = train_lines + _load_extra_lines(tcfg["extra_data"], height)
    charset = resolve_charset(cfg["data"])
    max_label = cfg["model"]["max_label_len"]

    models = [rec_model_from_cfg(cfg)]
    if tcfg.get("udml"):
        peer_cfg = dict(cfg["model"], seed=cfg["model"]["seed"] + 1001)
        models.append(build_recognizer(RecConfig(charset=charset, **peer_cfg)))
    if tcfg.get("init_from"):
        ckpt = load_checkpoint(tcfg["init_from"])
        for m in models:
            from .checkpoint import apply_checkpoint
            apply_checkpoint(m, ckpt, strict=False)
    opt = _rec_optimizer(models, cfg["optimizer"])

    batches = _width_batches(train_lines, cfg["batch_size"])
    spe = len(batches)
    epochs = cfg["epochs"]
    total = max(1, epochs * spe)
    warmup = min(cfg["optimizer"]["warmup_epochs"] * spe, total - 1)
    ckpt_path = os.path.join(out_dir, "ckpt_last.ockt")
    step = 0
    last = {"epoch": 0, "loss": None, "sentence_accuracy": None}
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([23, cfg["seed"], epoch])).permutation(spe)
        losses = []
        for bi in order:
            batch = [train_lines[i] for i in batches[bi]]
            if tcfg.get("conaug") and len(batch) >= 2:
                batch = text_con_aug(batch, prob=tcfg["conaug_prob"],
                                     seed=cfg["seed"] * 1000003 + step,
                                     max_label_len=max_label)
            imgs = _pad_rec_batch(batch)
            labels = encode_labels([s.transcript for s in batch], charset, max_label)
            opt.lr = lr_schedule(step, total, cfg["optimizer"]["schedule"],
                                 warmup, cfg["optimizer"]["lr"])
            T.reset_tape()
            for m in models:
                m.train()
                m.zero_grad()
            outs = [m(imgs) for m in models]
            if len(models) == 2:
                loss = udml_loss(outs[0], outs[1], labels)
            else:
                loss = gtc_loss(outs[0], labels)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
        acc = sentence_accuracy(models[0], holdout)
        last = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
                "lr": opt.lr, "sentence_accuracy": acc}
        metrics.write(last)
        save_checkpoint(ckpt_path, models[0], fp, meta={"config": cfg, **last})
        if len(models) == 2:
            save_checkpoint(os.path.join(out_dir, "ckpt_b_last.ockt"),
                            models[1], fp, meta={"config": cfg, **last})
    if epochs == 0:
        save_checkpoint(ckpt_path, models[0], fp, meta={"config": cfg, "epoch": 0})
    return {"task": "rec", "checkpoint": ckpt_path, **last}


# --------------------------------------------------------- det training


def _det_gt_batch(scenes):
    return {key: np.stack([s.masks[key] for s in scenes])
            for key in ("shrink_mask", "thresh_target", "thresh_mask")}


def train_det(cfg: dict) -> dict:
    out_dir = _ensure_dir(cfg["out_dir"])
    fp = fingerprint(cfg)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"))
    tcfg = cfg.get("train", {"mode": "plain", "teacher_ckpt": None})
    mode = tcfg.get("mode", "plain")
    from .losses import DistillWeights
    dw = DistillWeights(w_peer_dml=tcfg.get("w_peer_dml", 1.0),
                        w_teacher=tcfg.get("w_teacher", 1.0))
    if mode not in ("plain", "dml", "cml"):
        raise ConfigError(f"unknown det training mode {mode!r}")
    train_scenes, holdout = make_det_scenes(cfg["data"])

    if mode == "plain":
        models = [det_model_from_cfg(cfg["model"])]
    else:
        peer = dict(cfg["model"], seed=cfg["model"]["seed"] + 1001)
        models = [det_model_from_cfg(cfg["model"]), det_model_from_cfg(peer)]
    teacher = None
    if mode == "cml":
        if not tcfg.get("teacher_ckpt"):
            raise ConfigError("cml mode requires train.teacher_ckpt")
        ckpt = load_checkpoint(tcfg["teacher_ckpt"])
        if "config" not in ckpt.meta:
            raise ConfigError("teacher checkpoint lacks its config in meta")
        teacher = det_model_from_cfg(ckpt.meta["config"]["model"])
        from .checkpoint import apply_checkpoint
        apply_checkpoint(teacher, ckpt, strict=True)
        teacher.eval()

    wd = cfg["optimizer"]["weight_decay"]
    opts = [Adam([{"params": m.parameters(), "weight_decay": wd}],
                 lr=cfg["optimizer"]["lr"]) for m in models]
    if mode == "cml":
        opts = [Adam([{"params": [p for m in models for p in m.parameters()],
                       "weight_decay": wd}], lr=cfg["optimizer"]["lr"])]

    bs = cfg["batch_size"]
    n_batches = max(1, len(train_scenes) // bs)
    epochs = cfg["epochs"]
    total = max(1, epochs * n_batches)
    warmup = min(cfg["optimizer"]["warmup_epochs"] * n_batches, total - 1)
    ckpt_path = os.path.join(out_dir, "ckpt_last.ockt")
    step = 0
    last = {"epoch": 0, "loss": None, "hmean": None}
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([23, cfg["seed"], epoch])).permutation(len(train_scenes))
        losses = []
        for start in range(0, n_batches * bs, bs):
            chunk = [train_scenes[i] for i in order[start:start + bs]]
            imgs = Tensor(np.stack([s.image for s in chunk]))
            gt = _det_gt_batch(chunk)
            lr = lr_schedule(step, total, cfg["optimizer"]["schedule"],
                             warmup, cfg["optimizer"]["lr"])
            for o in opts:
                o.lr = lr
            for m in models:
                m.train()
            if mode == "dml":
                losses.append(float(np.mean(dml_train_step(
                    models[0], models[1], imgs, gt, opts[0], opts[1], dw))))
            else:
                T.reset_tape()
                for m in models:
                    m.zero_grad()
                if mode == "plain":
                    loss = db_loss(models[0](imgs), gt,
                                   alpha=cfg["model"]["alpha"], beta=cfg["model"]["beta"])
                else:
                    from .losses import cml_loss
                    with T.no_grad():
                        t_out = teacher(imgs)
                    loss = cml_loss([m(imgs) for m in models], t_out, gt, dw)
                T.backward(loss)
                opts[0].step()
                losses.append(loss.item())
            step += 1
        ev = det_scene_eval(models[0], holdout, batch_size=bs)
        last = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
                "lr": lr, **ev}
        metrics.write(last)
        save_checkpoint(ckpt_path, models[0], fp, meta={"config": cfg, **last})
        if len(models) == 2:
            save_checkpoint(os.path.join(out_dir, "ckpt_b_last.ockt"),
                            models[1], fp, meta={"config": cfg, **last})
    if epochs == 0:
        save_checkpoint(ckpt_path, models[0], fp, meta={"config": cfg, "epoch": 0})
    return {"task": "det", "mode": mode, "checkpoint": ckpt_path, **last}


# ---------------------------------------------------- rotnet / mining


def run_pretrain_rotnet(cfg: dict) -> dict:
    out_dir = _ensure_dir(cfg["out_dir"])
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"))
    train_lines, holdout = make_rec_lines(cfg["data"], cfg["model"]["height"])
    charset = resolve_charset(cfg["data"])
    rcfg = RecConfig(charset=charset, **cfg["model"])
    arrays, report = pretrain_rotnet(
        train_lines + holdout, rcfg, epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], lr=cfg["optimizer"]["lr"],
        seed=cfg["seed"], holdout=cfg["data"]["holdout"])
    for epoch, loss in enumerate(report["loss_history"], 1):
        metrics.write({"epoch": epoch, "loss": loss})
    metrics.write({"epoch": cfg["epochs"],
                   "rotation_accuracy": report["holdout_accuracy"]})
    ckpt_path = os.path.join(out_dir, "rotnet_trunk.ockt")
    save_checkpoint(ckpt_path, arrays, fingerprint(cfg),
                    meta={"config": cfg, "report": report})
    return {"task": "rotnet", "checkpoint": ckpt_path, **report}


def run_mine_uim(ckpt_path, inputs, out_manifest,
                 conf_thresh: float = 0.95) -> dict:
    """Pseudo-label images (paths to P5 files) and write a rec manifest.
    The model is rebuilt from the config stored in the checkpoint."""
    from .checkpoint import apply_checkpoint
    ckpt = load_checkpoint(ckpt_path)
    if "config" not in ckpt.meta:
        raise ConfigError(f"checkpoint {ckpt_path} lacks its config in meta")
    model = rec_model_from_cfg(ckpt.meta["config"])
    apply_checkpoint(model, ckpt, strict=True)
    model.eval()
    entries = []
    total = skipped = 0
    confs = []
    for path in inputs:
        samples, rep = uim_mine(model, [path], conf_thresh=conf_thresh)
        total += rep["total"]
        skipped += rep["skipped"]
        if samples:
            entries.append((os.fspath(path), samples[0].transcript))
            confs.append(rep["mean_confidence"])
    write_rec_manifest(out_manifest, entries)
    return {"total": total, "kept": len(entries), "skipped": skipped,
            "mean_confidence": float(np.mean(confs)) if confs else 0.0,
            "conf_thresh": conf_thresh, "manifest": os.fspath(out_manifest),
            "written": len(entries)}
