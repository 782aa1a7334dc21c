"""End-to-end pipeline: generate data to disk, detect -> rectify ->
recognize, and file-based detection / recognition evaluation."""

import os
import warnings

import numpy as np

from . import tensor as T
from .checkpoint import apply_checkpoint, load_checkpoint
from .data import (read_det_manifest, read_pnm, read_rec_manifest,
                   write_det_manifest, write_pnm, write_rec_manifest)
from .det_postproc import MatchReport, Quad, eval_detection, eval_end2end
from .errors import ConfigError, DataError, DeskOCRError
from .rec_models import infer_text
from .trainers import (boxes_from_prob, det_model_from_cfg, make_det_scenes,
                       make_rec_lines, rec_model_from_cfg, resolve_charset,
                       sentence_accuracy)
from .tensor import Tensor


def _aggregate(per_image) -> MatchReport:
    """Micro-averaged Hmean: matches/preds/gts summed over images."""
    n_match = sum(m for m, _, _ in per_image)
    n_pred = sum(p for _, p, _ in per_image)
    n_gt = sum(g for _, _, g in per_image)
    p = n_match / n_pred if n_pred else 0.0
    r = n_match / n_gt if n_gt else 0.0
    hmean = 2 * p * r / (p + r) if p + r else 0.0
    return MatchReport(p, r, hmean, [])


def _load_model(ckpt_path, kind: str):
    ckpt = load_checkpoint(ckpt_path)
    if "config" not in ckpt.meta:
        raise ConfigError(f"checkpoint {ckpt_path} lacks its config in meta")
    cfg = ckpt.meta["config"]
    model = det_model_from_cfg(cfg["model"]) if kind == "det" else rec_model_from_cfg(cfg)
    apply_checkpoint(model, ckpt, strict=True)
    model.eval()
    return model


def gen_data(cfg: dict) -> dict:
    """Write the configured dataset to out_dir: P6 scenes + det manifest
    for detection, P5 lines + rec manifest for recognition."""
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    if cfg["task"] == "det":
        train, hold = make_det_scenes(cfg["data"])
        entries = {"train": [], "holdout": []}
        for split, scenes in (("train", train), ("holdout", hold)):
            for i, scene in enumerate(scenes):
                name = f"{split}_{i:05d}.ppm"
                write_pnm(os.path.join(out_dir, name), scene.image)
                entries[split].append((name, scene.quads))
            write_det_manifest(os.path.join(out_dir, f"{split}.tsv"), entries[split])
        return {"task": "det", "out_dir": out_dir,
                "train": len(train), "holdout": len(hold)}
    train, hold = make_rec_lines(cfg["data"], cfg["model"]["height"])
    for split, lines in (("train", train), ("holdout", hold)):
        manifest = []
        for i, s in enumerate(lines):
            name = f"{split}_{i:05d}.pgm"
            write_pnm(os.path.join(out_dir, name), s.image[0])
            manifest.append((name, s.transcript))
        write_rec_manifest(os.path.join(out_dir, f"{split}.tsv"), manifest)
    return {"task": cfg["task"], "out_dir": out_dir,
            "train": len(train), "holdout": len(hold)}


def eval_det_files(pred_manifest, gt_manifest, iou_thresh: float = 0.5) -> dict:
    """Compare two det manifests keyed by image name."""
    pred = dict(read_det_manifest(pred_manifest))
    gt = dict(read_det_manifest(gt_manifest))
    if not gt:
        raise DataError(f"gt manifest {gt_manifest} is empty")
    per_image = []
    for name, gt_quads in gt.items():
        pred_quads = [q for q, _ in pred.get(name, [])]
        rep = eval_detection(pred_quads, [q for q, _ in gt_quads], iou_thresh)
        per_image.append((len(rep.pairs), len(pred_quads), len(gt_quads)))
    agg = _aggregate(per_image)
    return {"precision": agg.precision, "recall": agg.recall,
            "hmean": agg.hmean, "n_images": len(gt)}


def eval_rec_files(ckpt_path, manifest_path) -> dict:
    """Sentence accuracy of a rec checkpoint over a manifest of P5 lines."""
    model = _load_model(ckpt_path, "rec")
    base = os.path.dirname(manifest_path)
    entries = read_rec_manifest(manifest_path)
    if not entries:
        raise DataError(f"manifest {manifest_path} is empty")
    hits = 0
    for rel, text in entries:
        path = rel if os.path.isabs(rel) else os.path.join(base, rel)
        pred, _ = infer_text(model, read_pnm(path))
        hits += pred == text
    return {"sentence_accuracy": hits / len(entries), "n": len(entries)}


def run_e2e(det_ckpt, rec_ckpt, image_dir, gt_manifest, out_dir=None,
            iou_thresh: float = 0.5) -> dict:
    """Detect -> rectify -> recognize -> end-to-end Hmean.

    Writes predictions (ICDAR-style quads + text) to out_dir/pred.tsv.
    Unreadable images count as zero-prediction images.
    """
    from .det_postproc import crop_rectify
    det = _load_model(det_ckpt, "det")
    rec = _load_model(rec_ckpt, "rec")
    gt = read_det_manifest(gt_manifest)
    if not gt:
        raise DataError(f"gt manifest {gt_manifest} is empty")
    per_image = []
    pred_entries = []
    for name, gt_quads in gt:
        preds = []
        try:
            img = read_pnm(os.path.join(image_dir, name))
        except (DeskOCRError, OSError) as e:
            warnings.warn(f"skipping unreadable image {name}: {e}")
            img = None
        if img is not None:
            gray = img.mean(axis=0) if img.ndim == 3 else img
            with T.no_grad():
                out = det(Tensor(img[None] if img.ndim == 3 else
                                 np.repeat(img[None, None], 3, axis=1)))
            for quad in boxes_from_prob(out.prob_map.data[0, 0]):
                try:
                    crop = crop_rectify(gray, quad, rec.cfg.height)
                except DeskOCRError:
                    continue
                text, _ = infer_text(rec, _pad4(crop))
                preds.append((quad, text))
        rep = eval_end2end(preds, gt_quads, iou_thresh)
        per_image.append((len(rep.pairs), len(preds), len(gt_quads)))
        pred_entries.append((name, preds))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_det_manifest(os.path.join(out_dir, "pred.tsv"), pred_entries)
    agg = _aggregate(per_image)
    return {"precision": agg.precision, "recall": agg.recall,
            "hmean": agg.hmean, "n_images": len(gt),
            "pred_file": os.path.join(out_dir, "pred.tsv") if out_dir else None}


def _pad4(crop: np.ndarray) -> np.ndarray:
    """Right-pad a [h,w] crop so its width is a multiple of 4."""
    w = crop.shape[1]
    pad = (-w) % 4
    if pad:
        crop = np.pad(crop, ((0, 0), (0, pad)), constant_values=0.0)
    return crop.astype(np.float32)
