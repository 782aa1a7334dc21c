"""Probability maps to boxes, crop rectification and Hmean evaluation.

Box extraction follows the standard DB recipe: binarize, 4-connected
components, min-area rectangle, score filter, unclip, clip to image.
Matching for Hmean is greedy one-to-one in descending prediction-score
order; ties keep input order (stable sort).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, DomainError
from .geometry import (min_area_rect, offset_polygon, order_quad, perimeter,
                       polygon_area, polygon_iou)


@dataclass
class Quad:
    """Four (x, y) vertices in image pixels, clockwise, plus a detection
    score (mean probability over the source component)."""
    points: np.ndarray          # [4,2] float32
    score: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, np.float32).reshape(4, 2)

    def area(self) -> float:
        return polygon_area(self.points)


@dataclass
class MatchReport:
    precision: float
    recall: float
    hmean: float
    pairs: list = field(default_factory=list)   # (pred_idx, gt_idx)


def _hmean(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def extract_boxes(prob_map: np.ndarray, bin_thresh: float = 0.3,
                  box_thresh: float = 0.6, unclip_ratio: float = 1.5,
                  max_boxes: int = 1000) -> list:
    """DB-style box extraction from a [H,W] probability map."""
    prob = np.asarray(prob_map, np.float32)
    if prob.ndim != 2:
        raise DataError(f"prob_map must be 2-d, got shape {prob.shape}")
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise DomainError("prob_map values must lie in [0,1]")
    h, w = prob.shape
    labels, count = ndimage.label(prob > bin_thresh, structure=_FOUR_CONN)
    quads = []
    for idx in range(1, count + 1):
        ys, xs = np.nonzero(labels == idx)
        if xs.size < 3:
            continue
        score = float(prob[ys, xs].mean())
        if score < box_thresh:
            continue
        # pixel corners, so a solid k x m block yields a k x m rectangle
        pts = np.concatenate([np.stack([xs + dx, ys + dy], axis=1)
                              for dx in (0, 1) for dy in (0, 1)]).astype(np.float64)
        rect = min_area_rect(pts)
        if unclip_ratio > 0:
            delta = polygon_area(rect) * unclip_ratio / max(perimeter(rect), 1e-6)
            rect = offset_polygon(rect, delta)
            rect = min_area_rect(rect)
        rect[:, 0] = np.clip(rect[:, 0], 0, w)
        rect[:, 1] = np.clip(rect[:, 1], 0, h)
        if min(np.linalg.norm(rect[1] - rect[0]), np.linalg.norm(rect[2] - rect[1])) < 3.0:
            continue
        quads.append(Quad(rect, score))
        if len(quads) >= max_boxes:
            break
    return quads


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 perspective transform mapping dst points onto src points."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = dst[i]
        u, v = src[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -x * u, -y * u]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -x * v, -y * v]
        b[2 * i] = u
        b[2 * i + 1] = v
    coef = np.linalg.solve(a, b)
    return np.append(coef, 1.0).reshape(3, 3)


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(np.float32)
    fy = (ys - y0).astype(np.float32)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def crop_rectify(img: np.ndarray, quad: Quad, target_h: int) -> np.ndarray:
    """Perspective-rectify `quad` out of a [H,W] grayscale image.

    Output height is target_h; width preserves the quad's aspect ratio.
    Quads taller than 1.5x their width are treated as vertical text and
    the output is rotated 90 degrees clockwise.
    """
    pts = order_quad(np.asarray(quad.points, np.float64))
    if polygon_area(pts) < 4.0:
        raise DataError(f"degenerate quad, area {polygon_area(pts):.2f} px^2 < 4")
    top = np.linalg.norm(pts[1] - pts[0])
    bottom = np.linalg.norm(pts[2] - pts[3])
    left = np.linalg.norm(pts[3] - pts[0])
    right = np.linalg.norm(pts[2] - pts[1])
    ew = 0.5 * (top + bottom)
    eh = 0.5 * (left + right)
    out_w = max(2, int(round(target_h * ew / max(eh, 1e-6))))
    out_h = int(target_h)
    dst = np.array([[0, 0], [out_w - 1, 0], [out_w - 1, out_h - 1], [0, out_h - 1]],
                   np.float64)
    hm = _homography(pts, dst)
    gy, gx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    denom = hm[2, 0] * gx + hm[2, 1] * gy + hm[2, 2]
    sx = (hm[0, 0] * gx + hm[0, 1] * gy + hm[0, 2]) / denom
    sy = (hm[1, 0] * gx + hm[1, 1] * gy + hm[1, 2]) / denom
    crop = _bilinear(np.asarray(img, np.float32), sx, sy)
    if eh > 1.5 * ew:
        crop = np.rot90(crop, k=3)
    return crop


def _greedy_match(pred, gt, pair_ok):
    order = sorted(range(len(pred)), key=lambda i: -pred[i].score)
    taken = set()
    pairs = []
    for pi in order:
        best, best_iou = -1, 0.0
        for gi in range(len(gt)):
            if gi in taken:
                continue
            iou = polygon_iou(pred[pi].points, gt[gi].points)
            if iou > best_iou and pair_ok(pi, gi, iou):
                best, best_iou = gi, iou
        if best >= 0:
            taken.add(best)
            pairs.append((pi, best))
    return sorted(pairs)


def _report(pairs, n_pred, n_gt) -> MatchReport:
    p = len(pairs) / n_pred if n_pred else 0.0
    r = len(pairs) / n_gt if n_gt else 0.0
    return MatchReport(p, r, _hmean(p, r), pairs)


def eval_detection(pred: list, gt: list, iou_thresh: float = 0.5) -> MatchReport:
    """Detection Hmean. Empty predictions score precision 0 by convention."""
    pairs = _greedy_match(pred, gt, lambda pi, gi, iou: iou >= iou_thresh)
    return _report(pairs, len(pred), len(gt))


def eval_end2end(pred: list, gt: list, iou_thresh: float = 0.5) -> MatchReport:
    """End-to-end Hmean: IoU match plus exact transcript equality (trimmed).

    pred and gt are lists of (Quad, text) pairs.
    """
    pq = [q for q, _ in pred]
    gq = [q for q, _ in gt]

    def ok(pi, gi, iou):
        return iou >= iou_thresh and pred[pi][1].strip() == gt[gi][1].strip()

    pairs = _greedy_match(pq, gq, ok)
    return _report(pairs, len(pred), len(gt))


# ------------------------------------------------------------- serialization


def format_quad_line(quad: Quad, text: str | None = None) -> str:
    """ICDAR-style line: 8 comma-separated integers, optional text field."""
    coords = ",".join(str(int(round(v))) for v in quad.points.reshape(-1))
    return coords if text is None else f"{coords},{text}"


def parse_quad_line(line: str):
    """Inverse of format_quad_line; returns (Quad, text or None)."""
    parts = line.rstrip("\n").split(",")
    if len(parts) < 8:
        raise DataError(f"quad line needs at least 8 fields, got {len(parts)}: {line!r}")
    try:
        coords = np.array([float(v) for v in parts[:8]], np.float32).reshape(4, 2)
    except ValueError as exc:
        raise DataError(f"bad quad line {line!r}") from exc
    text = ",".join(parts[8:]) if len(parts) > 8 else None
    return Quad(coords), text


def write_quad_file(path, entries):
    """entries: iterable of Quad or (Quad, text)."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            quad, text = e if isinstance(e, tuple) else (e, None)
            fh.write(format_quad_line(quad, text) + "\n")


def read_quad_file(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(parse_quad_line(line))
    return out
