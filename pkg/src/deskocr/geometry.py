"""Polygon geometry for detection targets and post-processing.

Convex polygons only (quads from min-area rectangles). Offsetting moves
each edge along its outward normal and re-intersects neighbouring edge
lines — exact for rectangles, adequate for min-area boxes. IoU goes
through Sutherland-Hodgman clipping plus the shoelace formula.
"""

from __future__ import annotations

import numpy as np


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(pts: np.ndarray) -> float:
    return abs(signed_area(pts))


def perimeter(pts: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).sum())


def order_quad(pts: np.ndarray) -> np.ndarray:
    """Canonical vertex order: top-left, top-right, bottom-right, bottom-left
    (clockwise on screen, y pointing down)."""
    pts = np.asarray(pts, np.float64)
    s = pts.sum(axis=1)
    d = pts[:, 0] - pts[:, 1]
    tl = pts[np.argmin(s)]
    br = pts[np.argmax(s)]
    tr = pts[np.argmax(d)]
    bl = pts[np.argmin(d)]
    return np.array([tl, tr, br, bl])


def offset_polygon(pts: np.ndarray, delta: float) -> np.ndarray:
    """Offset a convex polygon outward by `delta` (inward when negative):
    each edge is translated along its outward normal, and consecutive edge
    lines are re-intersected to produce the new vertices."""
    pts = np.asarray(pts, np.float64)
    n = len(pts)
    ccw = signed_area(pts) > 0  # screen coords: y down
    lines = []
    for i in range(n):
        p, q = pts[i], pts[(i + 1) % n]
        e = q - p
        ln = np.linalg.norm(e)
        if ln < 1e-12:
            continue
        e = e / ln
        normal = np.array([e[1], -e[0]]) if ccw else np.array([-e[1], e[0]])
        lines.append((p + normal * delta, e))
    m = len(lines)
    out = []
    for i in range(m):
        p1, d1 = lines[i - 1]
        p2, d2 = lines[i]
        cross = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(cross) < 1e-12:
            out.append(p2)
            continue
        t = ((p2[0] - p1[0]) * d2[1] - (p2[1] - p1[1]) * d2[0]) / cross
        out.append(p1 + d1 * t)
    return np.array(out)


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` against convex `clipper`."""
    clipper = np.asarray(clipper, np.float64)
    if signed_area(clipper) < 0:
        clipper = clipper[::-1]
    output = list(np.asarray(subject, np.float64))
    n = len(clipper)
    for i in range(n):
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a
        if not output:
            break
        inp = output
        output = []

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0

        def intersect(p, q):
            d = q - p
            denom = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[1] * (p[0] - a[0]) - edge[0] * (p[1] - a[1])) / denom
            return p + d * t

        for j, cur in enumerate(inp):
            prev = inp[j - 1]
            ci, pi = inside(cur), inside(prev)
            if ci:
                if not pi:
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif pi:
                output.append(intersect(prev, cur))
    return np.array(output) if output else np.zeros((0, 2))


def polygon_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter_poly = clip_polygon(a, b)
    inter = polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = polygon_area(np.asarray(a, np.float64)) + polygon_area(np.asarray(b, np.float64)) - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def _cross2(a: np.ndarray, b: np.ndarray) -> float:
    return a[0] * b[1] - a[1] * b[0]


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull in CCW order (math convention)."""
    pts = np.unique(np.asarray(points, np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross2(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(points: np.ndarray) -> np.ndarray:
    """Minimum-area enclosing rectangle of a point set (rotating calipers).
    Returns 4 corners in canonical quad order."""
    hull = convex_hull(points)
    if len(hull) == 1:
        p = hull[0]
        return np.array([p, p, p, p], np.float64)
    if len(hull) == 2:
        a, b = hull
        return order_quad(np.array([a, b, b, a]))
    best = None
    n = len(hull)
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        ln = np.linalg.norm(e)
        if ln < 1e-12:
            continue
        ux, uy = e / ln
        rot = np.array([[ux, uy], [-uy, ux]])
        proj = hull @ rot.T
        mn, mx = proj.min(axis=0), proj.max(axis=0)
        area = (mx[0] - mn[0]) * (mx[1] - mn[1])
        if best is None or area < best[0]:
            corners = np.array([[mn[0], mn[1]], [mx[0], mn[1]], [mx[0], mx[1]], [mn[0], mx[1]]])
            best = (area, corners @ rot)
    return order_quad(best[1])


def fill_convex(poly: np.ndarray, h: int, w: int) -> np.ndarray:
    """Rasterize a convex polygon into an h x w boolean mask (pixel centers)."""
    poly = np.asarray(poly, np.float64)
    if signed_area(poly) < 0:
        poly = poly[::-1]
    x0 = max(int(np.floor(poly[:, 0].min())), 0)
    x1 = min(int(np.ceil(poly[:, 0].max())) + 1, w)
    y0 = max(int(np.floor(poly[:, 1].min())), 0)
    y1 = min(int(np.ceil(poly[:, 1].max())) + 1, h)
    mask = np.zeros((h, w), bool)
    if x0 >= x1 or y0 >= y1:
        return mask
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = np.ones(xs.shape, bool)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        inside &= (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0]) >= 0
    mask[y0:y1, x0:x1] = inside
    return mask


def distance_to_edges(poly: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Min distance from points (xs, ys) to the polygon's edge segments."""
    poly = np.asarray(poly, np.float64)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    best = np.full(len(pts), np.inf)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ab = b - a
        ln2 = float(ab @ ab)
        if ln2 < 1e-12:
            d = np.linalg.norm(pts - a, axis=1)
        else:
            t = np.clip((pts - a) @ ab / ln2, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d = np.linalg.norm(pts - proj, axis=1)
        best = np.minimum(best, d)
    return best.reshape(xs.shape)
