"""Box extraction, crop rectification and Hmean evaluator tests, including
the golden cases the acceptance suite re-checks at the pipeline level."""

import numpy as np
import pytest

from deskocr.det_postproc import (MatchReport, Quad, crop_rectify,
                                  eval_detection, eval_end2end, extract_boxes,
                                  format_quad_line, parse_quad_line,
                                  read_quad_file, write_quad_file)
from deskocr.errors import DataError, DomainError
from deskocr.geometry import polygon_iou


def _rect_quad(x0, y0, w, h, score=1.0):
    return Quad(np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]],
                         float), score)


# ------------------------------------------------------------ extract_boxes


def test_all_zero_map_gives_no_boxes():
    assert extract_boxes(np.zeros((50, 50), np.float32)) == []


def test_single_rectangle_recovered():
    m = np.zeros((100, 100), np.float32)
    m[40:50, 30:50] = 1.0
    quads = extract_boxes(m, unclip_ratio=0.0)
    assert len(quads) == 1
    ref = np.array([[30, 40], [50, 40], [50, 50], [30, 50]], float)
    assert polygon_iou(quads[0].points, ref) >= 0.9
    assert quads[0].score == pytest.approx(1.0)


def test_two_rectangles_split_by_zero_column():
    m = np.zeros((50, 50), np.float32)
    m[10:20, 5:20] = 1.0
    m[10:20, 21:40] = 1.0
    assert len(extract_boxes(m, unclip_ratio=0.0)) == 2


def test_box_thresh_filters_low_score():
    m = np.zeros((50, 50), np.float32)
    m[10:20, 10:30] = 0.4          # above bin_thresh, mean below box_thresh
    assert extract_boxes(m) == []
    assert len(extract_boxes(m, box_thresh=0.3, unclip_ratio=0.0)) == 1


def test_tiny_components_skipped():
    m = np.zeros((50, 50), np.float32)
    m[10, 10] = 1.0
    m[30, 30] = 1.0
    m[30, 31] = 1.0
    assert extract_boxes(m) == []


def test_unclip_monotonicity():
    m = np.zeros((100, 100), np.float32)
    m[40:50, 30:50] = 1.0
    q1 = extract_boxes(m, unclip_ratio=1.0)[0]
    q2 = extract_boxes(m, unclip_ratio=2.0)[0]
    assert q2.area() > q1.area()
    # containment: intersection of q1 with q2 is all of q1
    assert polygon_iou(q1.points, q2.points) == pytest.approx(q1.area() / q2.area(),
                                                              rel=1e-5)


def test_unclip_offset_value():
    # [DERIVED] 20x10 block: offset = 200 * 1.5 / 60 = 5, so the default
    # unclip grows the box to 30x20.
    m = np.zeros((100, 100), np.float32)
    m[40:50, 30:50] = 1.0
    q = extract_boxes(m)[0]
    assert q.area() == pytest.approx(600.0, rel=1e-4)


def test_boxes_clipped_to_image():
    m = np.zeros((40, 40), np.float32)
    m[0:10, 0:20] = 1.0
    for q in extract_boxes(m):
        assert q.points.min() >= 0.0
        assert q.points[:, 0].max() <= 40 and q.points[:, 1].max() <= 40


def test_extract_boxes_validation():
    with pytest.raises(DomainError):
        extract_boxes(np.full((10, 10), 1.5, np.float32))
    with pytest.raises(DataError):
        extract_boxes(np.zeros((2, 10, 10), np.float32))


# ------------------------------------------------------------ crop_rectify


def test_identity_crop_exact():
    img = np.linspace(0, 1, 64 * 64, dtype=np.float32).reshape(64, 64)
    q = Quad(np.array([[0, 0], [63, 0], [63, 63], [0, 63]], float))
    out = crop_rectify(img, q, 64)
    np.testing.assert_array_equal(out, img)


def test_axis_aligned_crop_matches_analytic_resize():
    # bilinear sampling of a linear ramp is exact, so compare analytically
    gy, gx = np.mgrid[0:40, 0:80]
    img = ((gx + gy) / 120.0).astype(np.float32)
    q = Quad(np.array([[10, 5], [69, 5], [69, 34], [10, 34]], float))
    out = crop_rectify(img, q, 16)
    oh, ow = out.shape
    assert oh == 16
    jj, ii = np.meshgrid(np.arange(ow), np.arange(oh))
    want = (10 + jj * 59.0 / (ow - 1) + 5 + ii * 29.0 / (oh - 1)) / 120.0
    assert np.abs(out - want).max() < 2.0 / 255.0


def test_rotated_rectangle_round_trip():
    n = 100
    gy, gx = np.mgrid[0:n, 0:n]
    img = (np.sin(gx / 13.0) * np.cos(gy / 9.0) * 0.5 + 0.5).astype(np.float32)
    x0, y0, w, h = 20, 30, 46, 16
    wide = Quad(np.array([[x0, y0], [x0 + w - 1, y0], [x0 + w - 1, y0 + h - 1],
                          [x0, y0 + h - 1]], float))
    crop_a = crop_rectify(img, wide, 16)

    rot = np.rot90(img, k=1)
    xs = (y0, y0 + h - 1)
    ys = (n - 1 - (x0 + w - 1), n - 1 - x0)
    tall = Quad(np.array([[xs[0], ys[0]], [xs[1], ys[0]], [xs[1], ys[1]],
                          [xs[0], ys[1]]], float))
    crop_b = crop_rectify(rot, tall, 48)
    assert crop_b.shape == crop_a.shape
    assert np.abs(crop_b - crop_a).max() < 2.0 / 255.0


def test_vertical_quad_is_rotated():
    img = np.random.default_rng(0).random((80, 80)).astype(np.float32)
    tall = _rect_quad(10, 10, 10, 40)
    out = crop_rectify(img, tall, 32)
    assert out.shape[0] < out.shape[1]      # rotated to landscape


def test_degenerate_quad_rejected():
    img = np.zeros((20, 20), np.float32)
    with pytest.raises(DataError):
        crop_rectify(img, _rect_quad(5, 5, 1, 1), 16)


# ---------------------------------------------------------------- matching


def test_identical_pred_gt():
    quads = [_rect_quad(0, 0, 10, 5), _rect_quad(20, 20, 8, 8)]
    rep = eval_detection(quads, quads)
    assert rep.precision == rep.recall == rep.hmean == 1.0
    assert sorted(rep.pairs) == [(0, 0), (1, 1)]


def test_empty_pred_convention():
    rep = eval_detection([], [_rect_quad(0, 0, 10, 5)])
    assert (rep.precision, rep.recall, rep.hmean) == (0.0, 0.0, 0.0)


def test_one_pred_two_gt():
    gt = [_rect_quad(0, 0, 10, 5), _rect_quad(30, 30, 10, 5)]
    rep = eval_detection([gt[0]], gt)
    assert rep.precision == 1.0
    assert rep.recall == 0.5
    assert rep.hmean == pytest.approx(2.0 / 3.0)


def test_matching_is_one_to_one():
    gt = [_rect_quad(0, 0, 10, 10)]
    pred = [_rect_quad(0, 0, 10, 10, score=0.9), _rect_quad(1, 0, 10, 10, score=0.8)]
    rep = eval_detection(pred, gt)
    assert len(rep.pairs) == 1 and rep.pairs[0] == (0, 0)
    assert rep.precision == 0.5 and rep.recall == 1.0


def test_gt_permutation_invariance():
    rng = np.random.default_rng(2)
    gt = [_rect_quad(i * 15, 5, 10, 8) for i in range(5)]
    pred = [_rect_quad(i * 15 + 1, 5, 10, 8, score=rng.random()) for i in range(5)]
    base = eval_detection(pred, gt)
    perm = rng.permutation(5)
    shuffled = eval_detection(pred, [gt[i] for i in perm])
    assert (base.precision, base.recall, base.hmean) == (
        shuffled.precision, shuffled.recall, shuffled.hmean)


def test_iou_threshold_boundary():
    gt = [_rect_quad(0, 0, 10, 10)]
    pred = [_rect_quad(5, 0, 10, 10)]    # IoU = 50/150 = 1/3
    assert eval_detection(pred, gt, iou_thresh=0.5).hmean == 0.0
    assert eval_detection(pred, gt, iou_thresh=1.0 / 3.0).hmean == 1.0


def test_end2end_transcripts():
    quads = [_rect_quad(i * 20, 0, 15, 10) for i in range(4)]
    gt = [(q, t) for q, t in zip(quads, ["AB", "CD", "EF", "GH"])]
    pred = [(q, t) for q, t in zip(quads, ["AB", "CD", "XX", "GH"])]
    rep = eval_end2end(pred, gt)
    assert rep.hmean == pytest.approx(0.75)
    assert eval_end2end(gt, gt).hmean == 1.0


def test_end2end_requires_overlap():
    gt = [(_rect_quad(0, 0, 10, 10), "HI")]
    pred = [(_rect_quad(50, 50, 10, 10), "HI")]
    assert eval_end2end(pred, gt).hmean == 0.0


def test_end2end_trims_whitespace():
    gt = [(_rect_quad(0, 0, 10, 10), "HI")]
    pred = [(_rect_quad(0, 0, 10, 10), "  HI ")]
    assert eval_end2end(pred, gt).hmean == 1.0


# ------------------------------------------------------------ serialization


def test_quad_line_round_trip():
    q = _rect_quad(3, 4, 10, 6)
    line = format_quad_line(q, "HELLO")
    assert line == "3,4,13,4,13,10,3,10,HELLO"
    q2, text = parse_quad_line(line)
    assert text == "HELLO"
    np.testing.assert_allclose(q2.points, q.points)


def test_quad_line_text_with_commas():
    q = _rect_quad(0, 0, 5, 5)
    q2, text = parse_quad_line(format_quad_line(q, "A,B"))
    assert text == "A,B"


def test_quad_line_without_text():
    q2, text = parse_quad_line(format_quad_line(_rect_quad(1, 2, 3, 4)))
    assert text is None


def test_bad_quad_line():
    with pytest.raises(DataError):
        parse_quad_line("1,2,3")
    with pytest.raises(DataError):
        parse_quad_line("a,b,c,d,e,f,g,h")


def test_quad_file_round_trip(tmp_path):
    path = tmp_path / "quads.txt"
    entries = [(_rect_quad(0, 0, 10, 5), "AB"), (_rect_quad(20, 20, 8, 8), "CD")]
    write_quad_file(path, entries)
    got = read_quad_file(path)
    assert [t for _, t in got] == ["AB", "CD"]
    np.testing.assert_allclose(got[0][0].points, entries[0][0].points)
