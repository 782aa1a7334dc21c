"""Acceptance criteria 1-10.

Each test covers one numbered criterion and prints a single
``[ACCEPTANCE n] <name>: PASS|FAIL`` line (visible with -s / on failure).
Training runs reuse module-scoped fixtures; everything is seeded, so
results — including the trend checks — are reproducible bit-for-bit.
"""

import itertools
import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from deskocr import tensor as T
from deskocr.config import load_config
from deskocr.tensor import Tensor


@contextmanager
def _report(n, name):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE {n}] {name}: FAIL")
        raise
    print(f"[ACCEPTANCE {n}] {name}: PASS")


# ----------------------------------------------------- training fixtures


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def rec_run(workdir):
    """Criterion-3 training run: toy-default recognizer config."""
    from deskocr.trainers import train_rec
    cfg = load_config("rec")
    cfg["out_dir"] = str(workdir / "rec")
    t0 = time.perf_counter()
    summary = train_rec(cfg)
    elapsed = time.perf_counter() - t0
    metrics = open(os.path.join(cfg["out_dir"], "metrics.jsonl"), "rb").read()
    return {"cfg": cfg, "summary": summary, "elapsed": elapsed,
            "metrics": metrics, "ckpt": summary["checkpoint"]}


@pytest.fixture(scope="module")
def det_run(workdir):
    """Criterion-4 training run: toy-default detector config."""
    from deskocr.trainers import train_det
    cfg = load_config("det")
    cfg["out_dir"] = str(workdir / "det")
    t0 = time.perf_counter()
    summary = train_det(cfg)
    elapsed = time.perf_counter() - t0
    metrics = open(os.path.join(cfg["out_dir"], "metrics.jsonl"), "rb").read()
    return {"cfg": cfg, "summary": summary, "elapsed": elapsed,
            "metrics": metrics, "ckpt": summary["checkpoint"]}


# ------------------------------------------------------------ criterion 1


def _collapse(path, blank):
    out = []
    for sym, _ in itertools.groupby(path):
        if sym != blank:
            out.append(sym)
    return out


def test_criterion_1_ctc_oracle():
    from deskocr.kernels import log_softmax
    from deskocr.losses import CtcBatch, ctc_loss
    with _report(1, "CTC oracle equivalence"):
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        checked = 0
        while checked < 200:
            V = int(rng.integers(1, 4))      # non-blank symbols
            C = V + 1                        # blank = last index
            L = int(rng.integers(1, 7))
            label = rng.integers(0, V, int(rng.integers(1, 4))).tolist()
            need = len(label) + sum(a == b for a, b in zip(label, label[1:]))
            if need > L:
                continue
            T.reset_tape()
            lp = log_softmax(Tensor(rng.normal(size=(1, L, C)).astype(np.float32)),
                             axis=-1)
            got = ctc_loss(CtcBatch(lp, [label])).item()
            table = np.float64(lp.data[0])
            total = 0.0
            for path in itertools.product(range(C), repeat=L):
                if _collapse(path, V) == label:
                    total += np.exp(sum(table[t, s] for t, s in enumerate(path)))
            want = -np.log(total)
            assert abs(got - want) < 1e-5, (label, L, C, got, want)
            checked += 1
        assert time.perf_counter() - t0 < 10.0


# ------------------------------------------------------------ criterion 2


def test_criterion_2_gradient_suite():
    from deskocr import kernels as K
    from deskocr.blocks import GlobalMixBlock, RSEConv, SEBlock
    from deskocr.det_models import DBHead
    from deskocr.kernels import log_softmax
    from deskocr.losses import CtcBatch, ctc_loss, dml_kl
    from tests.conftest import gradcheck
    with _report(2, "gradient suite"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        results = {}

        w9 = rng.normal(scale=0.2, size=(4, 1, 9, 9)).astype(np.float32)
        results["conv9x9_dw"] = gradcheck(
            lambda x, w: T.tmean(K.conv2d(x, w, stride=1, padding=4, groups=4)),
            [rng.normal(size=(1, 4, 12, 12)), w9])

        se = SEBlock(8, np.random.default_rng(0))
        results["se"] = gradcheck(lambda x: T.tmean(se(x)),
                                  [rng.normal(size=(2, 8, 5, 5))])

        rse = RSEConv(8, np.random.default_rng(1))
        results["rse"] = gradcheck(lambda x: T.tmean(rse(x)),
                                   [rng.normal(size=(1, 8, 5, 5))])

        mix = GlobalMixBlock(8, 2, np.random.default_rng(2))
        results["mix"] = gradcheck(lambda x: T.tmean(mix(x)),
                                   [rng.normal(size=(1, 6, 8))])

        head = DBHead(8, 8, 50.0, np.random.default_rng(3))
        results["db_head"] = gradcheck(lambda x: T.tmean(head(x).binary_map),
                                       [rng.normal(size=(2, 8, 6, 6))])

        results["layer_norm"] = gradcheck(
            lambda x, g, b: T.tmean(K.layer_norm(x, g, b)),
            [rng.normal(size=(2, 5, 6)), rng.normal(size=(6,)),
             rng.normal(size=(6,))])

        results["ctc"] = gradcheck(
            lambda x: ctc_loss(CtcBatch(log_softmax(x, axis=-1), [[0, 1], [2]])),
            [rng.normal(size=(2, 6, 4))])

        results["dml_kl"] = gradcheck(
            lambda p, q: dml_kl(p, q),
            [rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 5, 6))])

        for name, (worst, med) in results.items():
            assert med < 1e-3, f"{name}: median {med:.2e}"
            assert worst < 1e-2, f"{name}: worst {worst:.2e}"
        assert time.perf_counter() - t0 < 120.0


# ------------------------------------------------------------ criterion 3


def test_criterion_3_recognition_convergence(rec_run):
    with _report(3, "toy recognition convergence"):
        final = json.loads(rec_run["metrics"].splitlines()[-1])
        assert final["epoch"] == 50
        assert final["sentence_accuracy"] >= 0.95, final
        assert rec_run["elapsed"] < 600.0, rec_run["elapsed"]


# ------------------------------------------------------------ criterion 4


def test_criterion_4_detection_convergence(det_run):
    with _report(4, "toy detection convergence"):
        final = json.loads(det_run["metrics"].splitlines()[-1])
        assert final["epoch"] == 60
        assert final["hmean"] >= 0.80, final
        assert det_run["elapsed"] < 1200.0, det_run["elapsed"]


# ------------------------------------------------------------ criterion 5


def test_criterion_5_gtc_inference_invariance(rec_run):
    from deskocr.checkpoint import apply_checkpoint, load_checkpoint
    from deskocr.data import render_text_line
    from deskocr.rec_models import RecConfig, build_recognizer, rec_forward
    from deskocr.trainers import resolve_charset
    with _report(5, "GTC inference invariance"):
        cfg = rec_run["cfg"]
        assert cfg["model"]["gtc_enabled"]
        ckpt = load_checkpoint(rec_run["ckpt"])
        charset = resolve_charset(cfg["data"])
        full = build_recognizer(RecConfig(charset=charset, **cfg["model"]))
        apply_checkpoint(full, ckpt, strict=True)
        stripped_cfg = dict(cfg["model"], gtc_enabled=False)
        stripped = build_recognizer(RecConfig(charset=charset, **stripped_cfg))
        loaded, unused, fresh = apply_checkpoint(stripped, ckpt, strict=False)
        assert fresh == [] and unused  # attention branch dropped entirely

        img = render_text_line("0123", h=cfg["model"]["height"], seed=9).image
        x = Tensor(img[None])
        T.reset_tape()
        out_full = rec_forward(full, x, "infer")
        n_infer = T.tape().op_count
        T.reset_tape()
        out_stripped = rec_forward(stripped, x, "infer")
        n_stripped = T.tape().op_count
        T.reset_tape()
        out_train = rec_forward(full, x, "train")
        n_train = T.tape().op_count

        np.testing.assert_array_equal(out_full.ctc_logits.data,
                                      out_stripped.ctc_logits.data)
        np.testing.assert_array_equal(out_full.ctc_logits.data,
                                      out_train.ctc_logits.data)
        assert out_train.attn_logits is not None
        assert n_infer == n_stripped
        assert n_infer < n_train


# ------------------------------------------------------------ criterion 6


def test_criterion_6a_postpool_speedup(workdir):
    from deskocr.losses import CtcBatch, ctc_loss
    from deskocr.kernels import log_softmax
    from deskocr.rec_models import RecConfig, build_recognizer
    from deskocr.tensor import Adam
    from deskocr.trainers import _pad_rec_batch, encode_labels, make_rec_lines
    with _report(6, "trend a: postpool >= 3x faster per epoch"):
        # small batch: the svtr reference keeps 12xL tokens through six
        # attention blocks, so large batches exhaust the tape's memory
        data = {"n_lines": 8, "holdout": 0, "text_len": [2, 3],
                "charset": "0123456789", "charset_path": None, "seed": 5}
        lines, _ = make_rec_lines(data, 48)
        imgs = _pad_rec_batch(lines)
        labels = encode_labels([s.transcript for s in lines], "0123456789", 25)

        def epoch_time(variant, seed):
            cfg = RecConfig("0123456789", variant=variant, height=48,
                            max_width=512, d=64, heads=4, width_mult=0.5,
                            seed=seed)
            model = build_recognizer(cfg)
            opt = Adam([{"params": model.parameters(), "weight_decay": 0.0}],
                       lr=1e-3)

            def step():
                T.reset_tape()
                model.zero_grad()
                out = model(imgs)
                loss = ctc_loss(CtcBatch(log_softmax(out.ctc_logits, axis=-1),
                                         labels))
                T.backward(loss)
                opt.step()

            step()  # warmup / allocation
            t0 = time.perf_counter()
            for _ in range(3):
                step()
            return (time.perf_counter() - t0) / 3

        slow = np.mean([epoch_time("svtr_tiny_like", s) for s in range(3)])
        fast = np.mean([epoch_time("lcnet_g2_postpool", s) for s in range(3)])
        assert slow / fast >= 3.0, (slow, fast)


def test_criterion_6b_height48_beats_height32(workdir):
    from deskocr.trainers import train_rec
    with _report(6, "trend b: h48 accuracy >= h32"):
        def run(height, seed):
            cfg = load_config("rec")
            cfg["model"]["height"] = height
            cfg["data"].update({"n_lines": 600, "holdout": 100, "seed": seed,
                                "noise_sigma": 0.05})
            cfg["seed"] = seed
            cfg["epochs"] = 55
            cfg["out_dir"] = str(workdir / f"h{height}_{seed}")
            return train_rec(cfg)["sentence_accuracy"]

        acc48 = [run(48, s) for s in range(3)]
        acc32 = [run(32, s) for s in range(3)]
        assert np.mean(acc48) >= np.mean(acc32), (acc48, acc32)


def test_criterion_6c_cml_beats_plain(workdir):
    from deskocr.trainers import train_det
    with _report(6, "trend c: CML student >= plain student"):
        teacher_cfg = load_config("det")
        teacher_cfg["model"].update({"role": "teacher", "neck": "lk_pan",
                                     "width_mult": 1.0, "neck_ch": 64,
                                     "depth": 2})
        teacher_cfg["data"].update({"n_scenes": 192, "holdout": 16})
        teacher_cfg["train"].update({"mode": "dml"})
        teacher_cfg["epochs"] = 20
        teacher_cfg["out_dir"] = str(workdir / "cml_teacher")
        teacher = train_det(teacher_cfg)

        def student(seed, mode):
            cfg = load_config("det")
            cfg["model"]["seed"] = seed
            cfg["seed"] = seed
            cfg["data"].update({"n_scenes": 48, "holdout": 16})
            cfg["train"].update({
                "mode": mode, "w_peer_dml": 0.25, "w_teacher": 4.0,
                "teacher_ckpt": teacher["checkpoint"] if mode == "cml" else None})
            cfg["epochs"] = 24
            cfg["out_dir"] = str(workdir / f"cml_{mode}_{seed}")
            return train_det(cfg)["hmean"]

        plain = [student(s, "plain") for s in range(3)]
        cml = [student(s, "cml") for s in range(3)]
        assert np.mean(cml) >= np.mean(plain), (cml, plain)


# ------------------------------------------------------------ criterion 7


def test_criterion_7_uim_monotonicity_and_yield(rec_run):
    from deskocr.checkpoint import apply_checkpoint, load_checkpoint
    from deskocr.data import uim_mine
    from deskocr.trainers import make_rec_lines, rec_model_from_cfg
    with _report(7, "UIM monotonicity + yield"):
        cfg = rec_run["cfg"]
        model = rec_model_from_cfg(cfg)
        apply_checkpoint(model, load_checkpoint(rec_run["ckpt"]), strict=True)
        clean = {"n_lines": 100, "holdout": 0, "text_len": [1, 8],
                 "charset": cfg["data"]["charset"], "charset_path": None,
                 "noise_sigma": 0.0, "seed": 77}
        lines, _ = make_rec_lines(clean, cfg["model"]["height"])
        imgs = [s.image for s in lines]
        sizes = []
        for thresh in (0.0, 0.5, 0.8, 0.9, 0.95, 0.99, 1.01):
            kept, _ = uim_mine(model, imgs, conf_thresh=thresh)
            sizes.append(len(kept))
        assert all(a >= b for a, b in zip(sizes, sizes[1:])), sizes
        assert sizes[-1] == 0
        kept90, _ = uim_mine(model, imgs, conf_thresh=0.9)
        assert len(kept90) >= 80, len(kept90)


# ------------------------------------------------------------ criterion 8


def test_criterion_8_postproc_golden_suite():
    from deskocr.det_postproc import (Quad, eval_detection, eval_end2end,
                                      extract_boxes)
    from deskocr.geometry import polygon_iou
    with _report(8, "post-processing golden suite"):
        def rect(x0, y0, x1, y1):
            return Quad(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
                                 np.float32))

        # 1. all-zero map: nothing
        assert extract_boxes(np.zeros((40, 40), np.float32)) == []

        # 2. one 20x10 rectangle: one box, IoU >= 0.9 at unclip 0
        pmap = np.zeros((40, 40), np.float32)
        pmap[5:15, 10:30] = 1.0
        boxes = extract_boxes(pmap, unclip_ratio=0.0)
        assert len(boxes) == 1
        assert polygon_iou(boxes[0].points, rect(10, 5, 30, 15).points) >= 0.9
        assert boxes[0].score == pytest.approx(1.0)

        # 3. two separated components: two boxes
        pmap2 = np.zeros((40, 40), np.float32)
        pmap2[5:15, 2:12] = 1.0
        pmap2[25:35, 20:36] = 1.0
        assert len(extract_boxes(pmap2, unclip_ratio=0.0)) == 2

        # 4. low-probability region filtered by box_thresh
        weak = np.zeros((40, 40), np.float32)
        weak[5:15, 10:30] = 0.4
        assert extract_boxes(weak) == []

        # 5. tiny component filtered by the 3 px min-side rule
        tiny = np.zeros((40, 40), np.float32)
        tiny[5:7, 10:12] = 1.0
        assert extract_boxes(tiny, unclip_ratio=0.0) == []

        # 6. identical pred/gt: perfect report
        gt = [rect(0, 0, 10, 10), rect(20, 20, 30, 28)]
        rep = eval_detection(list(gt), gt)
        assert (rep.precision, rep.recall, rep.hmean) == (1.0, 1.0, 1.0)

        # 7. one matching pred, two gt: P=1, R=0.5, hmean exactly 2/3
        rep = eval_detection([rect(0, 0, 10, 10)], gt)
        assert rep.precision == 1.0 and rep.recall == 0.5
        assert rep.hmean == pytest.approx(2.0 / 3.0)

        # 8. no predictions: all-zero report
        rep = eval_detection([], gt)
        assert (rep.precision, rep.recall, rep.hmean) == (0.0, 0.0, 0.0)

        # 9. overlap below the IoU threshold never matches
        rep = eval_detection([rect(5, 0, 15, 10)], [rect(0, 0, 10, 10)])
        assert rep.hmean == 0.0  # IoU = 1/3 < 0.5

        # 10. end-to-end: geometry matches, one transcript of two wrong
        pred = [(rect(0, 0, 10, 10), "AB"), (rect(20, 20, 30, 28), "XX")]
        gtt = [(rect(0, 0, 10, 10), "AB"), (rect(20, 20, 30, 28), "CD")]
        rep = eval_end2end(pred, gtt)
        assert rep.precision == 0.5 and rep.recall == 0.5
        assert rep.hmean == pytest.approx(0.5)


# ------------------------------------------------------------ criterion 9


def test_criterion_9_determinism(rec_run, det_run, workdir):
    from deskocr.trainers import train_det, train_rec
    with _report(9, "bit-identical metrics on re-run"):
        cfg = dict(rec_run["cfg"], out_dir=str(workdir / "rec_again"))
        train_rec(cfg)
        again = open(os.path.join(cfg["out_dir"], "metrics.jsonl"), "rb").read()
        assert again == rec_run["metrics"]

        cfg = dict(det_run["cfg"], out_dir=str(workdir / "det_again"))
        train_det(cfg)
        again = open(os.path.join(cfg["out_dir"], "metrics.jsonl"), "rb").read()
        assert again == det_run["metrics"]


# ----------------------------------------------------------- criterion 10


def test_criterion_10_checkpoint_integrity(workdir):
    from deskocr.checkpoint import (CheckpointError, load_checkpoint,
                                    save_checkpoint)
    from deskocr.data import RotNet
    from deskocr.det_models import DetConfig, DetModel, teacher_config
    from deskocr.rec_models import RecConfig, build_recognizer
    with _report(10, "checkpoint integrity"):
        rcfg = RecConfig("0123456789", d=32, heads=2, width_mult=0.5, seed=1)
        families = {
            "det_student": DetModel(DetConfig(width_mult=0.25, neck_ch=8)),
            "det_teacher": DetModel(teacher_config(width_mult=0.5, neck_ch=8)),
            "recognizer": build_recognizer(rcfg),
            "rotnet_trunk": RotNet(rcfg).trunk_arrays(),
        }
        for name, model in families.items():
            path = str(workdir / f"{name}.ockt")
            save_checkpoint(path, model, "fp")
            arrays = (model if isinstance(model, dict)
                      else dict(model.named_arrays()))
            back = load_checkpoint(path).arrays
            assert set(back) == set(arrays), name
            for key, arr in arrays.items():
                assert back[key].tobytes() == np.asarray(arr).tobytes(), (name, key)
            blob = bytearray(open(path, "rb").read())
            blob[len(blob) // 3] ^= 0x01
            open(path, "wb").write(bytes(blob))
            with pytest.raises(CheckpointError):
                load_checkpoint(path)
