"""CTC loss/decode and the distillation losses (DML, GTC, U-DML, CML).

CTC runs a batched forward-backward over the blank-interleaved label in
log space; its gradient w.r.t. the log-probabilities is the usual state
posterior, registered as a custom op on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, TapeError
from .tensor import Tensor

NEG_INF = np.float32(-1e30)


@dataclass
class CtcBatch:
    log_probs: Tensor                 # [B, L, V+1], blank = last index
    labels: list                      # ragged int lists, no blanks
    input_lengths: list | None = None


@dataclass
class DistillWeights:
    w_ctc: float = 1.0
    w_attn: float = 1.0
    w_feat: float = 1.0
    w_logit_kl: float = 1.0
    w_gt: float = 1.0
    w_peer_dml: float = 1.0
    w_teacher: float = 1.0
    temperature: float = 1.0


def _extend_labels(labels, blank, smax):
    """Blank-interleaved state tables padded to a common state count."""
    b = len(labels)
    syms = np.full((b, smax), blank, np.int64)
    skip_ok = np.zeros((b, smax), bool)
    slen = np.zeros(b, np.int64)
    for i, lab in enumerate(labels):
        s = 2 * len(lab) + 1
        slen[i] = s
        syms[i, 1:s:2] = lab
        for j, v in enumerate(lab):
            if j > 0 and lab[j - 1] != v:
                skip_ok[i, 2 * j + 1] = True
    return syms, skip_ok, slen


def ctc_forward_backward(lp: np.ndarray, labels, blank: int):
    """Per-sample negative log-likelihoods and gradient wrt log-probs.

    lp: [B, L, C] log-softmax outputs. Returns (nll [B], grad [B, L, C])
    where grad is d(nll_i)/d(lp_i) (no batch mean applied).
    """
    b, length, c = lp.shape
    for i, lab in enumerate(labels):
        if any(v >= c - 1 or v < 0 for v in lab):
            raise DataError(f"sample {i}: label symbol out of range")
        need = len(lab) + sum(1 for j in range(1, len(lab)) if lab[j] == lab[j - 1])
        if need > length:
            raise DataError(f"sample {i}: label of length {len(lab)} cannot align to {length} steps")
    umax = max((len(l) for l in labels), default=0)
    smax = 2 * umax + 1
    syms, skip_ok, slen = _extend_labels(labels, blank, smax)
    bi = np.arange(b)[:, None]

    def logaddexp(*xs):
        out = xs[0]
        for x in xs[1:]:
            m = np.maximum(out, x)
            out = m + np.log1p(np.exp(-np.abs(out - x)))
        return out

    def shift(a, k):
        out = np.full_like(a, NEG_INF)
        if k == 0:
            return a
        out[:, k:] = a[:, :-k]
        return out

    emit = np.take_along_axis(lp, syms[:, None, :].repeat(length, axis=1), axis=2)  # [B, L, Smax]

    alpha = np.full((b, length, smax), NEG_INF, np.float32)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if smax > 1:
        has1 = slen > 1
        alpha[has1, 0, 1] = emit[has1, 0, 1]
    for t in range(1, length):
        prev = alpha[:, t - 1]
        skip = np.where(skip_ok, shift(prev, 2), NEG_INF)
        alpha[:, t] = logaddexp(prev, shift(prev, 1), skip) + emit[:, t]

    last = alpha[bi[:, 0], length - 1, slen - 1]
    second = np.where(slen > 1, alpha[bi[:, 0], length - 1, np.maximum(slen - 2, 0)], NEG_INF)
    nll = -logaddexp(last, second)

    beta = np.full((b, length, smax), NEG_INF, np.float32)
    rows = np.arange(b)
    beta[rows, length - 1, slen - 1] = 0.0
    ok2 = slen > 1
    beta[rows[ok2], length - 1, slen[ok2] - 2] = 0.0

    def shift_back(a, k):
        out = np.full_like(a, NEG_INF)
        if k == 0:
            return a
        out[:, :-k] = a[:, k:]
        return out

    # skip transition s -> s+2 allowed when skip_ok[s+2]
    skip_allowed = np.zeros((b, smax), bool)
    skip_allowed[:, :-2] = skip_ok[:, 2:]
    for t in range(length - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        skip_term = np.where(skip_allowed, shift_back(nxt, 2), NEG_INF)
        beta[:, t] = logaddexp(nxt, shift_back(nxt, 1), skip_term)

    gamma = alpha + beta + nll[:, None, None]  # log state posterior
    post = np.exp(np.maximum(gamma, -80.0)).astype(np.float32)
    state_mask = np.arange(smax)[None, :] < slen[:, None]
    post *= state_mask[:, None, :]
    grad = np.zeros_like(lp)
    np.add.at(grad, (bi[:, :, None].repeat(length, 1).repeat(smax, 2),
                     np.arange(length)[None, :, None].repeat(b, 0).repeat(smax, 2),
                     syms[:, None, :].repeat(length, 1)), post)
    return nll.astype(np.float32), -grad


def ctc_loss(batch: CtcBatch, blank: int | None = None) -> Tensor:
    """Mean over the batch of -log P(label | log_probs)."""
    lp = batch.log_probs
    b, length, c = lp.shape
    if blank is None:
        blank = c - 1
    nll, grad = ctc_forward_backward(lp.data, batch.labels, blank)
    out = Tensor(np.float32(nll.mean()))

    def bwd(g):
        T._accum(lp, (g * grad / b).astype(np.float32))

    return T._record(out, (lp,), bwd, "ctc_loss")


def ctc_greedy_decode(log_probs) -> list:
    """Best-path decode: argmax per step, collapse repeats, drop blanks.

    Accepts [B,L,C] or [L,C]; blank is the last class. Returns per-sample
    (labels, confidence) where confidence is the geometric mean of the max
    probabilities at the steps surviving collapse (0.0 for empty decodes).
    """
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    blank = arr.shape[-1] - 1
    # normalize so confidences are true probabilities even for raw logits
    mx = arr.max(axis=-1, keepdims=True)
    lsm = arr - mx - np.log(np.exp(arr - mx).sum(axis=-1, keepdims=True))
    ids = lsm.argmax(axis=-1)
    results = []
    for i in range(arr.shape[0]):
        seq, kept_lp = [], []
        prev = -1
        for t, v in enumerate(ids[i]):
            if v != prev and v != blank:
                seq.append(int(v))
                kept_lp.append(lsm[i, t, v])
            prev = v
        conf = float(np.exp(np.mean(kept_lp))) if seq else 0.0
        results.append((seq, conf))
    return results[0] if squeeze else results


def _clamp_prob(p: Tensor, eps: float = 1e-6) -> Tensor:
    return p * (1.0 - 2.0 * eps) + eps


def dml_kl(p_logits: Tensor, q_logits: Tensor, tau: float = 1.0) -> Tensor:
    """Symmetric KL between softmax(p/tau) and softmax(q/tau), mean over positions."""
    from .kernels import log_softmax, softmax
    inv = 1.0 / tau
    lp = log_softmax(p_logits * inv, axis=-1)
    lq = log_softmax(q_logits * inv, axis=-1)
    sp = softmax(p_logits * inv, axis=-1)
    sq = softmax(q_logits * inv, axis=-1)
    n = int(np.prod(p_logits.shape[:-1]))
    kl_pq = T.tsum(sp * (lp - lq))
    kl_qp = T.tsum(sq * (lq - lp))
    return (kl_pq + kl_qp) * (0.5 / n)


def bernoulli_kl(p: Tensor, q: Tensor) -> Tensor:
    """Symmetric per-pixel Bernoulli KL between two probability maps, mean over pixels."""
    pc, qc = _clamp_prob(p), _clamp_prob(q)
    lp, lq = T.log(pc), T.log(qc)
    one_m_p = _clamp_prob(1.0 - p)
    one_m_q = _clamp_prob(1.0 - q)
    lmp, lmq = T.log(one_m_p), T.log(one_m_q)
    kl_pq = pc * (lp - lq) + one_m_p * (lmp - lmq)
    kl_qp = qc * (lq - lp) + one_m_q * (lmq - lmp)
    return T.tmean((kl_pq + kl_qp) * 0.5)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean CE over all positions; targets are integer class ids, same
    leading shape as logits."""
    from .kernels import log_softmax
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, np.float32)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    n = int(np.prod(targets.shape))
    return T.tsum(lsm * Tensor(-onehot)) * (1.0 / n)


def pad_labels(labels, m: int, eos: int) -> np.ndarray:
    out = np.full((len(labels), m), eos, np.int64)
    for i, lab in enumerate(labels):
        if len(lab) > m - 1:
            raise DataError(f"sample {i}: label length {len(lab)} exceeds decoder capacity {m - 1}")
        out[i, : len(lab)] = lab
    return out


def gtc_loss(out, labels, w: DistillWeights | None = None) -> Tensor:
    """CTC loss plus attention-decoder CE on the same labels (training only)."""
    from .kernels import log_softmax
    w = w or DistillWeights()
    loss = ctc_loss(CtcBatch(log_softmax(out.ctc_logits, axis=-1), labels)) * w.w_ctc
    if w.w_attn:
        if out.attn_logits is None:
            raise TapeError("gtc_loss requires train-mode output with attn_logits")
        m = out.attn_logits.shape[1]
        eos = out.attn_logits.shape[2] - 1
        loss = loss + cross_entropy(out.attn_logits, pad_labels(labels, m, eos)) * w.w_attn
    return loss


def udml_loss(a, b, labels, w: DistillWeights | None = None) -> Tensor:
    """Mutual learning for two same-config recognizers: supervised GTC for
    both, feature L2 on backbone taps, symmetric KL on CTC and attention
    logits."""
    w = w or DistillWeights()
    if a.backbone_feat.shape != b.backbone_feat.shape:
        raise TapeError("udml_loss requires students with identical configs")
    loss = gtc_loss(a, labels, w) + gtc_loss(b, labels, w)
    diff = a.backbone_feat - b.backbone_feat
    loss = loss + T.tmean(diff * diff) * w.w_feat
    kl = dml_kl(a.ctc_logits, b.ctc_logits, w.temperature)
    if a.attn_logits is not None and b.attn_logits is not None:
        kl = kl + dml_kl(a.attn_logits, b.attn_logits, w.temperature)
    return loss + kl * w.w_logit_kl


def cml_loss(students, teacher, gt, w: DistillWeights | None = None) -> Tensor:
    """Two students learn from ground truth, from each other (binary DML on
    probability maps), and from a frozen teacher (L2 to its prob map)."""
    from .det_models import db_loss
    w = w or DistillWeights()
    if teacher.prob_map.requires_grad or teacher.prob_map.node_id is not None:
        raise TapeError("cml_loss: teacher output must be produced under no_grad")
    s1, s2 = students
    loss = (db_loss(s1, gt) + db_loss(s2, gt)) * w.w_gt
    loss = loss + bernoulli_kl(s1.prob_map, s2.prob_map) * w.w_peer_dml
    for s in (s1, s2):
        d = s.prob_map - teacher.prob_map
        loss = loss + T.tmean(d * d) * w.w_teacher
    return loss


def dml_train_step(model_a, model_b, imgs, gt, opt_a, opt_b,
                   w: DistillWeights | None = None):
    """One mutual-learning step for a same-structure detector pair.

    Each model takes an Adam step on w_gt * db_loss + w_peer_dml *
    bernoulli_kl(own prob map, peer prob map detached). Peer targets are
    computed first so identical models stay identical.
    """
    from .det_models import db_loss
    w = w or DistillWeights()
    with T.no_grad():
        targets = [Tensor(m(imgs).prob_map.data) for m in (model_a, model_b)]
    losses = []
    for model, opt, peer in ((model_a, opt_a, targets[1]), (model_b, opt_b, targets[0])):
        T.reset_tape()
        model.zero_grad()
        out = model(imgs)
        loss = db_loss(out, gt) * w.w_gt + bernoulli_kl(out.prob_map, peer) * w.w_peer_dml
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses
