"""Shared test helpers: central finite-difference gradient checking.

The finite-difference side runs the same float32 forward ops but accumulates
the quotient in float64, independent of the autodiff path it checks.
"""

import numpy as np
import pytest

from deskocr import tensor as T


def _run_forward(build, arrays):
    T.reset_tape()
    with T.no_grad():
        tensors = [T.Tensor(a) for a in arrays]
        out = build(*tensors)
    return float(np.float64(out.data.reshape(-1)[0]))


def gradcheck(build, arrays, h=1e-3, max_probes=48, seed=0):
    """Compare autodiff grads of a scalar-valued `build(*tensors)` to central
    finite differences at up to `max_probes` random positions per input.

    Returns (worst, median) relative error over all probed positions.
    """
    arrays = [np.asarray(a, np.float32) for a in arrays]
    T.reset_tape()
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    T.backward(loss)
    grads = [t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    rels = []
    for ai, a in enumerate(arrays):
        flat_n = a.size
        probes = np.arange(flat_n) if flat_n <= max_probes else rng.choice(flat_n, max_probes, replace=False)
        work = [arr.copy() for arr in arrays]
        for pos in probes:
            idx = np.unravel_index(pos, a.shape)
            orig = work[ai][idx]
            work[ai][idx] = orig + h
            fp = _run_forward(build, work)
            work[ai][idx] = orig - h
            fm = _run_forward(build, work)
            work[ai][idx] = orig
            fd = (fp - fm) / (2.0 * h)
            ad = float(grads[ai][idx])
            # relative above unit scale, absolute below (float32 forward noise
            # makes a pure ratio meaningless for near-zero gradients)
            rels.append(abs(ad - fd) / max(abs(ad), abs(fd), 1.0))
    rels = np.array(rels)
    return float(rels.max()), float(np.median(rels))


def assert_gradcheck(build, arrays, worst_tol=1e-2, median_tol=1e-3, **kw):
    worst, med = gradcheck(build, arrays, **kw)
    assert worst < worst_tol, f"worst rel err {worst:.2e} >= {worst_tol}"
    assert med < median_tol, f"median rel err {med:.2e} >= {median_tol}"


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
