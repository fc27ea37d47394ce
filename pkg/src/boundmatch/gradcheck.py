"""Central finite-difference verification of every backward rule.

Each case builds a scalar loss as a fixed random weighting of the op output,
perturbs one input element at a time with +/-h, and compares the analytic
gradient against the difference quotient. The quotient divides by the
*actually applied* float32 step, and the loss accumulates in float64, so the
check stays tight at h=1e-3 even in single precision. Inputs are sampled
away from the kinks of relu/abs/clip/max.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses
from .autodiff import (
    BatchNormState,
    Tensor,
    abs_,
    add,
    avg_pool_3x3_same,
    batch_norm,
    bilinear_resize,
    channel_max,
    clip,
    concat_channels,
    conv2d,
    log,
    mul,
    relu,
    sigmoid,
    slice_batch,
    slice_channels,
    slice_interleave,
    softmax_channels,
    sub,
    sum_,
)

DEFAULT_H = 1e-3
DEFAULT_TOL = 1e-3


@dataclass
class GradCheckResult:
    name: str
    cases: int
    max_rel_err: float
    passed: bool


def weighted_loss(out: Tensor, w: np.ndarray) -> Tensor:
    return sum_(mul(out, Tensor(w)))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every element of x."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi = np.float32(orig + h)
        lo = np.float32(orig - h)
        flat[i] = hi
        f_hi = f()
        flat[i] = lo
        f_lo = f()
        flat[i] = orig
        gflat[i] = (f_hi - f_lo) / (float(hi) - float(lo))
    return g


def check_case(
    inputs: Dict[str, np.ndarray],
    forward: Callable[[Dict[str, Tensor]], Tensor],
    wrt: Sequence[str],
    h: float = DEFAULT_H,
) -> float:
    """Max relative gradient error over the listed inputs."""

    def run(grad: bool) -> Tuple[float, Dict[str, Tensor]]:
        ts = {k: Tensor(v, requires_grad=(grad and k in wrt)) for k, v in inputs.items()}
        out = forward(ts)
        return float(out.data.reshape(-1)[0]), ts

    _, tensors = run(grad=True)
    loss = forward(tensors)
    loss.backward()

    worst = 0.0
    for key in wrt:
        analytic = tensors[key].grad
        assert analytic is not None, f"no gradient reached input {key!r}"

        def f(k=key):
            fresh = {n: Tensor(v) for n, v in inputs.items()}
            return float(forward(fresh).data.reshape(-1)[0])

        numeric = numeric_grad(f, inputs[key], h)
        scale = max(float(np.abs(numeric).max()), 1e-6)
        err = float(np.abs(analytic.astype(np.float64) - numeric).max()) / scale
        worst = max(worst, err)
    return worst


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return (mag * sign).astype(np.float32)


def _probs(rng, shape, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


CaseBuilder = Callable[[np.random.Generator], Tuple[Dict[str, np.ndarray], Callable, List[str]]]


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    groups = int(rng.choice([1, 2]))
    cg = int(rng.integers(1, 3))
    og = int(rng.integers(1, 3))
    n, h, w = 1, 5, 5
    x = rng.standard_normal((n, cg * groups, h, w)).astype(np.float32)
    wt = rng.standard_normal((og * groups, cg, 3, 3)).astype(np.float32) * 0.5
    b = rng.standard_normal(og * groups).astype(np.float32) * 0.1
    ho = (h + 2 * padding - 3) // stride + 1
    wo = (w + 2 * padding - 3) // stride + 1
    lw = rng.standard_normal((n, og * groups, ho, wo)).astype(np.float32)

    def fwd(ts):
        out = conv2d(ts["x"], ts["w"], ts["b"], stride=stride, padding=padding, groups=groups)
        return weighted_loss(out, lw)

    return {"x": x, "w": wt, "b": b}, fwd, ["x", "w", "b"]


def _case_batch_norm(rng):
    n, c, h, w = 2, 3, 4, 4
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
    beta = rng.uniform(-0.5, 0.5, c).astype(np.float32)
    train = bool(rng.integers(0, 2))
    lw = rng.standard_normal((n, c, h, w)).astype(np.float32)
    rm = rng.standard_normal(c).astype(np.float32) * 0.3
    rv = rng.uniform(0.5, 1.5, c).astype(np.float32)

    def fwd(ts):
        state = BatchNormState(c, momentum=0.1)
        state.gamma = ts["gamma"]
        state.beta = ts["beta"]
        state.running_mean = rm.copy()
        state.running_var = rv.copy()
        return weighted_loss(batch_norm(ts["x"], state, train=train), lw)

    return {"x": x, "gamma": gamma, "beta": beta}, fwd, ["x", "gamma", "beta"]


def _case_bilinear(rng):
    n, c = 2, 3
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    lw = rng.standard_normal((n, c, oh, ow)).astype(np.float32)

    def fwd(ts):
        return weighted_loss(bilinear_resize(ts["x"], oh, ow), lw)

    return {"x": x}, fwd, ["x"]


def _case_avg_pool(rng):
    n, c, h, w = 2, 3, 5, 6
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    lw = rng.standard_normal((n, c, h, w)).astype(np.float32)

    def fwd(ts):
        return weighted_loss(avg_pool_3x3_same(ts["x"]), lw)

    return {"x": x}, fwd, ["x"]


def _case_softmax(rng):
    n, c, h, w = 2, 4, 3, 3
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    lw = rng.standard_normal((n, c, h, w)).astype(np.float32)

    def fwd(ts):
        return weighted_loss(softmax_channels(ts["x"]), lw)

    return {"x": x}, fwd, ["x"]


def _case_concat_interleave(rng):
    n, c, h, w = 2, 3, 4, 4
    a = rng.standard_normal((n, c, h, w)).astype(np.float32)
    b = rng.standard_normal((n, c, h, w)).astype(np.float32)
    lw = rng.standard_normal((n, 4 * c, h, w)).astype(np.float32)

    def fwd(ts):
        both = concat_channels([ts["a"], slice_interleave(ts["a"], ts["b"]), ts["b"]])
        return weighted_loss(both, lw)

    return {"a": a, "b": b}, fwd, ["a", "b"]


def _case_slices(rng):
    n, c, h, w = 4, 6, 3, 3
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    lw = rng.standard_normal((2, 3, h, w)).astype(np.float32)

    def fwd(ts):
        return weighted_loss(slice_channels(slice_batch(ts["x"], 1, 3), 2, 5), lw)

    return {"x": x}, fwd, ["x"]


def _case_elementwise(rng):
    shape = (3, 4)
    x = _away_from_zero(rng, shape)
    y = _away_from_zero(rng, shape)
    p = _probs(rng, shape, 0.1, 0.9)
    lw = rng.standard_normal(shape).astype(np.float32)

    def fwd(ts):
        mix = add(mul(relu(ts["x"]), sigmoid(ts["y"])), sub(abs_(ts["x"]), mul(ts["y"], 0.5)))
        mix = add(mix, log(clip(ts["p"], 1e-6, 1 - 1e-6)))
        return weighted_loss(mix, lw)

    return {"x": x, "y": y, "p": p}, fwd, ["x", "y", "p"]


def _case_channel_max(rng):
    n, c, h, w = 2, 4, 3, 3
    # well-separated channel values keep the max off ties
    base = rng.standard_normal((n, 1, h, w)).astype(np.float32)
    offs = rng.permuted(np.arange(c) * 0.5, axis=0).astype(np.float32)
    x = base + offs.reshape(1, c, 1, 1) + 0.05 * rng.standard_normal((n, c, h, w)).astype(np.float32)
    lw = rng.standard_normal((n, 1, h, w)).astype(np.float32)

    def fwd(ts):
        return weighted_loss(channel_max(ts["x"]), lw)

    return {"x": x.astype(np.float32)}, fwd, ["x"]


def _case_seg_supervised(rng):
    n, c, h, w = 1, 3, 2, 2
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    labels = rng.integers(0, c, size=(n, h, w))
    labels[rng.random((n, h, w)) < 0.1] = 255

    def fwd(ts):
        return losses.seg_supervised_loss(ts["x"], labels)[0]

    return {"x": x}, fwd, ["x"]


def _case_seg_consistency(rng):
    n, c, h, w = 1, 3, 2, 2
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    probs = rng.dirichlet(np.ones(c), size=(n, h, w)).transpose(0, 3, 1, 2)

    def fwd(ts):
        return losses.seg_consistency_loss(ts["x"], probs, tau=0.3)

    return {"x": x}, fwd, ["x"]


def _case_bdry_bce(rng):
    n, c, h, w = 1, 2, 3, 3
    q = _probs(rng, (n, c, h, w))
    z = (rng.random((n, c, h, w)) < 0.25).astype(np.float32)

    def fwd(ts):
        return losses.bdry_bce_reweighted(z, ts["q"])

    return {"q": q}, fwd, ["q"]


def _case_bdry_supervised(rng):
    n, c, h, w = 1, 2, 3, 3
    q1 = _probs(rng, (n, c, h, w))
    q2 = _probs(rng, (n, c, h, w))
    z = (rng.random((n, c, h, w)) < 0.3).astype(np.float32)

    def fwd(ts):
        return losses.bdry_supervised_loss([ts["q1"], ts["q2"]], z)

    return {"q1": q1, "q2": q2}, fwd, ["q1", "q2"]


def _case_bdry_consistency(rng):
    n, c, h, w = 1, 2, 3, 3
    q = _probs(rng, (n, c, h, w))
    tq = rng.random((n, c, h, w)).astype(np.float32)

    def fwd(ts):
        return losses.bdry_consistency_loss([ts["q"]], tq, tau_bdry=0.5)

    return {"q": q}, fwd, ["q"]


def _case_duality(rng):
    n, c, h, w = 1, 2, 3, 3
    g = _probs(rng, (n, c, h, w))
    z = (rng.random((n, c, h, w)) < 0.3).astype(np.float32)
    # keep |g - z| away from the kink at zero
    g = np.where(z > 0, np.clip(g, 0.05, 0.9), np.clip(g, 0.1, 0.95))

    def fwd(ts):
        return losses.duality_loss(ts["g"], z)

    return {"g": g.astype(np.float32)}, fwd, ["g"]


CASES: Dict[str, CaseBuilder] = {
    "conv2d": _case_conv2d,
    "batch_norm": _case_batch_norm,
    "bilinear_resize": _case_bilinear,
    "avg_pool_3x3_same": _case_avg_pool,
    "softmax_channels": _case_softmax,
    "concat_interleave": _case_concat_interleave,
    "slices": _case_slices,
    "elementwise": _case_elementwise,
    "channel_max": _case_channel_max,
    "loss_seg_supervised": _case_seg_supervised,
    "loss_seg_consistency": _case_seg_consistency,
    "loss_bdry_bce": _case_bdry_bce,
    "loss_bdry_supervised": _case_bdry_supervised,
    "loss_bdry_consistency": _case_bdry_consistency,
    "loss_duality": _case_duality,
}


def run_gradcheck(
    seed: int = 0,
    cases_per_op: int = 10,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    only: Optional[Sequence[str]] = None,
) -> List[GradCheckResult]:
    names = list(CASES) if only is None else list(only)
    results = []
    for name in names:
        builder = CASES[name]
        worst = 0.0
        for case in range(cases_per_op):
            rng = np.random.default_rng((seed, zlib_crc(name), case))
            inputs, fwd, wrt = builder(rng)
            worst = max(worst, check_case(inputs, fwd, wrt, h=h))
        results.append(GradCheckResult(name, cases_per_op, worst, worst <= tol))
    return results


def zlib_crc(name: str) -> int:
    import zlib

    return zlib.crc32(name.encode("utf-8"))
