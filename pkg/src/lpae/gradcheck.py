"""Finite-difference checks of every differentiable op and of a tiny two-level LPAE."""

from __future__ import annotations

import numpy as np

from . import model as M
from . import tensor as T
from .pyramid import pyramids

TOLERANCE = 1e-3


def _t(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=1e-2):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)
    return T.Tensor(x, requires_grad=True)

def op_cases(seed: int = 0) -> list:
    """``(name, f, inputs)`` triples, all in float64."""
    rng = np.random.default_rng(seed)
    cases = []

    for k, s in ((3, 1), (3, 2), (5, 2)):
        x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, k, k), _t(rng, 4)
        probe = np.random.default_rng(seed + k + s)
        r = probe.normal(size=(2, 4, -(-6 // s), -(-6 // s)))
        cases.append((f"conv2d k{k} s{s}",
                      lambda t, s=s, r=r: T.sum_all(T.mul(T.conv2d(t[0], t[1], t[2], s), r)),
                      [x, w, b]))

    for k, s in ((3, 1), (3, 2), (5, 2)):
        x, w, b = _t(rng, 2, 3, 4, 4), _t(rng, 3, 4, k, k), _t(rng, 4)
        r = rng.normal(size=(2, 4, 4 * s, 4 * s))
        cases.append((f"deconv2d k{k} s{s}",
                      lambda t, s=s, r=r: T.sum_all(T.mul(T.deconv2d(t[0], t[1], t[2], s), r)),
                      [x, w, b]))

    r = rng.normal(size=(2, 3, 4, 4))
    cases.append(("relu", lambda t, r=r: T.sum_all(T.mul(T.relu(t[0]), r)),
                  [_away_from_zero(rng, 2, 3, 4, 4)]))

    bn = T.BNState.create(3, dtype=np.float64)
    bn.gamma = _t(rng, 3)
    bn.beta = _t(rng, 3)
    r = rng.normal(size=(4, 3, 5, 5))
    cases.append(("batch_norm train",
                  lambda t, bn=bn, r=r: T.sum_all(T.mul(T.batch_norm(t[0], bn, True), r)),
                  [_t(rng, 4, 3, 5, 5, scale=2.0), bn.gamma, bn.beta]))

    bn_eval = T.BNState.create(3, dtype=np.float64)
    bn_eval.gamma, bn_eval.beta = _t(rng, 3), _t(rng, 3)
    bn_eval.running_mean = rng.normal(size=3)
    bn_eval.running_var = rng.uniform(0.5, 2.0, size=3)
    cases.append(("batch_norm eval",
                  lambda t, bn=bn_eval, r=r: T.sum_all(T.mul(T.batch_norm(t[0], bn, False), r)),
                  [_t(rng, 4, 3, 5, 5), bn_eval.gamma, bn_eval.beta]))

    r = rng.normal(size=(2, 2, 6, 6))
    cases.append(("upsample_nn", lambda t, r=r: T.sum_all(T.mul(T.upsample_nn(t[0], 2), r)),
                  [_t(rng, 2, 2, 3, 3)]))

    r = rng.normal(size=(2, 5, 3, 3))
    cases.append(("concat_channels",
                  lambda t, r=r: T.sum_all(T.mul(T.concat_channels(t[0], t[1]), r)),
                  [_t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3)]))

    # distinct values keep every cell's argmax away from ties
    x = T.Tensor(rng.permutation(2 * 2 * 8 * 8).reshape(2, 2, 8, 8) * 0.1, requires_grad=True)
    r = rng.normal(size=(2, 2 * 16))
    cases.append(("grid_max_pool", lambda t, r=r: T.sum_all(T.mul(T.grid_max_pool(t[0], 16), r)),
                  [x]))

    target = rng.normal(size=(2, 3, 4, 4))
    cases.append(("mse_loss", lambda t, target=target: T.mse_loss(t[0], target),
                  [_t(rng, 2, 3, 4, 4)]))

    labels = rng.integers(0, 4, size=5)
    cases.append(("softmax_cross_entropy",
                  lambda t, labels=labels: T.softmax_cross_entropy(t[0], labels),
                  [_t(rng, 5, 4)]))

    r = rng.normal(size=(5, 3))
    cases.append(("linear", lambda t, r=r: T.sum_all(T.mul(T.linear(t[0], t[1], t[2]), r)),
                  [_t(rng, 5, 4), _t(rng, 4, 3), _t(rng, 3)]))

    # the second operand broadcasts, exercising gradient reduction
    r = rng.normal(size=(3, 4))
    for name, op in (("add", T.add), ("sub", T.sub), ("mul", T.mul)):
        cases.append((name, lambda t, op=op, r=r: T.sum_all(T.mul(op(t[0], t[1]), r)),
                      [_t(rng, 3, 4), _t(rng, 4)]))
    cases.append(("neg", lambda t, r=r: T.sum_all(T.mul(-t[0], r)), [_t(rng, 3, 4)]))
    cases.append(("sum_all", lambda t: T.sum_all(t[0]), [_t(rng, 3, 4)]))

    bn2 = T.BNState.create(4, dtype=np.float64)
    target = rng.normal(size=(3, 4, 5, 5))
    cases.append(("conv->bn->relu->mse",
                  lambda t, bn=bn2, target=target: T.mse_loss(
                      T.relu(T.batch_norm(T.conv2d(t[0], t[1], t[2], 1), bn, True)), target),
                  [_t(rng, 3, 2, 5, 5), _t(rng, 4, 2, 3, 3), _t(rng, 4)]))
    return cases

def model_case(seed: int = 0, batch: int = 3):
    """Total LPAE loss of the shipped ``tiny2`` network on 8x8 float64 inputs."""
    rng = np.random.default_rng(seed)
    net = M.build_lpae(M.load_arch("tiny2"), image_size=8, seed=seed, init_std=0.5,
                       dtype=np.float64)
    for name, p in net.named_parameters().items():
        if not name.endswith(".w"):
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    images = rng.normal(size=(batch, 3, 8, 8))
    lap, gauss = pyramids(images, 2)
    params = list(net.named_parameters().values())

    def f(_):
        return M.forward_lpae(net, lap, gauss, training=True).loss

    return "tiny LPAE (all parameters)", f, params

def run(scope: str = "all", seed: int = 0) -> list:
    """``[(name, max_rel_err), ...]`` for the requested scope (``op``, ``model`` or ``all``)."""
    cases = []
    if scope in ("op", "all"):
        cases.extend(op_cases(seed))
    if scope in ("model", "all"):
        cases.append(model_case(seed))
    return [(name, T.grad_check(f, inputs)) for name, f, inputs in cases]
