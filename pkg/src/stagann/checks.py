"""Finite-difference gradient suite over the primitives and the assembled model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import gin_layer, masked_gnn_layer, row_normalize, topk_sparsify
from .nn import MLP
from .spectral import dft_matrices


@dataclass
class GradResult:
    name: str
    seed: int
    error: float


def _leaf(rng, shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 2.0, size=shape)
    return Tensor(data, requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    w = rng.normal(size=(3, 2))
    cases["matmul"] = (lambda: ad.tsum(ad.mul(ad.matmul(a, b), w)), [a, b])
    ab, bb = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    wb = rng.normal(size=(2, 3, 5))
    cases["matmul_batched"] = (lambda: ad.tsum(ad.mul(ad.matmul(ab, bb), wb)), [ab, bb])

    x, y = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    pos = _leaf(rng, (3, 4), low=0.5)
    wx = rng.normal(size=(3, 4))
    unary = {
        "tanh": ad.tanh, "relu": ad.relu, "abs": ad.tabs, "negate": ad.negate, "exp": ad.exp,
        "cos": ad.cos, "sin": ad.sin, "scale": lambda t: ad.scale(t, -1.7),
    }
    for name, f in unary.items():
        cases[name] = (lambda f=f: ad.tsum(ad.mul(f(x), wx)), [x])
    cases["log"] = (lambda: ad.tsum(ad.mul(ad.log(pos), wx)), [pos])
    cases["sqrt"] = (lambda: ad.tsum(ad.mul(ad.sqrt(pos), wx)), [pos])
    for name, f in {"add": ad.add, "sub": ad.sub, "mul": ad.mul}.items():
        cases[name] = (lambda f=f: ad.tsum(ad.mul(f(x, y), wx)), [x, y])
    cases["div"] = (lambda: ad.tsum(ad.mul(ad.div(x, pos), wx)), [x, pos])
    row = _leaf(rng, (1, 4))
    cases["broadcast_add"] = (lambda: ad.tsum(ad.mul(ad.add(x, row), wx)), [x, row])

    s = _leaf(rng, (2, 3))
    ws = rng.normal(size=(2, 3))
    cases["softmax_rows"] = (lambda: ad.tsum(ad.mul(ad.softmax_rows(s), ws)), [s])
    cases["log_softmax"] = (lambda: ad.tsum(ad.mul(ad.log_softmax(s), ws)), [s])
    # reversal is not a true derivative; two reversals with factors 2 and 0.5 cancel
    cases["gradient_reversal"] = (
        lambda: ad.tsum(ad.mul(ad.gradient_reversal(ad.gradient_reversal(x, 2.0), 0.5), wx)), [x])

    t3 = _leaf(rng, (2, 3, 4))
    w_t, w_r, w_m = rng.normal(size=(4, 3, 2)), rng.normal(size=(6, 4)), rng.normal(size=(2, 4))
    w_c, w_s = rng.normal(size=(6, 4)), rng.normal(size=(3, 4, 2))
    idx = np.array([[0, 2], [2, 1]])
    w_k, w_g = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 3))
    cases["transpose"] = (lambda: ad.tsum(ad.mul(ad.transpose(t3, (2, 1, 0)), w_t)), [t3])
    cases["reshape"] = (lambda: ad.tsum(ad.mul(ad.reshape(t3, (6, 4)), w_r)), [t3])
    cases["sum_mean"] = (lambda: ad.add(ad.tsum(ad.mul(ad.mean(t3, axis=1), w_m)), ad.tsum(ad.tanh(t3))), [t3])
    cases["concat"] = (lambda: ad.tsum(ad.mul(ad.concat([x, y], axis=0), w_c)), [x, y])
    cases["stack"] = (lambda: ad.tsum(ad.mul(ad.stack([x, y], axis=-1), w_s)), [x, y])
    cases["take"] = (lambda: ad.tsum(ad.mul(ad.take(x, idx), w_k)), [x])
    cases["getitem"] = (lambda: ad.tsum(ad.mul(ad.getitem(x, (slice(0, 2), slice(1, 4))), w_g)), [x])

    # graph layers with an identity-free MLP
    n, d = 4, 5
    xs = _leaf(rng, (n, d))
    adj = row_normalize(np.abs(rng.normal(size=(n, n))))
    mlp = MLP(d, 6, 3, rng)
    eps = Tensor(np.array(0.3), requires_grad=True)
    wg = rng.normal(size=(n, 3))
    params = list(mlp.named_parameters().values())
    cases["masked_gnn"] = (lambda: ad.tsum(ad.mul(masked_gnn_layer(xs, adj, mlp), wg)), [xs] + params)
    cases["gin"] = (lambda: ad.tsum(ad.mul(gin_layer(xs, adj, eps, mlp), wg)), [xs, eps] + params)
    sc = _leaf(rng, (5, 5))
    w55 = rng.normal(size=(5, 5))
    cases["topk_sparsify"] = (lambda: ad.tsum(ad.mul(topk_sparsify(sc, 2), w55)), [sc])

    # spectral transform as matrices (the path the model differentiates through)
    cos, sin = dft_matrices(24)
    sig = _leaf(rng, (3, 24))
    wr = rng.normal(size=(3, cos.shape[1]))
    cases["dft"] = (lambda: ad.tsum(ad.mul(ad.add(ad.matmul(sig, cos), ad.matmul(sig, sin)), wr)), [sig])
    return cases


def model_case(seed: int, n: int = 4):
    """Scalar ``Loss_main + Loss_D`` of a small batch, with its leaves.

    The reversal layer is left out: it deliberately breaks agreement with
    finite differences and is verified on its own.
    """
    from .model import KrigeBatch, ModelConfig, build_model
    from .training import MaskPlan, loss_discriminator, loss_main

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(hidden=16)
    model = build_model(cfg, seed, True)
    model.eval()
    w = np.abs(rng.normal(size=(n, n)))
    coords = np.c_[34.0 + 0.1 * rng.random(n), -118.4 + 0.1 * rng.random(n)]
    known = np.ones(n, dtype=bool)
    masked = np.zeros(n, dtype=bool)
    masked[0] = True
    x = rng.normal(size=(1, n, cfg.length))
    batch = KrigeBatch(x, row_normalize(w), np.array(["2024-01-01T08:00"], dtype="datetime64[m]"),
                       known, np.zeros(n, dtype=bool), coords, x.copy())
    batch = batch.with_mask(masked)
    plan = MaskPlan(known, masked)

    def fn():
        xhat, label_d = model.forward(batch, with_discriminator=True, grl_lambda=None)
        return ad.add(loss_main(xhat, batch.target, plan), loss_discriminator(label_d, plan, 0.0, None))

    leaves = list(model.named_parameters().values())
    return model, fn, leaves


def gradient_suite(seeds=range(10), include_model: bool = True, model_checks: int = 2) -> list[GradResult]:
    """Relative error of every case for every seed."""
    out = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, leaves) in primitive_cases(rng).items():
            out.append(GradResult(name, seed, ad.check_gradients(fn, leaves)))
        if include_model:
            model, fn, leaves = model_case(seed)
            with model.frozen_discrete() as cache:
                fn()
                cache.replay = True
                err = ad.check_gradients(fn, leaves, max_checks_per_input=model_checks,
                                         rng=np.random.default_rng(seed))
            out.append(GradResult("model_forward", seed, err))
    return out
