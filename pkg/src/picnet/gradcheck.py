"""Central finite-difference checks for every differentiable op and the model.

Each check builds a scalar ``L = sum(op(inputs) * C)`` with a fixed random
``C`` and compares the reverse-mode gradient against central differences.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor

POINTWISE_TOL = 1e-6
CONV_TOL = 1e-4
E2E_TOL = 1e-3
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = STEP, coords=None) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. ``t.data`` (optionally at selected flat indices)."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    with T.no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn().item()
            flat[i] = orig - h
            lo = fn().item()
            flat[i] = orig
            out[n] = (hi - lo) / (2 * h)
    return out if coords is not None else out.reshape(t.shape)


def check_fn(name: str, seed: int, fn: Callable[[], Tensor], inputs: list[Tensor], tol: float,
             rng: np.random.Generator | None = None, max_coords: int | None = None) -> CheckResult:
    for t in inputs:
        t.grad = None
    loss = fn()
    T.backward(loss)
    analytic, numeric = [], []
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_coords is not None and t.size > max_coords:
            coords = sorted(rng.choice(t.size, size=max_coords, replace=False).tolist())
            analytic.append(g.reshape(-1)[coords])
            numeric.append(numerical_grad(fn, t, coords=coords))
        else:
            analytic.append(g.reshape(-1))
            numeric.append(numerical_grad(fn, t).reshape(-1))
        t.grad = None
    return CheckResult(name, seed, relative_error(np.concatenate(analytic), np.concatenate(numeric)), tol)


def _probe(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Wrap an op into a scalar by contracting with a fixed random tensor."""
    shape = out_fn().shape
    c = Tensor(rng.normal(size=shape))
    return lambda: T.sum(T.mul(out_fn(), c))


def _leaf(rng, shape, away_from_zero: bool = False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)
    return Tensor(x, requires_grad=True)


def primitive_cases(rng: np.random.Generator):
    """Yield (name, scalar fn, inputs, tol) on randomised shapes."""
    r = lambda lo, hi: int(rng.integers(lo, hi + 1))  # noqa: E731
    m, n, k = r(1, 4), r(1, 5), r(1, 4)

    a, b = _leaf(rng, (m, n)), _leaf(rng, (m, n))
    yield "add", _probe(lambda: T.add(a, b), rng), [a, b], POINTWISE_TOL
    a, b = _leaf(rng, (m, n)), _leaf(rng, (m, n))
    yield "sub", _probe(lambda: T.sub(a, b), rng), [a, b], POINTWISE_TOL
    a, b = _leaf(rng, (m, n)), _leaf(rng, (m, n))
    yield "mul", _probe(lambda: T.mul(a, b), rng), [a, b], POINTWISE_TOL
    a = _leaf(rng, (m, n))
    yield "square", _probe(lambda: T.square(a), rng), [a], POINTWISE_TOL
    a, b = _leaf(rng, (m, k)), _leaf(rng, (k, n))
    yield "matmul", _probe(lambda: T.matmul(a, b), rng), [a, b], POINTWISE_TOL
    bs = r(1, 3)
    a, b = _leaf(rng, (bs, m, k)), _leaf(rng, (bs, k, n))
    yield "bmm", _probe(lambda: T.bmm(a, b), rng), [a, b], POINTWISE_TOL
    x, w, bias = _leaf(rng, (m, k)), _leaf(rng, (k, n)), _leaf(rng, (n,))
    yield "linear", _probe(lambda: T.linear(x, w, bias), rng), [x, w, bias], POINTWISE_TOL
    x = _leaf(rng, (m, n), away_from_zero=True)
    yield "relu", _probe(lambda: T.relu(x), rng), [x], POINTWISE_TOL
    x = _leaf(rng, (r(1, 6),))
    yield "sigmoid", _probe(lambda: T.sigmoid(x), rng), [x], POINTWISE_TOL
    x = _leaf(rng, (m + 1, n + 1))
    yield "softmax_rows", _probe(lambda: T.softmax_rows(x), rng), [x], POINTWISE_TOL
    x, y = _leaf(rng, (m, k)), _leaf(rng, (m, n))
    yield "concat", _probe(lambda: T.concat([x, y], axis=1), rng), [x, y], POINTWISE_TOL
    x = _leaf(rng, (bs, m, r(2, 4), r(2, 4)))
    yield "global_avg_pool", _probe(lambda: T.global_avg_pool(x), rng), [x], POINTWISE_TOL
    g = _leaf(rng, (bs, m))
    yield "expand_spatial", _probe(lambda: T.expand_spatial(g, 3, 2), rng), [g], POINTWISE_TOL
    x = _leaf(rng, (m, n, 2))
    yield "reshape_transpose", _probe(lambda: T.transpose(T.reshape(x, (n, m, 2)), (2, 0, 1)), rng), [x], POINTWISE_TOL
    x = Tensor(rng.normal(size=(2, 3, 4)) + 0.2, requires_grad=True)
    yield "frobenius_norm", lambda: T.frobenius_norm(x), [x], POINTWISE_TOL
    x = Tensor(rng.normal(size=(bs, 3, 2)) + 0.2, requires_grad=True)
    yield "sample_norms", _probe(lambda: T.sample_norms(x), rng), [x], POINTWISE_TOL
    logits = _leaf(rng, (3, 5))
    labels = rng.integers(0, 5, size=3).tolist()
    yield "cross_entropy", lambda: T.cross_entropy(logits, labels), [logits], POINTWISE_TOL
    x = _leaf(rng, (bs, r(1, 3), r(2, 6), r(2, 6)))
    yield "avg_pool2d", _probe(lambda: T.avg_pool2d(x, 2, 2), rng), [x], POINTWISE_TOL
    h0, w0 = r(1, 4), r(1, 4)
    x = _leaf(rng, (bs, r(1, 2), h0, w0))
    oh, ow = h0 + r(0, 4), w0 + r(0, 4)
    yield "bilinear_upsample", _probe(lambda: T.bilinear_upsample(x, oh, ow), rng), [x], POINTWISE_TOL

    cin, cout, stride, pad = r(1, 3), r(1, 4), r(1, 2), r(0, 1)
    x, w, bias = _leaf(rng, (bs, cin, r(3, 6), r(3, 6))), _leaf(rng, (cout, cin, 3, 3)), _leaf(rng, (cout,))
    yield "conv2d", _probe(lambda: T.conv2d(x, w, bias, stride=stride, pad=pad), rng), [x, w, bias], CONV_TOL
    c = r(1, 4)
    x, w = _leaf(rng, (bs, c, r(3, 6), r(3, 6))), _leaf(rng, (c, 1, 3, 3))
    yield "depthwise_conv2d", _probe(lambda: T.depthwise_conv2d(x, w, stride=stride, pad=1), rng), [x, w], CONV_TOL
    x = _leaf(rng, (bs, cin, r(3, 4), r(3, 4), r(3, 4)))
    w, bias = _leaf(rng, (cout, cin, 2, 3, 2)), _leaf(rng, (cout,))
    yield "conv3d", _probe(lambda: T.conv3d(x, w, bias, stride=stride, pad=pad), rng), [x, w, bias], CONV_TOL


def tiny_config(**overrides) -> M.ModelConfig:
    base = dict(n_classes=3, n_pca=6, patch=4, n_fim=1, c_aux=1, c_h=4, c_x=4, d_model=8,
                stem_depth=2, se_reduction=4, lambda1=0.1, lambda2=0.1)
    base.update(overrides)
    return M.ModelConfig(**base)


def tiny_batch(cfg: M.ModelConfig, rng: np.random.Generator, bsz: int = 2):
    k = cfg.patch
    x_h = Tensor(rng.random((bsz, 1, cfg.n_pca, k, k)))
    x_x = Tensor(rng.random((bsz, cfg.c_aux, k, k)))
    labels = rng.integers(0, cfg.n_classes, size=bsz).tolist()
    return x_h, x_x, labels


def _perturbed_model(cfg: M.ModelConfig, seed: int) -> M.PicnetModel:
    """Model moved to a generic point for finite differences.

    Prototypes leave their all-ones start so rows differ, and zero biases get
    noise: with a zero bias a unit whose inputs are all dead sits exactly on the
    relu kink, where central differences see half the slope.
    """
    model = M.PicnetModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 7919)
    for name, p in model.params.items():
        if name in ("proto.h", "proto.x") or not p.data.any():
            p.data += 0.1 * rng.normal(size=p.shape)
    return model


def model_cases(rng: np.random.Generator, seed: int):
    """Composite checks: SE gate, one FIM block, the head, and the whole model."""
    cfg = tiny_config()
    model = _perturbed_model(cfg, seed)
    p = model.params

    f = _leaf(rng, (2, cfg.c_h, 2, 2))
    block = M._sub(p, "fim0.h")
    yield "refine_low", _probe(lambda: M.refine_low(f, block), rng), [f] + [block[k] for k in ("se.w1", "se.b1", "se.w2", "se.b2")], CONV_TOL

    fh, fx = _leaf(rng, (2, cfg.c_h, 4, 4)), _leaf(rng, (2, cfg.c_x, 4, 4))
    fim = M._sub(p, "fim0")
    yield "fim_forward", _probe(lambda: T.concat(list(M.fim_forward(fh, fx, fim)), axis=1), rng), [fh, fx] + list(fim.values()), E2E_TOL

    ih, ix = _leaf(rng, (2, cfg.tokens, cfg.d_model)), _leaf(rng, (2, cfg.tokens, cfg.d_model))
    head = M._sub(p, "head")
    yield "refine_head", _probe(lambda: M.refine_head(ih, ix, head, cfg.patch), rng), [ih, ix] + list(head.values()), CONV_TOL

    x_h, x_x, labels = tiny_batch(cfg, rng)

    def loss():
        return model.losses(model.forward(x_h, x_x), labels).total

    yield "end_to_end", loss, list(p.values()), E2E_TOL


def run_suite(seeds=range(20), full_model_seed: int = 0) -> list[CheckResult]:
    """All primitive checks for every seed plus model-level checks.

    The model-level checks compare every parameter coordinate for
    ``full_model_seed`` and a random sample of coordinates for other seeds.
    """
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, inputs, tol in primitive_cases(rng):
            results.append(check_fn(name, seed, fn, inputs, tol))
        sample = None if seed == full_model_seed else 3
        for name, fn, inputs, tol in model_cases(rng, seed):
            results.append(check_fn(name, seed, fn, inputs, tol, rng=rng, max_coords=sample))
    return results


def summarize(results: list[CheckResult]) -> list[tuple[str, float, float, bool]]:
    """Worst relative error per check name, in first-seen order."""
    worst: dict[str, CheckResult] = {}
    for r in results:
        if r.name not in worst or r.rel_err > worst[r.name].rel_err:
            worst[r.name] = r
    return [(n, r.rel_err, r.tol, all(x.passed for x in results if x.name == n)) for n, r in worst.items()]


def ablation_configs(cfg: M.ModelConfig) -> dict[str, M.ModelConfig]:
    return {
        "full": cfg,
        "no_picm": dataclasses.replace(cfg, use_picm=False),
        "no_fim": dataclasses.replace(cfg, use_fim=False),
    }
