"""PICNet: frequency-interaction encoder, prototype compensation and head.

Feature layouts used throughout:

* encoder features are ``[B, C, k, k]``; the HSI spectral axis is folded into
  channels by the stem,
* token features are ``[B, T, d]`` with ``T = k*k`` and token index
  ``row * k + col``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 8
    n_pca: int = 30
    patch: int = 14
    n_fim: int = 4
    c_aux: int = 1
    c_h: int = 32
    c_x: int = 32
    d_model: int = 64
    stem_depth: int = 8
    se_reduction: int = 4
    lambda1: float = 0.1
    lambda2: float = 0.1
    use_fim: bool = True
    use_picm: bool = True

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_fim < 1:
            raise ConfigError(f"n_fim must be >= 1, got {self.n_fim}")
        if self.patch < 4 or self.patch % 2:
            raise ConfigError(f"patch size must be even and >= 4, got {self.patch}")
        for name in ("n_pca", "c_aux", "c_h", "c_x", "d_model", "stem_depth", "se_reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("c_h", "c_x", "d_model"):
            if getattr(self, name) % self.se_reduction:
                raise ConfigError(f"{name}={getattr(self, name)} is not divisible by se_reduction={self.se_reduction}")
        if self.c_h != self.c_x:
            raise ShapeError(f"frequency fusion adds HSI and aux features: c_h ({self.c_h}) must equal c_x ({self.c_x})")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("consistency weights must be non-negative")

    @property
    def tokens(self) -> int:
        return self.patch * self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Prototypes:
    p_h: Tensor
    p_x: Tensor


class ForwardResult(NamedTuple):
    logits: Tensor
    f_h: Tensor
    f_x: Tensor
    f_hat_h: Tensor | None
    f_hat_x: Tensor | None
    attn_x: Tensor | None
    attn_h: Tensor | None


class LossTerms(NamedTuple):
    total: Tensor
    ce: Tensor
    cyc_x: Tensor
    cyc_h: Tensor


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# ---------------------------------------------------------------------------
# frequency interaction
# ---------------------------------------------------------------------------


def freq_separate(f: Tensor) -> tuple[Tensor, Tensor]:
    """Split ``f`` into a half-resolution low band and a full-resolution residual."""
    if f.ndim != 4:
        raise ShapeError(f"freq_separate expects [B,C,H,W], got {f.shape}")
    h, w = f.shape[2:]
    if h < 2 or w < 2:
        raise ShapeError(f"freq_separate needs H, W >= 2, got {h}x{w}")
    f_l = T.avg_pool2d(f, kernel=2, stride=2)
    f_h = T.sub(f, T.bilinear_upsample(f_l, h, w))
    return f_l, f_h


def enhance_high(f_h: Tensor, params: dict[str, Tensor]) -> Tensor:
    return T.add(f_h, T.depthwise_conv2d(f_h, params["dw"], pad=1))


def refine_low(f_l: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Squeeze-excitation gate over channels."""
    squeezed = T.global_avg_pool(f_l)
    hidden = T.relu(T.linear(squeezed, params["se.w1"], params["se.b1"]))
    gate = T.sigmoid(T.linear(hidden, params["se.w2"], params["se.b2"]))
    return T.mul(f_l, T.expand_spatial(gate, f_l.shape[2], f_l.shape[3]))


def fim_forward(f_h_mod: Tensor, f_x_mod: Tensor, block_params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One frequency interaction block; returns updated (HSI, aux) features."""
    if f_h_mod.shape != f_x_mod.shape:
        raise ShapeError(f"fim_forward: HSI features {f_h_mod.shape} and aux features {f_x_mod.shape} differ")
    bsz, c, h, w = f_h_mod.shape
    hp, xp = _sub(block_params, "h"), _sub(block_params, "x")

    hl, hh = freq_separate(f_h_mod)
    xl, xh = freq_separate(f_x_mod)
    hh, xh = enhance_high(hh, hp), enhance_high(xh, xp)
    hl, xl = refine_low(hl, hp), refine_low(xl, xp)

    h_low = T.add(hl, xl)
    x_high = T.add(hh, xh)

    # HSI recombination: the two concatenated branches become the input
    # channels of a 3-D kernel that slides over (channel, row, col)
    stacked = T.concat([T.bilinear_upsample(h_low, h, w), hh], axis=1)
    vol = T.reshape(stacked, (bsz, 2, c, h, w))
    out_h = T.conv3d(vol, hp["mix.w"], hp["mix.b"], pad=1)
    out_h = T.reshape(out_h, (bsz, c, h, w))

    stacked = T.concat([T.bilinear_upsample(xl, h, w), x_high], axis=1)
    out_x = T.conv2d(stacked, xp["mix.w"], xp["mix.b"], pad=1)
    return out_h, out_x


def plain_block_forward(f_h_mod: Tensor, f_x_mod: Tensor, block_params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Ablation stand-in for a FIM: one 3x3 conv per modality, no interaction.

    Linear like the FIM recombination, so the two differ only in the
    frequency split and cross-modal exchange.
    """
    out_h = T.conv2d(f_h_mod, block_params["h.w"], block_params["h.b"], pad=1)
    out_x = T.conv2d(f_x_mod, block_params["x.w"], block_params["x.b"], pad=1)
    return out_h, out_x


def _to_tokens(f: Tensor) -> Tensor:
    bsz, d, h, w = f.shape
    return T.transpose(T.reshape(f, (bsz, d, h * w)), (0, 2, 1))


def encoder_forward(i_h: Tensor, i_x: Tensor, model: "PicnetModel") -> tuple[Tensor, Tensor]:
    cfg, p = model.config, model.params
    k = cfg.patch
    if i_h.ndim != 5 or i_h.shape[1:] != (1, cfg.n_pca, k, k):
        raise ShapeError(f"HSI input must be [B,1,{cfg.n_pca},{k},{k}], got {i_h.shape}")
    if i_x.ndim != 4 or i_x.shape[1:] != (cfg.c_aux, k, k):
        raise ShapeError(f"aux input must be [B,{cfg.c_aux},{k},{k}], got {i_x.shape}")
    if i_h.shape[0] != i_x.shape[0]:
        raise ShapeError(f"batch sizes differ: {i_h.shape[0]} vs {i_x.shape[0]}")
    bsz = i_h.shape[0]

    fh = T.relu(T.conv3d(i_h, p["stem_h.w"], p["stem_h.b"], pad=1))
    fh = T.reshape(fh, (bsz, cfg.stem_depth * cfg.n_pca, k, k))
    fh = T.relu(T.conv2d(fh, p["stem_h.fold.w"], p["stem_h.fold.b"]))
    fx = T.relu(T.conv2d(i_x, p["stem_x.w"], p["stem_x.b"], pad=1))

    for i in range(cfg.n_fim):
        if cfg.use_fim:
            fh, fx = fim_forward(fh, fx, _sub(p, f"fim{i}"))
        else:
            fh, fx = plain_block_forward(fh, fx, _sub(p, f"plain{i}"))

    fh = T.conv2d(fh, p["proj_h.w"], p["proj_h.b"], pad=1)
    fx = T.conv2d(fx, p["proj_x.w"], p["proj_x.b"], pad=1)
    return _to_tokens(fh), _to_tokens(fx)


# ---------------------------------------------------------------------------
# prototype compensation
# ---------------------------------------------------------------------------


def cross_attend(proto: Tensor, feats: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Prototype-queried attention over one modality's tokens.

    Returns the compensated features [B,T,d] and the attention weights
    [B,T_query,T_key].
    """
    bsz, n_tok, d = feats.shape
    if proto.shape[0] != n_tok:
        raise ShapeError(f"prototype count {proto.shape[0]} does not match token count {n_tok}")
    if proto.shape[1] != d:
        raise ShapeError(f"prototype width {proto.shape[1]} does not match feature width {d}")
    flat = T.reshape(feats, (bsz * n_tok, d))
    q = T.matmul(proto, params["wq"])
    k = T.matmul(flat, params["wk"])
    v = T.reshape(T.matmul(flat, params["wv"]), (bsz, n_tok, d))
    # rows of k @ q^T are (sample, key); bring queries to the middle axis
    scores = T.reshape(T.matmul(k, T.transpose(q, (1, 0))), (bsz, n_tok, proto.shape[0]))
    scores = T.scale(T.transpose(scores, (0, 2, 1)), 1.0 / math.sqrt(d))
    attn = T.softmax_rows(T.reshape(scores, (bsz * proto.shape[0], n_tok)))
    attn = T.reshape(attn, (bsz, proto.shape[0], n_tok))
    return T.bmm(attn, v), attn


def picm_forward(f_h: Tensor, f_x: Tensor, prototypes: Prototypes, attn_params: dict[str, Tensor]):
    """Returns (i_h, i_x, f_hat_x, f_hat_h, attn_x, attn_h).

    ``f_hat_x`` is HSI content queried by the aux prototypes, ``f_hat_h`` the
    reverse; each is added to the opposite modality's tokens.
    """
    if f_h.shape != f_x.shape:
        raise ShapeError(f"picm_forward: token shapes differ {f_h.shape} vs {f_x.shape}")
    f_hat_x, attn_x = cross_attend(prototypes.p_x, f_h, _sub(attn_params, "x"))
    f_hat_h, attn_h = cross_attend(prototypes.p_h, f_x, _sub(attn_params, "h"))
    i_h = T.add(f_h, f_hat_x)
    i_x = T.add(f_x, f_hat_h)
    return i_h, i_x, f_hat_x, f_hat_h, attn_x, attn_h


def refine_head(i_h: Tensor, i_x: Tensor, head_params: dict[str, Tensor], k: int) -> Tensor:
    bsz, n_tok, d = i_h.shape
    if n_tok != k * k:
        raise ShapeError(f"refine_head: {n_tok} tokens cannot form a {k}x{k} grid")
    fused = T.concat([i_h, i_x], axis=2)
    grid = T.reshape(T.transpose(fused, (0, 2, 1)), (bsz, 2 * d, k, k))
    grid = T.relu(T.depthwise_conv2d(grid, head_params["dw1"], pad=1))
    grid = T.depthwise_conv2d(grid, head_params["dw2"], pad=1)
    return T.linear(T.global_avg_pool(grid), head_params["fc.w"], head_params["fc.b"])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def consistency_loss(f: Tensor, f_hat: Tensor) -> Tensor:
    """Batch mean of per-sample Frobenius distances."""
    if f.shape != f_hat.shape:
        raise ShapeError(f"consistency_loss: {f.shape} vs {f_hat.shape}")
    return T.mean(T.sample_norms(T.sub(f, f_hat)))


def loss_terms(logits, labels, f_h, f_x, f_hat_h, f_hat_x, lambda1: float, lambda2: float) -> LossTerms:
    ce = T.cross_entropy(logits, labels)
    if f_hat_x is None or f_hat_h is None:
        cyc_x = cyc_h = T.Tensor(0.0)
    else:
        cyc_x = consistency_loss(f_x, f_hat_x)
        cyc_h = consistency_loss(f_h, f_hat_h)
    total = T.add(T.add(ce, T.scale(cyc_x, lambda1)), T.scale(cyc_h, lambda2))
    return LossTerms(total, ce, cyc_x, cyc_h)


def total_loss(logits, labels, f_h, f_x, f_hat_h, f_hat_x, lambda1: float, lambda2: float) -> Tensor:
    return loss_terms(logits, labels, f_h, f_x, f_hat_h, f_hat_x, lambda1, lambda2).total


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, d = cfg.c_h, cfg.d_model
    r = c // cfg.se_reduction
    shapes: dict[str, tuple[int, ...]] = {
        "stem_h.w": (cfg.stem_depth, 1, 3, 3, 3),
        "stem_h.b": (cfg.stem_depth,),
        "stem_h.fold.w": (c, cfg.stem_depth * cfg.n_pca, 1, 1),
        "stem_h.fold.b": (c,),
        "stem_x.w": (c, cfg.c_aux, 3, 3),
        "stem_x.b": (c,),
    }
    for i in range(cfg.n_fim):
        if cfg.use_fim:
            for m in ("h", "x"):
                pre = f"fim{i}.{m}"
                shapes[f"{pre}.dw"] = (c, 1, 3, 3)
                shapes[f"{pre}.se.w1"] = (c, r)
                shapes[f"{pre}.se.b1"] = (r,)
                shapes[f"{pre}.se.w2"] = (r, c)
                shapes[f"{pre}.se.b2"] = (c,)
            shapes[f"fim{i}.h.mix.w"] = (1, 2, 3, 3, 3)
            shapes[f"fim{i}.h.mix.b"] = (1,)
            shapes[f"fim{i}.x.mix.w"] = (c, 2 * c, 3, 3)
            shapes[f"fim{i}.x.mix.b"] = (c,)
        else:
            for m in ("h", "x"):
                shapes[f"plain{i}.{m}.w"] = (c, c, 3, 3)
                shapes[f"plain{i}.{m}.b"] = (c,)
    shapes.update({
        "proj_h.w": (d, c, 3, 3),
        "proj_h.b": (d,),
        "proj_x.w": (d, c, 3, 3),
        "proj_x.b": (d,),
    })
    if cfg.use_picm:
        shapes["proto.h"] = (cfg.tokens, d)
        shapes["proto.x"] = (cfg.tokens, d)
        for m in ("x", "h"):
            for w in ("wq", "wk", "wv"):
                shapes[f"attn.{m}.{w}"] = (d, d)
    shapes.update({
        "head.dw1": (2 * d, 1, 3, 3),
        "head.dw2": (2 * d, 1, 3, 3),
        "head.fc.w": (2 * d, cfg.n_classes),
        "head.fc.b": (cfg.n_classes,),
    })
    return shapes


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.startswith("proto."):
        return np.ones(shape)
    if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
        return np.zeros(shape)
    if name.startswith("attn."):
        return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    if name.endswith(".dw") or name.startswith("head.dw"):
        # near-identity for residual enhancement; centre tap 1 for the head
        w = rng.normal(0.0, 0.1, shape)
        if name.startswith("head.dw"):
            w[:, 0, 1, 1] += 1.0
        return w
    if len(shape) == 2:
        return rng.normal(0.0, math.sqrt(1.0 / shape[0]), shape)
    fan_in = math.prod(shape[1:])
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


class PicnetModel:
    """Parameter container plus forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            name: Tensor(_init_param(name, shape, rng), requires_grad=True, name=name)
            for name, shape in _param_shapes(config).items()
        }

    @property
    def prototypes(self) -> Prototypes | None:
        if not self.config.use_picm:
            return None
        return Prototypes(self.params["proto.h"], self.params["proto.x"])

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x_h: Tensor, x_aux: Tensor) -> ForwardResult:
        cfg = self.config
        f_h, f_x = encoder_forward(x_h, x_aux, self)
        if cfg.use_picm:
            i_h, i_x, f_hat_x, f_hat_h, attn_x, attn_h = picm_forward(f_h, f_x, self.prototypes, _sub(self.params, "attn"))
        else:
            i_h, i_x, f_hat_x, f_hat_h, attn_x, attn_h = f_h, f_x, None, None, None, None
        logits = refine_head(i_h, i_x, _sub(self.params, "head"), cfg.patch)
        return ForwardResult(logits, f_h, f_x, f_hat_h, f_hat_x, attn_x, attn_h)

    def losses(self, out: ForwardResult, labels) -> LossTerms:
        cfg = self.config
        return loss_terms(out.logits, labels, out.f_h, out.f_x, out.f_hat_h, out.f_hat_x, cfg.lambda1, cfg.lambda2)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.params)
        got = set(arrays)
        if expected != got:
            raise ShapeError(f"parameter names differ: missing {sorted(expected - got)}, unexpected {sorted(got - expected)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {arrays[k].shape}")
            p.data = np.array(arrays[k], dtype=np.float64)
            p.grad = None
