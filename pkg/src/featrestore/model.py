"""Gated diffusion transformer for noise prediction in embedding space.

The network eps(x_t, t | condition) tokenizes a flat feature vector into a
short sequence, fuses the timestep embedding into the projected condition,
pools the fused condition into a channel-wise modulation vector through a
learnable query probe, and runs a stack of residual blocks where sigmoid
gates scale the self-attention and FFN branches per channel. An ungated
cross-attention sublayer between them attends to the fused condition.

Besides the full gating path, three ablation variants are available:
``adaln`` (scale/shift modulation instead of gates), ``concat`` (condition
tokens appended to the sequence, no cross-attention), and ``base`` (no
conditioning mechanism beyond cross-attention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GATING_VARIANTS = ("full", "adaln", "concat", "base")

LN_EPS = 1e-6
FFN_MULT = 4

# float64 sigmoid saturates to exactly 0/1 past |x| ~ 37-745; keep gates in the open interval
_GATE_LO = np.nextafter(0.0, 1.0)
_GATE_HI = np.nextafter(1.0, 0.0)


def _gate_sigmoid(z):
    return ad.clip(ad.sigmoid(z), _GATE_LO, _GATE_HI)


@dataclass
class ModelConfig:
    d_feature: int
    d_cond: int
    d_model: int = 64
    depth: int = 2
    n_heads: int = 4
    n_tokens: int = 4
    gate_hidden: int = 64

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_feature % self.n_tokens != 0:
            raise ValueError(f"d_feature={self.d_feature} not divisible by n_tokens={self.n_tokens}")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even (sinusoidal embedding splits in half)")
        for name in ("d_feature", "d_cond", "d_model", "depth", "n_heads", "n_tokens", "gate_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_chunk(self) -> int:
        return self.d_feature // self.n_tokens


def param_shapes(cfg: ModelConfig, gating: str = "full") -> dict:
    """Names and shapes of every parameter; a pure function of the config."""
    if gating not in GATING_VARIANTS:
        raise ValueError(f"unknown gating variant {gating!r}")
    d, dc, dch = cfg.d_model, cfg.d_cond, cfg.d_chunk
    shapes = {
        "in_proj.w": (dch, d), "in_proj.b": (d,),
        "pos_emb": (cfg.n_tokens, d),
        "time_mlp.w1": (d, d), "time_mlp.b1": (d,),
        "time_mlp.w2": (d, d), "time_mlp.b2": (d,),
        "cond_proj.w": (dc, d), "cond_proj.b": (d,),
    }
    if gating in ("full", "adaln"):
        shapes.update({"gate_pool.q": (d,), "gate_pool.wk": (d, d), "gate_pool.wv": (d, d)})
    if gating == "full":
        shapes.update({
            "gate_mlp.w1": (d, cfg.gate_hidden), "gate_mlp.b1": (cfg.gate_hidden,),
            "gate_mlp.w2": (cfg.gate_hidden, d), "gate_mlp.b2": (d,),
        })
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,)})
        for nm in ("attn",):
            shapes.update({
                p + nm + ".wq": (d, d), p + nm + ".bq": (d,),
                p + nm + ".wk": (d, d), p + nm + ".bk": (d,),
                p + nm + ".wv": (d, d), p + nm + ".bv": (d,),
                p + nm + ".wo": (d, d), p + nm + ".bo": (d,),
            })
        if gating != "concat":
            shapes.update({p + "ln_x.g": (d,), p + "ln_x.b": (d,)})
            shapes.update({
                p + "xattn.wq": (d, d), p + "xattn.bq": (d,),
                p + "xattn.wk": (d, d), p + "xattn.bk": (d,),
                p + "xattn.wv": (d, d), p + "xattn.bv": (d,),
                p + "xattn.wo": (d, d), p + "xattn.bo": (d,),
            })
        shapes.update({p + "ln2.g": (d,), p + "ln2.b": (d,)})
        shapes.update({
            p + "ffn.w1": (d, FFN_MULT * d), p + "ffn.b1": (FFN_MULT * d,),
            p + "ffn.w2": (FFN_MULT * d, d), p + "ffn.b2": (d,),
        })
        if gating == "full":
            shapes.update({
                p + "gate_attn.w": (d, d), p + "gate_attn.b": (d,),
                p + "gate_mlp_head.w": (d, d), p + "gate_mlp_head.b": (d,),
            })
        if gating == "adaln":
            shapes.update({p + "ada.w": (d, 4 * d), p + "ada.b": (4 * d,)})
    shapes.update({
        "ln_f.g": (d,), "ln_f.b": (d,),
        "out_proj.w": (d, dch), "out_proj.b": (dch,),
    })
    return shapes


def param_count(cfg: ModelConfig, gating: str = "full") -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg, gating).values())


def _trunc_normal(shape, std, rng):
    """Normal(0, std) redrawing values outside 2 std."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2.0 * std
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2.0 * std
    return x

# zero-init so a fresh model predicts 0 and every gate opens at exactly 0.5
_ZERO_INIT_SUFFIXES = ("out_proj.w", "out_proj.b", "gate_attn.w", "gate_attn.b",
                       "gate_mlp_head.w", "gate_mlp_head.b", "ada.w", "ada.b")


class GatedDiT:
    """Parameter container plus forward pass for one restoration direction."""

    def __init__(self, cfg: ModelConfig, rng=None, gating: str = "full"):
        cfg.validate()
        if gating not in GATING_VARIANTS:
            raise ValueError(f"unknown gating variant {gating!r}")
        self.cfg = cfg
        self.gating = gating
        rng = rng or np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        for name, shape in param_shapes(cfg, gating).items():
            if name.endswith(_ZERO_INIT_SUFFIXES) or name.endswith(".b"):
                data = np.zeros(shape)
            elif name.endswith(".g"):
                data = np.ones(shape)
            else:
                data = _trunc_normal(shape, 0.02, rng)
            self.params[name] = Tensor(data, requires_grad=True)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def predict_noise(self, x_t, t, cond, capture=None) -> Tensor:
        return predict_noise(self, x_t, t, cond, capture=capture)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        expected = set(self.params)
        if set(arrays) != expected:
            missing = expected.symmetric_difference(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)[:4]}")
        for k, v in arrays.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} != {self.params[k].data.shape}")
            self.params[k].data = v


def timestep_embedding(t, d_model: int) -> np.ndarray:
    """Sinusoidal encoding, first half sine, second half cosine.

    freq[i] = 10000 ** (-i / (d_model/2)); returns (B, d_model) for array t.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d_model // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _linear(x, w, b):
    return x @ w + b


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / ad.sqrt(var + LN_EPS)) * g + b


def _attention(model, prefix, x_q, x_kv):
    cfg = model.cfg
    H = cfg.n_heads
    dh = cfg.d_model // H
    B, Nq = x_q.shape[0], x_q.shape[1]
    Nk = x_kv.shape[1]

    def heads(v, n):
        return ad.transpose(ad.reshape(v, (B, n, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(x_q, model.p(prefix + ".wq"), model.p(prefix + ".bq")), Nq)
    k = heads(_linear(x_kv, model.p(prefix + ".wk"), model.p(prefix + ".bk")), Nk)
    v = heads(_linear(x_kv, model.p(prefix + ".wv"), model.p(prefix + ".bv")), Nk)
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Nq, cfg.d_model))
    return _linear(ctx, model.p(prefix + ".wo"), model.p(prefix + ".bo"))


def fuse_condition(model: GatedDiT, cond, t) -> Tensor:
    """Project condition tokens and add the mapped timestep embedding to each."""
    cond = _as_condition(cond, model.cfg.d_cond)
    temb = Tensor(timestep_embedding(t, model.cfg.d_model))
    if temb.shape[0] not in (1, cond.shape[0]):
        raise ValueError(f"batch mismatch between t ({temb.shape[0]}) and condition ({cond.shape[0]})")
    h = ad.silu(_linear(temb, model.p("time_mlp.w1"), model.p("time_mlp.b1")))
    tvec = _linear(h, model.p("time_mlp.w2"), model.p("time_mlp.b2"))
    proj = _linear(cond, model.p("cond_proj.w"), model.p("cond_proj.b"))
    return proj + ad.reshape(tvec, (tvec.shape[0], 1, model.cfg.d_model))


def attention_pool(model: GatedDiT, C) -> Tensor:
    """Probe-query attention pooling of the fused condition sequence."""
    d = model.cfg.d_model
    keys = C @ model.p("gate_pool.wk")
    scores = (keys @ ad.reshape(model.p("gate_pool.q"), (d, 1))) * (1.0 / math.sqrt(d))
    weights = ad.softmax(scores, axis=1)
    values = C @ model.p("gate_pool.wv")
    return (weights * values).sum(axis=1)


def attention_pool_gate(model: GatedDiT, C) -> Tensor:
    """Channel-wise modulation vector: a small MLP over the pooled condition."""
    pooled = attention_pool(model, C)
    h = ad.silu(_linear(pooled, model.p("gate_mlp.w1"), model.p("gate_mlp.b1")))
    return _linear(h, model.p("gate_mlp.w2"), model.p("gate_mlp.b2"))


def gated_block_forward(model: GatedDiT, x, C, G, block_index: int, capture=None) -> Tensor:
    """One residual block; gating/modulation depends on the model's variant."""
    p = f"blocks.{block_index}."
    B = x.shape[0]
    d = model.cfg.d_model
    gating = model.gating

    if gating == "adaln":
        mods = _linear(attention_pool(model, C) if G is None else G,
                       model.p(p + "ada.w"), model.p(p + "ada.b"))
        shift_a = ad.reshape(ad.take(mods, np.arange(0, d), axis=1), (B, 1, d))
        scale_a = ad.reshape(ad.take(mods, np.arange(d, 2 * d), axis=1), (B, 1, d))
        shift_m = ad.reshape(ad.take(mods, np.arange(2 * d, 3 * d), axis=1), (B, 1, d))
        scale_m = ad.reshape(ad.take(mods, np.arange(3 * d, 4 * d), axis=1), (B, 1, d))

    h = _layernorm(x, model.p(p + "ln1.g"), model.p(p + "ln1.b"))
    if gating == "adaln":
        h = h * (1.0 + scale_a) + shift_a
    sa = _attention(model, p + "attn", h, h)
    if gating == "full":
        z_attn = _gate_sigmoid(_linear(G, model.p(p + "gate_attn.w"), model.p(p + "gate_attn.b")))
        if capture is not None:
            capture.setdefault("gates", []).append({"block": block_index, "attn": z_attn.data.copy()})
        sa = ad.reshape(z_attn, (B, 1, d)) * sa
    x = x + sa

    if gating != "concat":
        hx = _layernorm(x, model.p(p + "ln_x.g"), model.p(p + "ln_x.b"))
        x = x + _attention(model, p + "xattn", hx, C)

    h = _layernorm(x, model.p(p + "ln2.g"), model.p(p + "ln2.b"))
    if gating == "adaln":
        h = h * (1.0 + scale_m) + shift_m
    ff = _linear(ad.gelu(_linear(h, model.p(p + "ffn.w1"), model.p(p + "ffn.b1"))),
                 model.p(p + "ffn.w2"), model.p(p + "ffn.b2"))
    if gating == "full":
        z_mlp = _gate_sigmoid(_linear(G, model.p(p + "gate_mlp_head.w"), model.p(p + "gate_mlp_head.b")))
        if capture is not None:
            capture["gates"][-1]["mlp"] = z_mlp.data.copy()
        ff = ad.reshape(z_mlp, (B, 1, d)) * ff
    return x + ff


def predict_noise(model: GatedDiT, x_t, t, cond, capture=None) -> Tensor:
    """Full forward pass: tokenize, condition, run blocks, project back."""
    cfg = model.cfg
    x_t = ad.as_tensor(x_t)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = ad.reshape(x_t, (1, x_t.shape[0]))
    if x_t.shape[-1] != cfg.d_feature:
        raise ValueError(f"feature dimension {x_t.shape[-1]} != d_feature={cfg.d_feature}")
    B = x_t.shape[0]

    tokens = ad.reshape(x_t, (B, cfg.n_tokens, cfg.d_chunk))
    tokens = _linear(tokens, model.p("in_proj.w"), model.p("in_proj.b")) + model.p("pos_emb")

    C = fuse_condition(model, cond, np.broadcast_to(np.atleast_1d(t), (B,)))
    if C.shape[0] != B:
        raise ValueError(f"condition batch {C.shape[0]} != input batch {B}")
    G = None
    if model.gating == "full":
        G = attention_pool_gate(model, C)
    elif model.gating == "adaln":
        G = attention_pool(model, C)
    elif model.gating == "concat":
        tokens = ad.concat([tokens, C], axis=1)

    for i in range(cfg.depth):
        tokens = gated_block_forward(model, tokens, C, G, i, capture=capture)

    if model.gating == "concat":
        tokens = ad.take(tokens, np.arange(cfg.n_tokens), axis=1)
    tokens = _layernorm(tokens, model.p("ln_f.g"), model.p("ln_f.b"))
    out = _linear(tokens, model.p("out_proj.w"), model.p("out_proj.b"))
    out = ad.reshape(out, (B, cfg.d_feature))
    return ad.reshape(out, (cfg.d_feature,)) if squeeze else out


def condition_tokens(feat) -> np.ndarray:
    """Wrap a flat feature (or batch of them) as a 1-token condition sequence."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim == 1:
        return feat.reshape(1, 1, -1)
    if feat.ndim == 2:
        return feat.reshape(feat.shape[0], 1, feat.shape[1])
    raise ValueError(f"expected a flat feature or batch, got ndim={feat.ndim}")


def _as_condition(cond, d_cond: int):
    if not isinstance(cond, Tensor):
        cond = Tensor(np.asarray(cond, dtype=np.float64))
    if cond.ndim == 1:
        cond = ad.reshape(cond, (1, 1, cond.shape[0]))
    elif cond.ndim == 2:
        cond = ad.reshape(cond, (cond.shape[0], 1, cond.shape[1]))
    if cond.ndim != 3 or cond.shape[1] < 1:
        raise ValueError(f"condition must be (B, M>=1, d_cond), got {cond.shape}")
    if cond.shape[-1] != d_cond:
        raise ValueError(f"condition dimension {cond.shape[-1]} != d_cond={d_cond}")
    return cond
