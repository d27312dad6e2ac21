"""BERT-like transformer encoder with exact analytic gradients.

Pre-layer-norm residual blocks (recorded as ``ln_placement``), absolute
positional embeddings, GELU feed-forward, padding-masked multi-head
attention. Forward passes record the intermediates needed for exact
reverse-mode differentiation; there is no autograd anywhere.

64-bit precision is used for gradient-check builds and 32-bit for training
runs (``dtype`` on ``init_params``).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatch

LN_EPS = 1e-12


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    hidden_dim: int = 128
    ff_dim: int = 256
    max_len: int = 128
    vocab_size: int = 512
    dropout_rate: float = 0.1
    seed: int = 0
    ln_placement: str = "pre"

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ValueError("hidden_dim must be divisible by heads")


# §3.1-scale and laptop-scale presets
PAPER_PRESET = dict(layers=12, heads=12, hidden_dim=768, ff_dim=3072,
                    max_len=128, vocab_size=4096)
DESK_PRESET = dict(layers=2, heads=4, hidden_dim=128, ff_dim=256,
                   max_len=128, vocab_size=512)


def _truncated_normal(rng: np.random.Generator, shape, std: float,
                      dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_params(cfg: EncoderConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Truncated normal (std 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(cfg.seed)
    H, F = cfg.hidden_dim, cfg.ff_dim
    p: dict[str, np.ndarray] = {}

    def w(name, shape):
        p[name] = _truncated_normal(rng, shape, 0.02, dtype)

    def zeros(name, shape):
        p[name] = np.zeros(shape, dtype=dtype)

    def ones(name, shape):
        p[name] = np.ones(shape, dtype=dtype)

    w("tok_emb", (cfg.vocab_size, H))
    w("pos_emb", (cfg.max_len, H))
    for i in range(cfg.layers):
        pre = f"layer{i}."
        ones(pre + "ln1.g", (H,)); zeros(pre + "ln1.b", (H,))
        w(pre + "attn.wq", (H, H)); zeros(pre + "attn.bq", (H,))
        w(pre + "attn.wk", (H, H)); zeros(pre + "attn.bk", (H,))
        w(pre + "attn.wv", (H, H)); zeros(pre + "attn.bv", (H,))
        w(pre + "attn.wo", (H, H)); zeros(pre + "attn.bo", (H,))
        ones(pre + "ln2.g", (H,)); zeros(pre + "ln2.b", (H,))
        w(pre + "ffn.w1", (H, F)); zeros(pre + "ffn.b1", (F,))
        w(pre + "ffn.w2", (F, H)); zeros(pre + "ffn.b2", (H,))
    ones("final_ln.g", (H,)); zeros("final_ln.b", (H,))
    return p


# ---------------------------------------------------------------------------
# primitive forward/backward pairs
# ---------------------------------------------------------------------------

def _layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    H = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0))), x


def _gelu_bwd(dy, x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (cdf + x * pdf)


def _dropout_fwd(x, rate, train, rng):
    if not train or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def _dropout_bwd(dy, keep):
    return dy if keep is None else dy * keep


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# encoder forward / backward
# ---------------------------------------------------------------------------

def forward(params: dict, cfg: EncoderConfig, ids: np.ndarray,
            mask: np.ndarray, train: bool = False,
            dropout_rng: Optional[np.random.Generator] = None):
    """Per-token hidden states of shape (batch, seq, hidden) plus the cache
    consumed by :func:`backward`."""
    if ids.max() >= cfg.vocab_size:
        raise ShapeMismatch("token id out of vocabulary range")
    B, T = ids.shape
    if T > cfg.max_len:
        raise ShapeMismatch(f"sequence length {T} exceeds max_len {cfg.max_len}")
    H, nh = cfg.hidden_dim, cfg.heads
    dh = H // nh
    if train and cfg.dropout_rate > 0 and dropout_rng is None:
        dropout_rng = np.random.default_rng(cfg.seed)
    rate = cfg.dropout_rate

    x = params["tok_emb"][ids] + params["pos_emb"][:T]
    x, emb_keep = _dropout_fwd(x, rate, train, dropout_rng)
    bias = (1.0 - mask[:, None, None, :]).astype(x.dtype) * -1e9

    layer_caches = []
    for i in range(cfg.layers):
        pre = f"layer{i}."
        a, ln1_cache = _layer_norm_fwd(x, params[pre + "ln1.g"],
                                       params[pre + "ln1.b"])
        q = a @ params[pre + "attn.wq"] + params[pre + "attn.bq"]
        k = a @ params[pre + "attn.wk"] + params[pre + "attn.bk"]
        v = a @ params[pre + "attn.wv"] + params[pre + "attn.bv"]
        qh = q.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh) + bias
        probs = _softmax(scores)
        probs_d, attn_keep = _dropout_fwd(probs, rate, train, dropout_rng)
        ctx = (probs_d @ vh).transpose(0, 2, 1, 3).reshape(B, T, H)
        o = ctx @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        o, o_keep = _dropout_fwd(o, rate, train, dropout_rng)
        x_attn = x + o

        a2, ln2_cache = _layer_norm_fwd(x_attn, params[pre + "ln2.g"],
                                        params[pre + "ln2.b"])
        h1 = a2 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        g1, gelu_x = _gelu_fwd(h1)
        f = g1 @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        f, f_keep = _dropout_fwd(f, rate, train, dropout_rng)
        x_out = x_attn + f

        layer_caches.append(dict(
            ln1=ln1_cache, a=a, qh=qh, kh=kh, vh=vh, probs=probs,
            probs_d=probs_d, attn_keep=attn_keep, ctx=ctx, o_keep=o_keep,
            ln2=ln2_cache, a2=a2, gelu_x=gelu_x, g1=g1, f_keep=f_keep,
        ))
        x = x_out

    h, final_cache = _layer_norm_fwd(x, params["final_ln.g"],
                                     params["final_ln.b"])
    cache = dict(ids=ids, mask=mask, emb_keep=emb_keep, layers=layer_caches,
                 final=final_cache, B=B, T=T)
    return h, cache


def backward(params: dict, cfg: EncoderConfig, cache: dict,
             d_hidden: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients for every encoder parameter given d(loss)/d(hidden)."""
    B, T = cache["B"], cache["T"]
    H, nh = cfg.hidden_dim, cfg.heads
    dh = H // nh
    grads: dict[str, np.ndarray] = {}

    dx, dg, db = _layer_norm_bwd(d_hidden, cache["final"])
    grads["final_ln.g"] = dg
    grads["final_ln.b"] = db

    for i in reversed(range(cfg.layers)):
        pre = f"layer{i}."
        c = cache["layers"][i]

        # FFN block
        df = _dropout_bwd(dx, c["f_keep"])
        grads[pre + "ffn.w2"] = c["g1"].reshape(-1, c["g1"].shape[-1]).T \
            @ df.reshape(-1, H)
        grads[pre + "ffn.b2"] = df.sum(axis=(0, 1))
        dg1 = df @ params[pre + "ffn.w2"].T
        dh1 = _gelu_bwd(dg1, c["gelu_x"])
        grads[pre + "ffn.w1"] = c["a2"].reshape(-1, H).T \
            @ dh1.reshape(-1, dh1.shape[-1])
        grads[pre + "ffn.b1"] = dh1.sum(axis=(0, 1))
        da2 = dh1 @ params[pre + "ffn.w1"].T
        dxa, dg, db = _layer_norm_bwd(da2, c["ln2"])
        grads[pre + "ln2.g"] = dg
        grads[pre + "ln2.b"] = db
        dx_attn = dx + dxa  # residual

        # attention block
        do = _dropout_bwd(dx_attn, c["o_keep"])
        grads[pre + "attn.wo"] = c["ctx"].reshape(-1, H).T @ do.reshape(-1, H)
        grads[pre + "attn.bo"] = do.sum(axis=(0, 1))
        dctx = (do @ params[pre + "attn.wo"].T) \
            .reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        dprobs_d = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["probs_d"].transpose(0, 1, 3, 2) @ dctx
        dprobs = _dropout_bwd(dprobs_d, c["attn_keep"])
        p = c["probs"]
        dscores = p * (dprobs - (dprobs * p).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(dh)
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, H)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, H)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, H)
        a_flat = c["a"].reshape(-1, H)
        grads[pre + "attn.wq"] = a_flat.T @ dq.reshape(-1, H)
        grads[pre + "attn.bq"] = dq.sum(axis=(0, 1))
        grads[pre + "attn.wk"] = a_flat.T @ dk.reshape(-1, H)
        grads[pre + "attn.bk"] = dk.sum(axis=(0, 1))
        grads[pre + "attn.wv"] = a_flat.T @ dv.reshape(-1, H)
        grads[pre + "attn.bv"] = dv.sum(axis=(0, 1))
        da = dq @ params[pre + "attn.wq"].T \
            + dk @ params[pre + "attn.wk"].T \
            + dv @ params[pre + "attn.wv"].T
        dxl, dg, db = _layer_norm_bwd(da, c["ln1"])
        grads[pre + "ln1.g"] = dg
        grads[pre + "ln1.b"] = db
        dx = dx_attn + dxl  # residual

    dx = _dropout_bwd(dx, cache["emb_keep"])
    d_tok = np.zeros_like(params["tok_emb"])
    np.add.at(d_tok, cache["ids"], dx)
    grads["tok_emb"] = d_tok
    d_pos = np.zeros_like(params["pos_emb"])
    d_pos[:T] = dx.sum(axis=0)
    grads["pos_emb"] = d_pos
    return grads


def pool(hidden: np.ndarray, mask: np.ndarray, strategy: str = "cls") -> np.ndarray:
    """Molecule embedding: position-0 vector (cls) or mask-weighted mean."""
    if strategy == "cls":
        return hidden[:, 0, :]
    if strategy == "mean":
        w = mask.astype(hidden.dtype)
        return (hidden * w[:, :, None]).sum(axis=1) / w.sum(axis=1)[:, None]
    raise ValueError(f"unknown pooling strategy {strategy!r}")


def pool_backward(d_pooled: np.ndarray, hidden_shape, mask: np.ndarray,
                  strategy: str) -> np.ndarray:
    d_hidden = np.zeros(hidden_shape, dtype=d_pooled.dtype)
    if strategy == "cls":
        d_hidden[:, 0, :] = d_pooled
    elif strategy == "mean":
        w = mask.astype(d_pooled.dtype)
        d_hidden[:] = d_pooled[:, None, :] * w[:, :, None] \
            / w.sum(axis=1)[:, None, None]
    else:
        raise ValueError(f"unknown pooling strategy {strategy!r}")
    return d_hidden


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(step: int, total_steps: int, peak: float,
          warmup_frac: float = 0.1) -> float:
    """Linear warmup to ``peak`` over the first 10% of steps, then linear
    decay to 0 at ``total_steps``."""
    warmup = warmup_frac * total_steps
    if total_steps <= 0:
        return 0.0
    if step <= warmup:
        return peak * step / warmup if warmup > 0 else peak
    return peak * max(0.0, (total_steps - step) / (total_steps - warmup))


def adam_step(params: dict, grads: dict, state: OptimizerState,
              lr: Optional[float] = None) -> None:
    """In-place bias-corrected Adam update over the keys present in grads."""
    state.step += 1
    t = state.step
    if lr is None:
        lr = state.lr
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name], dtype=np.float64)
            state.v[name] = np.zeros_like(params[name], dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        params[name] -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(
            params[name].dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict, cfg: EncoderConfig,
                    vocab_tokens: list[str], step: int = 0,
                    scaler: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Manifest JSON plus raw little-endian float32 blobs per parameter."""
    os.makedirs(path, exist_ok=True)
    blob_dir = os.path.join(path, "blobs")
    os.makedirs(blob_dir, exist_ok=True)
    vocab_path = os.path.join(path, "vocab.txt")
    with open(vocab_path, "w", encoding="utf-8") as f:
        for t in vocab_tokens:
            f.write(t + "\n")
    vocab_hash = hashlib.sha256(
        open(vocab_path, "rb").read()).hexdigest()
    manifest = {
        "config": asdict(cfg),
        "vocab_hash": vocab_hash,
        "scaler": scaler,
        "step": step,
        "extra": extra or {},
        "params": {},
    }
    for name, arr in sorted(params.items()):
        blob = arr.astype("<f4").tobytes()
        fname = name.replace("/", "_") + ".bin"
        with open(os.path.join(blob_dir, fname), "wb") as f:
            f.write(blob)
        manifest["params"][name] = {"shape": list(arr.shape), "file": fname}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(path, dtype=np.float32):
    """Returns (params, config, vocab_tokens, manifest)."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    cfg = EncoderConfig(**manifest["config"])
    params = {}
    for name, meta in manifest["params"].items():
        raw = open(os.path.join(path, "blobs", meta["file"]), "rb").read()
        arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"])
        params[name] = arr.astype(dtype)
    with open(os.path.join(path, "vocab.txt"), encoding="utf-8") as f:
        vocab_tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    return params, cfg, vocab_tokens, manifest
