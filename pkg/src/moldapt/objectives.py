"""Self-supervised objectives and the training loops that drive them.

Three losses share the encoder: masked-token cross-entropy, multi-task
regression of standardized descriptors from the first-token state, and a
contrastive triple loss over canonical/enumerated/negative SMILES. Each
returns (scalar loss, exact parameter gradients), so all three pass the
same finite-difference gate as the encoder itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import encoder as enc
from .errors import EmptyDomainCorpus, NoMaskedTokens, ShapeMismatch, ZeroVector
from .features import apply_scaler, descriptor_matrix, fit_scaler, DESCRIPTOR_NAMES
from .molgraph import canonical_smiles, enumerate_smiles, parse_smiles
from .tokenizer import MASK, TokenizedBatch, Vocabulary, encode_batch

N_SPECIALS = 5


# ---------------------------------------------------------------------------
# batch construction
# ---------------------------------------------------------------------------

@dataclass
class MaskedBatch:
    ids: np.ndarray          # post-masking
    original: np.ndarray     # pre-masking ids
    attention_mask: np.ndarray
    positions: np.ndarray    # bool matrix, True at masked positions


def apply_masking(batch: TokenizedBatch, vocab_size: int, seed: int,
                  mask_fraction: float = 0.15,
                  corruption=(0.8, 0.1)) -> MaskedBatch:
    """BERT-style corruption of round(fraction * n) non-special positions per
    row (min 1): 80% -> [MASK], 10% -> random token, 10% unchanged."""
    rng = np.random.default_rng(seed)
    ids = batch.ids.copy()
    positions = np.zeros(ids.shape, dtype=bool)
    p_mask, p_random = corruption
    for r in range(ids.shape[0]):
        n_content = int(batch.lengths[r]) - 2  # exclude CLS and SEP
        if n_content <= 0:
            continue
        n_sel = max(1, int(mask_fraction * n_content + 0.5))
        chosen = rng.choice(n_content, size=n_sel, replace=False) + 1
        positions[r, chosen] = True
        for c in chosen:
            u = rng.random()
            if u < p_mask:
                ids[r, c] = MASK
            elif u < p_mask + p_random:
                ids[r, c] = rng.integers(N_SPECIALS, vocab_size)
    return MaskedBatch(ids=ids, original=batch.ids, positions=positions,
                       attention_mask=batch.attention_mask)


@dataclass
class MtrBatch:
    ids: np.ndarray
    attention_mask: np.ndarray
    targets: np.ndarray      # (N, D), standardized


@dataclass
class TripleBatch:
    canonical: TokenizedBatch
    enumerated: TokenizedBatch
    negative: TokenizedBatch


def build_triples(canonical: list[str], mols, vocab: Vocabulary,
                  max_len: int, seed: int, indices=None) -> TripleBatch:
    """Canonical/enumerated/negative rows for the molecules at ``indices``.

    Enumerations are seeded per (seed, molecule); negatives are drawn
    uniformly from the corpus excluding the anchor molecule."""
    rng = np.random.default_rng(seed)
    if indices is None:
        indices = list(range(len(canonical)))
    enum = [enumerate_smiles(mols[i], seed * 100003 + i) for i in indices]
    neg = []
    for i in indices:
        j = i
        while j == i:
            j = int(rng.integers(len(canonical)))
        neg.append(canonical[j])
    return TripleBatch(
        canonical=encode_batch([canonical[i] for i in indices], vocab, max_len),
        enumerated=encode_batch(enum, vocab, max_len),
        negative=encode_batch(neg, vocab, max_len),
    )


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def init_mlm_head(cfg: enc.EncoderConfig, rng, dtype=np.float32) -> dict:
    return {
        "mlm_head.w": enc._truncated_normal(
            rng, (cfg.hidden_dim, cfg.vocab_size), 0.02, dtype),
        "mlm_head.b": np.zeros(cfg.vocab_size, dtype=dtype),
    }


def init_mtr_head(cfg: enc.EncoderConfig, n_targets: int, rng,
                  dtype=np.float32) -> dict:
    H = cfg.hidden_dim
    return {
        "mtr_head.w1": enc._truncated_normal(rng, (H, H), 0.02, dtype),
        "mtr_head.b1": np.zeros(H, dtype=dtype),
        "mtr_head.w2": enc._truncated_normal(rng, (H, n_targets), 0.02, dtype),
        "mtr_head.b2": np.zeros(n_targets, dtype=dtype),
    }


# ---------------------------------------------------------------------------
# losses (each returns loss, grads, diagnostics)
# ---------------------------------------------------------------------------

def mlm_loss(params: dict, cfg: enc.EncoderConfig, batch: MaskedBatch,
             train: bool = False, dropout_rng=None):
    """Mean cross-entropy over masked positions only."""
    if not batch.positions.any():
        raise NoMaskedTokens("batch contains no masked positions")
    hidden, cache = enc.forward(params, cfg, batch.ids, batch.attention_mask,
                                train=train, dropout_rng=dropout_rng)
    rows, cols = np.nonzero(batch.positions)
    hm = hidden[rows, cols]                     # (M, H)
    logits = hm @ params["mlm_head.w"] + params["mlm_head.b"]
    logits -= logits.max(axis=-1, keepdims=True)
    exps = np.exp(logits)
    probs = exps / exps.sum(axis=-1, keepdims=True)
    targets = batch.original[rows, cols]
    M = len(targets)
    loss = -np.log(probs[np.arange(M), targets] + 1e-300).mean()

    dlogits = probs.copy()
    dlogits[np.arange(M), targets] -= 1.0
    dlogits /= M
    grads = {
        "mlm_head.w": hm.T @ dlogits,
        "mlm_head.b": dlogits.sum(axis=0),
    }
    dhm = dlogits @ params["mlm_head.w"].T
    d_hidden = np.zeros_like(hidden)
    d_hidden[rows, cols] = dhm
    grads.update(enc.backward(params, cfg, cache, d_hidden))
    accuracy = float((probs.argmax(axis=-1) == targets).mean())
    return float(loss), grads, {"accuracy": accuracy, "n_masked": M}


def mtr_loss(params: dict, cfg: enc.EncoderConfig, batch: MtrBatch,
             train: bool = False, dropout_rng=None,
             head_dropout: float = 0.1):
    """2-layer ReLU MLP on the first-token state; mean squared error over
    all N x D entries."""
    D = batch.targets.shape[1]
    if params["mtr_head.w2"].shape[1] != D:
        raise ShapeMismatch(
            f"head predicts {params['mtr_head.w2'].shape[1]} targets, "
            f"batch has {D}")
    hidden, cache = enc.forward(params, cfg, batch.ids, batch.attention_mask,
                                train=train, dropout_rng=dropout_rng)
    h0 = hidden[:, 0, :]
    z1 = h0 @ params["mtr_head.w1"] + params["mtr_head.b1"]
    r1 = np.maximum(z1, 0.0)
    if train and head_dropout > 0:
        if dropout_rng is None:
            dropout_rng = np.random.default_rng(cfg.seed)
        keep = (dropout_rng.random(r1.shape) >= head_dropout) \
            .astype(r1.dtype) / (1.0 - head_dropout)
    else:
        keep = None
    rd = r1 if keep is None else r1 * keep
    pred = rd @ params["mtr_head.w2"] + params["mtr_head.b2"]
    err = pred - batch.targets
    N = pred.shape[0]
    loss = float((err * err).mean())

    dpred = 2.0 * err / (N * D)
    grads = {
        "mtr_head.w2": rd.T @ dpred,
        "mtr_head.b2": dpred.sum(axis=0),
    }
    drd = dpred @ params["mtr_head.w2"].T
    dr1 = drd if keep is None else drd * keep
    dz1 = dr1 * (z1 > 0)
    grads["mtr_head.w1"] = h0.T @ dz1
    grads["mtr_head.b1"] = dz1.sum(axis=0)
    dh0 = dz1 @ params["mtr_head.w1"].T
    d_hidden = np.zeros_like(hidden)
    d_hidden[:, 0, :] = dh0
    grads.update(enc.backward(params, cfg, cache, d_hidden))
    return loss, grads, {"n": N}


def _normalize_rows(r: np.ndarray):
    norms = np.linalg.norm(r, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroVector("zero-norm embedding in contrastive batch")
    return r / norms[:, None], norms


def cl_loss(params: dict, cfg: enc.EncoderConfig, triples: TripleBatch,
            train: bool = False, dropout_rng=None, paper_literal: bool = False):
    """Multiple-negatives ranking loss over cosine similarities.

    Default form (minimized): mean_i of
    log(exp(sim(c_i,e_i)) + sum_j exp(sim(c_i,n_j))) - sim(c_i,e_i).
    ``paper_literal`` additionally reports the un-negated printed variant
    mean_i [sim(c_i,e_i) - log sum_j exp(sim(c_i,n_j))] as a diagnostic.
    """
    parts = {}
    for key, tb in (("c", triples.canonical), ("e", triples.enumerated),
                    ("n", triples.negative)):
        hidden, cache = enc.forward(params, cfg, tb.ids, tb.attention_mask,
                                    train=train, dropout_rng=dropout_rng)
        pooled = enc.pool(hidden, tb.attention_mask, "mean")
        unit, norms = _normalize_rows(pooled)
        parts[key] = dict(hidden=hidden, cache=cache, tb=tb, pooled=pooled,
                          unit=unit, norms=norms)

    uc, ue, un = parts["c"]["unit"], parts["e"]["unit"], parts["n"]["unit"]
    K = uc.shape[0]
    s_ce = (uc * ue).sum(axis=1)            # (K,)
    s_cn = uc @ un.T                        # (K, K)
    denom = np.exp(s_ce) + np.exp(s_cn).sum(axis=1)
    loss = float((np.log(denom) - s_ce).mean())
    literal = float((s_ce - np.log(np.exp(s_cn).sum(axis=1))).mean())

    ds_ce = (np.exp(s_ce) / denom - 1.0) / K              # (K,)
    ds_cn = np.exp(s_cn) / denom[:, None] / K             # (K, K)

    d_uc = ds_ce[:, None] * ue + ds_cn @ un
    d_ue = ds_ce[:, None] * uc
    d_un = ds_cn.T @ uc

    grads: dict[str, np.ndarray] = {}
    for key, du in (("c", d_uc), ("e", d_ue), ("n", d_un)):
        p = parts[key]
        u, norms = p["unit"], p["norms"]
        dr = (du - u * (du * u).sum(axis=1)[:, None]) / norms[:, None]
        d_hidden = enc.pool_backward(dr, p["hidden"].shape,
                                     p["tb"].attention_mask, "mean")
        g = enc.backward(params, cfg, p["cache"], d_hidden)
        for name, arr in g.items():
            if name in grads:
                grads[name] += arr
            else:
                grads[name] = arr

    diag = {"sim_pos": s_ce, "sim_neg": s_cn}
    if paper_literal:
        diag["paper_literal"] = literal
    return loss, grads, diag


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    cfg: enc.EncoderConfig
    scaler: Optional[dict]
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def _log_line(f, **kw):
    if f is not None:
        f.write(json.dumps(kw) + "\n")


def _train(params: dict, cfg: enc.EncoderConfig, step_fn, n_rows: int,
           epochs: int, batch_size: int, lr: float, seed: int,
           log_file=None) -> tuple[list[float], int]:
    """Seeded epoch/batch loop with Adam and the warmup/decay schedule.

    ``step_fn(indices, step)`` returns (loss, grads)."""
    steps_per_epoch = math.ceil(n_rows / batch_size)
    total_steps = epochs * steps_per_epoch
    state = enc.OptimizerState(lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n_rows)
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            loss, grads = step_fn(idx, step)
            step += 1
            lr_now = enc.lr_at(step, total_steps, lr)
            enc.adam_step(params, grads, state, lr=lr_now)
            losses.append(loss)
            _log_line(log_file, step=step, epoch=epoch, lr=lr_now, loss=loss)
    return losses, step


def pretrain(smiles: list[str], vocab: Vocabulary, cfg: enc.EncoderConfig,
             objective: str = "mlm", *, epochs: int = 20, batch_size: int = 16,
             lr: float = 3e-5, seed: int = 0, dtype=np.float32,
             params: Optional[dict] = None, log_file=None,
             max_len: Optional[int] = None) -> TrainResult:
    """Pre-train from scratch (or continue from ``params``) on an unlabeled
    SMILES corpus with the MLM or MTR objective."""
    if objective not in ("mlm", "mtr"):
        raise ValueError(f"pretrain objective must be mlm or mtr, got {objective}")
    if not smiles:
        raise EmptyDomainCorpus("empty corpus")
    max_len = max_len or cfg.max_len
    batch_all = encode_batch(smiles, vocab, max_len)
    head_rng = np.random.default_rng(seed + 1)
    scaler_dict = None
    targets = None

    if params is None:
        params = enc.init_params(cfg, dtype=dtype)
    if objective == "mlm":
        if "mlm_head.w" not in params:
            params.update(init_mlm_head(cfg, head_rng, dtype=dtype))
    else:
        mols = [parse_smiles(s) for s in smiles]
        desc = descriptor_matrix(mols)
        scaler = fit_scaler(desc, DESCRIPTOR_NAMES)
        targets = apply_scaler(desc, scaler).astype(dtype)
        scaler_dict = scaler.to_dict()
        params.update(init_mtr_head(cfg, targets.shape[1], head_rng,
                                    dtype=dtype))

    def step_fn(idx, step):
        drng = np.random.default_rng((seed, step, 7))
        if objective == "mlm":
            sub = TokenizedBatch(ids=batch_all.ids[idx],
                                 attention_mask=batch_all.attention_mask[idx],
                                 lengths=batch_all.lengths[idx])
            masked = apply_masking(sub, cfg.vocab_size,
                                   seed=(seed * 1000003 + step) & 0x7FFFFFFF)
            loss, grads, _ = mlm_loss(params, cfg, masked, train=True,
                                      dropout_rng=drng)
        else:
            mb = MtrBatch(ids=batch_all.ids[idx],
                          attention_mask=batch_all.attention_mask[idx],
                          targets=targets[idx])
            loss, grads, _ = mtr_loss(params, cfg, mb, train=True,
                                      dropout_rng=drng)
        return loss, grads

    losses, steps = _train(params, cfg, step_fn, len(smiles), epochs,
                           batch_size, lr, seed, log_file)
    return TrainResult(params=params, cfg=cfg, scaler=scaler_dict,
                       losses=losses, steps=steps)


def domain_adapt(params: dict, cfg: enc.EncoderConfig, vocab: Vocabulary,
                 domain_smiles: list[str], objective: str = "mtr", *,
                 epochs: int = 20, batch_size: int = 16, lr: float = 3e-5,
                 seed: int = 0, dtype=np.float32, log_file=None,
                 max_len: Optional[int] = None) -> TrainResult:
    """Further train a pre-trained encoder on unlabeled domain SMILES.

    MTR refits the descriptor scaler on the domain corpus and initializes a
    fresh head; CL builds canonical/enumerated/negative triples per epoch
    with seeded enumeration. The LR schedule restarts over the DA steps.
    """
    if not domain_smiles:
        raise EmptyDomainCorpus("domain corpus is empty")
    if objective not in ("mlm", "mtr", "cl"):
        raise ValueError(f"unknown DA objective {objective}")
    max_len = max_len or cfg.max_len
    # copy arrays, not just the dict: Adam updates in place and the caller's
    # checkpoint must stay untouched
    params = {k: np.array(v) for k, v in params.items()}
    head_rng = np.random.default_rng(seed + 2)
    scaler_dict = None

    if objective in ("mlm", "mtr"):
        if objective == "mtr":
            mols = [parse_smiles(s) for s in domain_smiles]
            desc = descriptor_matrix(mols)
            scaler = fit_scaler(desc, DESCRIPTOR_NAMES)
            targets = apply_scaler(desc, scaler).astype(dtype)
            scaler_dict = scaler.to_dict()
            params.update(init_mtr_head(cfg, targets.shape[1], head_rng,
                                        dtype=dtype))
            batch_all = encode_batch(domain_smiles, vocab, max_len)

            def step_fn(idx, step):
                drng = np.random.default_rng((seed, step, 11))
                mb = MtrBatch(ids=batch_all.ids[idx],
                              attention_mask=batch_all.attention_mask[idx],
                              targets=targets[idx])
                loss, grads, _ = mtr_loss(params, cfg, mb, train=True,
                                          dropout_rng=drng)
                return loss, grads
        else:
            if "mlm_head.w" not in params:
                params.update(init_mlm_head(cfg, head_rng, dtype=dtype))
            batch_all = encode_batch(domain_smiles, vocab, max_len)

            def step_fn(idx, step):
                drng = np.random.default_rng((seed, step, 11))
                sub = TokenizedBatch(ids=batch_all.ids[idx],
                                     attention_mask=batch_all.attention_mask[idx],
                                     lengths=batch_all.lengths[idx])
                masked = apply_masking(sub, cfg.vocab_size,
                                       seed=(seed * 999983 + step) & 0x7FFFFFFF)
                loss, grads, _ = mlm_loss(params, cfg, masked, train=True,
                                          dropout_rng=drng)
                return loss, grads
    else:
        mols = [parse_smiles(s) for s in domain_smiles]
        canon = [canonical_smiles(m) for m in mols]
        if len(mols) < 2:
            raise EmptyDomainCorpus("contrastive DA needs at least 2 molecules")

        def step_fn(idx, step):
            drng = np.random.default_rng((seed, step, 11))
            triples = build_triples(canon, mols, vocab, max_len,
                                    seed=(seed * 31337 + step) & 0x7FFFFFFF,
                                    indices=list(idx))
            loss, grads, _ = cl_loss(params, cfg, triples, train=True,
                                     dropout_rng=drng)
            return loss, grads

    losses, steps = _train(params, cfg, step_fn, len(domain_smiles), epochs,
                           batch_size, lr, seed, log_file)
    return TrainResult(params=params, cfg=cfg, scaler=scaler_dict,
                       losses=losses, steps=steps)
