"""Labeled-dataset ingestion, frozen-embedding extraction, metrics, and
repeated cross-validation.

Censoring is declared in dataset config (threshold value + direction), never
auto-detected; censored rows are excluded from every evaluation fold but
retained in the unlabeled corpus exported for domain adaptation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import encoder as enc
from .chemspace import butina_cluster
from .errors import TokenizationFailure, ZeroVariance
from .features import morgan_fingerprint
from .forest import ForestHyperparams, fit_forest
from .molgraph import parse_smiles
from .splits import SplitPlan, butina_split_plan, random_split_plan
from .tokenizer import Vocabulary, encode_batch

METRIC_NAMES = ["MAE", "RMSE", "R2", "Pearson", "Spearman"]


@dataclass
class CensorRule:
    value: float
    direction: str  # "ge": censored when target >= value; "le": <= value

    def flags(self, targets: np.ndarray) -> np.ndarray:
        if self.direction == "ge":
            return targets >= self.value
        if self.direction == "le":
            return targets <= self.value
        raise ValueError(f"censor direction must be ge or le, got {self.direction}")


@dataclass
class DatasetConfig:
    name: str
    transform: str = "none"        # "none" | "log10"
    censor: Optional[CensorRule] = None

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        censor = None
        if d.get("censor"):
            censor = CensorRule(value=float(d["censor"]["value"]),
                                direction=d["censor"]["direction"])
        return cls(name=d["name"], transform=d.get("transform", "none"),
                   censor=censor)


@dataclass
class LabeledDataset:
    name: str
    smiles: list[str]
    target: np.ndarray
    censored: np.ndarray  # bool per row

    def evaluation_view(self) -> "LabeledDataset":
        keep = ~self.censored
        return LabeledDataset(
            name=self.name,
            smiles=[s for s, k in zip(self.smiles, keep) if k],
            target=self.target[keep],
            censored=np.zeros(int(keep.sum()), dtype=bool),
        )

    def da_corpus(self) -> list[str]:
        """All molecules, censored included; labels dropped."""
        return list(self.smiles)


def load_labeled_csv(path, config: DatasetConfig) -> LabeledDataset:
    """Columns: smiles, target, optional id. Transform and censor rule come
    from the dataset config; censoring is evaluated on transformed targets."""
    smiles, raw = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            smiles.append(row["smiles"])
            raw.append(float(row["target"]))
    target = np.asarray(raw, dtype=np.float64)
    if config.transform == "log10":
        target = np.log10(target)
    elif config.transform != "none":
        raise ValueError(f"unknown transform {config.transform}")
    if not np.isfinite(target).all():
        raise ValueError("non-finite targets after transform")
    censored = (config.censor.flags(target) if config.censor
                else np.zeros(len(target), dtype=bool))
    return LabeledDataset(name=config.name, smiles=smiles, target=target,
                          censored=censored)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def embed_dataset(params: dict, cfg: enc.EncoderConfig, vocab: Vocabulary,
                  smiles: list[str], pooling: str = "cls",
                  batch_size: int = 64,
                  max_len: Optional[int] = None) -> np.ndarray:
    """Deterministic eval-mode embeddings, shape (N, hidden_dim)."""
    max_len = max_len or cfg.max_len
    out = []
    for start in range(0, len(smiles), batch_size):
        chunk = smiles[start:start + batch_size]
        try:
            batch = encode_batch(chunk, vocab, max_len)
        except Exception as e:  # propagate with the failing row index
            for k, s in enumerate(chunk):
                try:
                    encode_batch([s], vocab, max_len)
                except Exception as inner:
                    raise TokenizationFailure(start + k, str(inner)) from inner
            raise TokenizationFailure(start, str(e)) from e
        hidden, _ = enc.forward(params, cfg, batch.ids, batch.attention_mask,
                                train=False)
        out.append(enc.pool(hidden, batch.attention_mask, pooling))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _rankdata(x: np.ndarray) -> np.ndarray:
    """Average ranks for ties (1-based)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac, bc = a - a.mean(), b - b.mean()
    denom = math.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0:
        raise ZeroVariance("constant input to correlation")
    return float((ac * bc).sum() / denom)


def compute_metrics(y: np.ndarray, yhat: np.ndarray) -> dict[str, float | None]:
    """MAE, RMSE, R2, Pearson, Spearman. Correlation metrics and R2 are
    reported as None (missing, not zero) when y is constant."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 2:
        raise ValueError("metric inputs must be equal-length vectors, n >= 2")
    err = yhat - y
    out: dict[str, float | None] = {
        "MAE": float(np.abs(err).mean()),
        "RMSE": float(np.sqrt((err * err).mean())),
    }
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0:
        out["R2"] = out["Pearson"] = out["Spearman"] = None
        return out
    out["R2"] = float(1.0 - (err * err).sum() / sst)
    try:
        out["Pearson"] = _pearson(y, yhat)
        out["Spearman"] = _pearson(_rankdata(y), _rankdata(yhat))
    except ZeroVariance:
        out["Pearson"] = out["Spearman"] = None
    return out


# ---------------------------------------------------------------------------
# repeated CV
# ---------------------------------------------------------------------------

@dataclass
class MetricRecord:
    model: str
    dataset: str
    split_policy: str
    repeat: int
    fold: int
    metric: str
    value: Optional[float]

    def to_dict(self) -> dict:
        return dict(model=self.model, dataset=self.dataset,
                    split_policy=self.split_policy, repeat=self.repeat,
                    fold=self.fold, metric=self.metric, value=self.value)


def build_split_plan(dataset: LabeledDataset, policy: str, n_folds: int,
                     n_repeats: int, seed: int,
                     butina_threshold: float = 0.6,
                     fp_radius: int = 2, fp_bits: int = 2048) -> SplitPlan:
    """Split plan over the evaluation view (censored rows already removed)."""
    ds = dataset.evaluation_view()
    n = len(ds.smiles)
    if policy == "random":
        return random_split_plan(n, n_folds, n_repeats, seed)
    if policy == "butina":
        fps = [morgan_fingerprint(parse_smiles(s), fp_radius, fp_bits)
               for s in ds.smiles]
        clustering = butina_cluster(fps, butina_threshold)
        return butina_split_plan(clustering, n_folds, n_repeats, seed)
    raise ValueError(f"unknown split policy {policy}")


def run_repeated_cv(dataset: LabeledDataset, X: np.ndarray, model_id: str,
                    plan: SplitPlan, seed: int = 0,
                    hp: ForestHyperparams | None = None) -> list[MetricRecord]:
    """Fit/evaluate a forest per CV cell; one record per (cell, metric).

    ``X`` must be the representation matrix of the evaluation view (censored
    rows removed). Per-cell seeds derive deterministically from ``seed``.
    A failed cell aborts the run; no silent gaps."""
    ds = dataset.evaluation_view()
    y = ds.target
    if X.shape[0] != len(y):
        raise ValueError(
            f"representation rows ({X.shape[0]}) != evaluation rows ({len(y)})")
    records: list[MetricRecord] = []
    for repeat, fold, train, test in plan.cells():
        cell_seed = (seed * 1000003 + repeat * 101 + fold) & 0x7FFFFFFF
        model = fit_forest(X[train], y[train], hp, seed=cell_seed)
        metrics = compute_metrics(y[test], model.predict(X[test]))
        for name in METRIC_NAMES:
            records.append(MetricRecord(
                model=model_id, dataset=ds.name, split_policy=plan.policy,
                repeat=repeat, fold=fold, metric=name,
                value=metrics[name]))
    return records


def records_to_csv(records: list[MetricRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["model", "dataset", "split_policy", "repeat",
                           "fold", "metric", "value"])
        writer.writeheader()
        for r in sorted(records, key=lambda r: (r.model, r.dataset, r.metric,
                                                r.repeat, r.fold)):
            writer.writerow(r.to_dict())


def records_to_json(records: list[MetricRecord], path) -> None:
    with open(path, "w") as f:
        json.dump([r.to_dict() for r in records], f, indent=1)


def load_records(path) -> list[MetricRecord]:
    if str(path).endswith(".json"):
        with open(path) as f:
            rows = json.load(f)
    else:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        value = r["value"]
        if value in ("", None):
            value = None
        else:
            value = float(value)
        out.append(MetricRecord(
            model=r["model"], dataset=r["dataset"],
            split_policy=r["split_policy"], repeat=int(r["repeat"]),
            fold=int(r["fold"]), metric=r["metric"], value=value))
    return out
