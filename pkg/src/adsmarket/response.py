"""Multi-task CTR/CVR model over hashed features with one shared embedding table."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .market import ContractError

CHECKPOINT_VERSION = 1


def feature_hash(token: str, bits: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << bits) - 1)


def overlap_bucket(query_terms: Sequence[str], ad_terms) -> int:
    """Share of query terms found in the ad, in quarters (0..4)."""
    if not query_terms:
        return 0
    share = sum(1 for t in query_terms if t in ad_terms) / len(query_terms)
    return int(round(share * 4))


@dataclass(frozen=True)
class FeatureVector:
    indices: tuple[int, ...]
    bits: int = 18

    def __post_init__(self):
        if not self.indices:
            raise ValueError("empty feature vector")
        if any(not 0 <= i < (1 << self.bits) for i in self.indices):
            raise ValueError("feature index outside the hash space")


def feature_tokens(query_terms: Sequence[str], ad_id: str, advertiser_id: str, vertical: int,
                   segment: int, bucket: int, format_kinds: Sequence[str] = ("title", "description"),
                   ad_terms=frozenset()) -> list[str]:
    """Raw feature strings before hashing, including a few crosses."""
    kinds = sorted(set(format_kinds))
    toks = [f"qt:{t}" for t in query_terms]
    toks += [f"qtv:{t}|{vertical}" for t in query_terms]
    toks += [
        f"ad:{ad_id}",
        f"adv:{advertiser_id}",
        f"vert:{vertical}",
        f"seg:{segment}",
        f"bucket:{bucket}",
        f"fmt:{'+'.join(kinds)}",
        f"segadv:{segment}|{advertiser_id}",
        f"ov:{overlap_bucket(query_terms, ad_terms)}",
    ]
    toks += [f"fk:{k}" for k in kinds]
    toks += [f"segfk:{segment}|{k}" for k in kinds]
    return toks


def featurize(tokens: Iterable[str], bits: int = 18) -> FeatureVector:
    return FeatureVector(tuple(feature_hash(t, bits) for t in tokens), bits)


@dataclass
class Impression:
    id: int
    features: FeatureVector
    conversion_type: str


@dataclass
class ResponseModel:
    """Shared table T; heads read the mean of T over a vector's indices.

    p_ctr = sigmoid(w_ctr . mean(T[idx]) + b_ctr), and one (w, b) per
    conversion type for CVR.
    """

    table: np.ndarray
    ctr_head: np.ndarray
    cvr_heads: dict
    bits: int = 18
    learning_rate: float = 0.05
    epochs: int = 3
    history: list = field(default_factory=list)  # (epoch, task, loss)

    @classmethod
    def zeros(cls, bits: int, dim: int, conversion_types: Sequence[str]) -> "ResponseModel":
        return cls(np.zeros((1 << bits, dim)), np.zeros(dim + 1),
                   {c: np.zeros(dim + 1) for c in conversion_types}, bits)

    @classmethod
    def init(cls, bits: int, dim: int, conversion_types: Sequence[str], rng: np.random.Generator,
             scale: float = 0.01, learning_rate: float = 0.05, epochs: int = 3) -> "ResponseModel":
        head = lambda: np.concatenate([rng.normal(0.0, 1.0 / np.sqrt(dim), dim), [0.0]])
        return cls(rng.normal(0.0, scale, (1 << bits, dim)), head(), {c: head() for c in conversion_types},
                   bits, learning_rate, epochs)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def _head(self, task: str) -> np.ndarray:
        if task == "ctr":
            return self.ctr_head
        if task not in self.cvr_heads:
            raise KeyError(f"no CVR head for conversion type {task!r}")
        return self.cvr_heads[task]

    def pooled(self, fv: FeatureVector) -> np.ndarray:
        return self.table[list(fv.indices)].mean(axis=0)

    def logit(self, fv: FeatureVector, task: str) -> float:
        h = self._head(task)
        return float(self.pooled(fv) @ h[:-1] + h[-1])

    # -- persistence ---------------------------------------------------
    def save(self, path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "bits": self.bits, "learning_rate": self.learning_rate,
                "epochs": self.epochs, "types": sorted(self.cvr_heads)}
        arrays = {"table": self.table, "ctr": self.ctr_head}
        arrays.update({f"cvr_{c}": h for c, h in self.cvr_heads.items()})
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "ResponseModel":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            heads = {c: z[f"cvr_{c}"].copy() for c in meta["types"]}
            return cls(z["table"].copy(), z["ctr"].copy(), heads, meta["bits"], meta["learning_rate"], meta["epochs"])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def predict_ctr(model: ResponseModel, fv: FeatureVector) -> float:
    return float(_sigmoid(model.logit(fv, "ctr")))


def predict_cvr(model: ResponseModel, fv: FeatureVector, conversion_type: str) -> float:
    return float(_sigmoid(model.logit(fv, conversion_type)))


def _pack(fvs: Sequence[FeatureVector]):
    lengths = np.array([len(f.indices) for f in fvs])
    flat = np.fromiter((i for f in fvs for i in f.indices), dtype=np.int64, count=int(lengths.sum()))
    rows = np.repeat(np.arange(len(fvs)), lengths)
    return flat, rows, lengths


def _pooled_batch(table: np.ndarray, flat, rows, lengths) -> np.ndarray:
    out = np.zeros((len(lengths), table.shape[1]))
    np.add.at(out, rows, table[flat])
    return out / lengths[:, None]


def predict_many(model: ResponseModel, fvs: Sequence[FeatureVector], task: str) -> np.ndarray:
    if not fvs:
        return np.empty(0)
    h = model._head(task)
    flat, rows, lengths = _pack(fvs)
    return _sigmoid(_pooled_batch(model.table, flat, rows, lengths) @ h[:-1] + h[-1])


def batch_loss(model: ResponseModel, fvs: Sequence[FeatureVector], labels: np.ndarray, tasks: Sequence[str],
               weights: Optional[np.ndarray] = None, with_grad: bool = True):
    """Weighted mean log-loss of a mixed-task batch and its gradients.

    Gradients come back as (table rows, table row grads, head grads by task,
    per-example losses).
    """
    flat, rows, lengths = _pack(fvs)
    pooled = _pooled_batch(model.table, flat, rows, lengths)
    tasks = np.asarray(tasks, dtype=object)
    w = np.ones(len(fvs)) if weights is None else np.asarray(weights, dtype=float)
    z = np.empty(len(fvs))
    names = sorted(set(tasks))
    heads = {t: model._head(t) for t in names}
    for t in names:
        m = tasks == t
        z[m] = pooled[m] @ heads[t][:-1] + heads[t][-1]
    y = np.asarray(labels, dtype=float)
    norm = w.sum()
    per = np.logaddexp(0.0, z) - y * z
    loss = float(np.sum(w * per) / norm)
    if not with_grad:
        return loss, None
    dz = w * (_sigmoid(z) - y) / norm
    head_grads = {}
    dpooled = np.empty_like(pooled)
    for t in names:
        m = tasks == t
        h = heads[t]
        head_grads[t] = np.concatenate([pooled[m].T @ dz[m], [dz[m].sum()]])
        dpooled[m] = np.outer(dz[m], h[:-1])
    row_grads = dpooled[rows] / lengths[rows][:, None]
    return loss, (flat, row_grads, head_grads, per)


def _check_logs(impressions: Sequence[Impression], clicks: Iterable[int], conversions: Iterable[int]):
    if not impressions:
        raise ContractError("empty impression log")
    ids = {imp.id for imp in impressions}
    clicked = set(clicks)
    converted = set(conversions)
    if clicked - ids:
        raise ContractError("click without a parent impression")
    if converted - clicked:
        raise ContractError("conversion without a parent click")
    return clicked, converted


def train(model: ResponseModel, impressions: Sequence[Impression], clicks: Iterable[int],
          conversions: Iterable[int], rng: np.random.Generator, batch_size: int = 256,
          cvr_weight: float = 1.0, epochs: Optional[int] = None) -> ResponseModel:
    """Joint Adagrad training: CTR on every impression, CVR on clicked ones.

    Both tasks push gradients into the same table rows.
    """
    clicked, converted = _check_logs(impressions, clicks, conversions)
    for imp in impressions:
        if imp.features.bits != model.bits:
            raise ValueError("feature vector hashed into a different space than the model")
        if imp.id in clicked and imp.conversion_type not in model.cvr_heads:
            raise KeyError(f"no CVR head for conversion type {imp.conversion_type!r}")
    examples = []  # (impression index, task, label, weight)
    for k, imp in enumerate(impressions):
        examples.append((k, "ctr", float(imp.id in clicked), 1.0))
        if imp.id in clicked:
            examples.append((k, imp.conversion_type, float(imp.id in converted), cvr_weight))
    table_acc = np.full(model.table.shape[0], 1e-8)
    head_acc = {t: np.full_like(h, 1e-8) for t, h in [("ctr", model.ctr_head)] + list(model.cvr_heads.items())}
    lr = model.learning_rate
    for epoch in range(epochs if epochs is not None else model.epochs):
        order = rng.permutation(len(examples))
        sums: dict[str, list[float]] = {}
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start: start + batch_size]]
            fvs = [impressions[b[0]].features for b in batch]
            tasks = [b[1] for b in batch]
            labels = np.array([b[2] for b in batch])
            weights = np.array([b[3] for b in batch])
            loss, (flat, row_grads, head_grads, per) = batch_loss(model, fvs, labels, tasks, weights)
            is_ctr = np.array([t == "ctr" for t in tasks])
            for name, m in (("ctr", is_ctr), ("cvr", ~is_ctr)):
                if m.any():
                    acc = sums.setdefault(name, [0.0, 0])
                    acc[0] += float(per[m].sum())
                    acc[1] += int(m.sum())
            # Adagrad with one accumulator per table row
            scale = len(batch)
            g2 = np.zeros(model.table.shape[0])
            np.add.at(g2, flat, np.sum((row_grads * scale) ** 2, axis=1) / model.dim)
            touched = np.unique(flat)
            table_acc[touched] += g2[touched]
            step = np.zeros((len(touched), model.dim))
            pos = np.searchsorted(touched, flat)
            np.add.at(step, pos, row_grads * scale)
            model.table[touched] -= lr * step / np.sqrt(table_acc[touched])[:, None]
            for t, g in head_grads.items():
                g = g * scale
                head_acc[t] += g * g
                model._head(t)[:] -= lr * g / np.sqrt(head_acc[t])
        for task in ("ctr", "cvr"):
            if task in sums:
                model.history.append((epoch, task, sums[task][0] / max(sums[task][1], 1)))
    return model


def evaluate(model: ResponseModel, impressions: Sequence[Impression], clicks: Iterable[int],
             conversions: Iterable[int]) -> dict:
    """Log-loss of the model and of the best constant predictor, per task."""
    clicked, converted = _check_logs(impressions, clicks, conversions)
    out = {}
    y = np.array([float(imp.id in clicked) for imp in impressions])
    p = predict_many(model, [imp.features for imp in impressions], "ctr")
    out["ctr"] = (_logloss(y, p), _logloss(y, np.full_like(y, y.mean())))
    cl = [imp for imp in impressions if imp.id in clicked]
    if cl:
        yc = np.array([float(imp.id in converted) for imp in cl])
        pc = np.array([predict_cvr(model, imp.features, imp.conversion_type) for imp in cl])
        out["cvr"] = (_logloss(yc, pc), _logloss(yc, np.full_like(yc, yc.mean())))
    return out


def _logloss(y, p) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def write_loss_log(model: ResponseModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "task", "loss"])
        for epoch, task, loss in model.history:
            w.writerow([epoch, task, f"{loss:.10f}"])
