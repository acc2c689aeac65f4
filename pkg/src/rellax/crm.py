"""Conventional recommendation model: ID embeddings, a history aggregator,
a two-layer perceptron producing the representation ``h`` and a sigmoid head.

Batches are handled as padded (B, L) index arrays with a validity mask so
pretraining stays vectorized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import InteractionSample, Item, User
from .numerics import (
    AdamW,
    ContractError,
    Mlp2,
    Params,
    digest,
    load_tensors,
    mlp2_backward,
    mlp2_forward,
    rng_for,
    save_tensors,
    sigmoid,
)

log = logging.getLogger(__name__)

AGGREGATORS = ("attention", "mean")


@dataclass
class CrmOutput:
    h: np.ndarray
    y_hat: float


class CrmModel:
    def __init__(
        self,
        params: Params,
        user_ids: Sequence[int],
        item_ids: Sequence[int],
        aggregator: str = "attention",
    ):
        if aggregator not in AGGREGATORS:
            raise ContractError(f"unknown aggregator {aggregator!r}")
        self.params = params
        self.aggregator = aggregator
        self.user_row = {int(u): i for i, u in enumerate(user_ids)}
        self.item_row = {int(it): i for i, it in enumerate(item_ids)}
        self.frozen = False

    @classmethod
    def init(
        cls,
        user_ids: Sequence[int],
        item_ids: Sequence[int],
        seed: int,
        d_e: int = 16,
        d_h: int = 32,
        hidden: int = 32,
        aggregator: str = "attention",
    ) -> "CrmModel":
        user_ids, item_ids = sorted(user_ids), sorted(item_ids)
        p = {
            "user_emb": rng_for(seed, "crm", "user_emb").normal(0, 0.01, (len(user_ids), d_e)),
            "item_emb": rng_for(seed, "crm", "item_emb").normal(0, 0.01, (len(item_ids), d_e)),
            "g.w": rng_for(seed, "crm", "g.w").normal(0, 1.0 / np.sqrt(d_h), d_h),
            "g.b": np.zeros(1),
        }
        p.update(Mlp2.init(rng_for(seed, "crm", "f"), 3 * d_e, hidden, d_h).params("f"))
        return cls(p, user_ids, item_ids, aggregator)

    @property
    def d_e(self) -> int:
        return self.params["item_emb"].shape[1]

    @property
    def d_h(self) -> int:
        return self.params["g.w"].shape[0]

    @property
    def mlp(self) -> Mlp2:
        return Mlp2.from_params(self.params, "f")

    @property
    def no_decay(self) -> frozenset[str]:
        return frozenset({"user_emb", "item_emb", "g.b", "f.b1", "f.b2"})

    def digest(self) -> str:
        return digest(self.params)

    def freeze(self) -> str:
        """Make every parameter read-only and return the parameter digest."""
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True
        return self.digest()

    def save(self, path: str | Path) -> str:
        tensors = dict(self.params)
        tensors["user_ids"] = np.array(sorted(self.user_row, key=self.user_row.get), dtype=np.float64)
        tensors["item_ids"] = np.array(sorted(self.item_row, key=self.item_row.get), dtype=np.float64)
        save_tensors(path, tensors, {"aggregator": self.aggregator, "param_digest": self.digest()})
        return self.digest()

    @classmethod
    def load(cls, path: str | Path) -> "CrmModel":
        t, header = load_tensors(path)
        users = t.pop("user_ids").astype(np.int64).tolist()
        items = t.pop("item_ids").astype(np.int64).tolist()
        model = cls(t, users, items, header.get("aggregator", "attention"))
        if header.get("param_digest") not in (None, model.digest()):
            raise ContractError(f"{path}: CRM parameter digest mismatch")
        return model

    # ------------------------------------------------------------------
    def item_index(self, item_id: int) -> int:
        try:
            return self.item_row[item_id]
        except KeyError:
            raise ContractError(f"item id {item_id} has no CRM embedding row") from None

    def user_index(self, user_id: int) -> int:
        try:
            return self.user_row[user_id]
        except KeyError:
            raise ContractError(f"user id {user_id} has no CRM embedding row") from None


@dataclass
class IdBatch:
    users: np.ndarray  # (B,)
    hist: np.ndarray  # (B, L) rows, padded with 0
    mask: np.ndarray  # (B, L) bool
    targets: np.ndarray  # (B,)
    labels: np.ndarray  # (B,)


def id_batch(model: CrmModel, samples: Sequence[InteractionSample], max_len: int | None = None) -> IdBatch:
    """ID-modality view of samples: the most recent ``max_len`` history items."""
    hists = []
    for s in samples:
        items = s.history_items
        if not items:
            raise ContractError("CRM needs a non-empty history")
        if max_len is not None:
            items = items[-max_len:]
        hists.append([model.item_index(it.item_id) for it in items])
    L = max(len(h) for h in hists)
    hist = np.zeros((len(samples), L), dtype=np.int64)
    mask = np.zeros((len(samples), L), dtype=bool)
    for b, h in enumerate(hists):
        hist[b, : len(h)] = h
        mask[b, : len(h)] = True
    return IdBatch(
        np.array([model.user_index(s.user.user_id) for s in samples], dtype=np.int64),
        hist,
        mask,
        np.array([model.item_index(s.target.item_id) for s in samples], dtype=np.int64),
        np.array([s.label for s in samples], dtype=np.float64),
    )


def lookup_item_embeddings(
    model: CrmModel, history: Sequence[Item], target: Item
) -> np.ndarray:
    """Rows ``[e_1, ..., e_L, e_target]`` from the item table."""
    rows = [model.item_index(it.item_id) for it in history] + [model.item_index(target.item_id)]
    return model.params["item_emb"][rows]


def _forward(model: CrmModel, batch: IdBatch):
    p = model.params
    E = p["item_emb"][batch.hist]  # (B, L, d)
    r = p["user_emb"][batch.users]
    e_c = p["item_emb"][batch.targets]
    m = batch.mask
    if model.aggregator == "mean":
        weights = m / m.sum(axis=1, keepdims=True)
    else:
        scores = np.einsum("bld,bd->bl", E, e_c) / np.sqrt(model.d_e)
        scores = np.where(m, scores, -np.inf)
        scores -= scores.max(axis=1, keepdims=True)
        ex = np.exp(scores)
        weights = ex / ex.sum(axis=1, keepdims=True)
    pooled = np.einsum("bl,bld->bd", weights, E)
    z = np.concatenate([r, pooled, e_c], axis=1)
    h = mlp2_forward(model.mlp, z)
    logit = h @ p["g.w"] + p["g.b"][0]
    return logit, h, (E, e_c, weights, z)


def crm_forward_batch(model: CrmModel, batch: IdBatch) -> tuple[np.ndarray, np.ndarray]:
    """Return (h of shape (B, d_h), y_hat of shape (B,))."""
    logit, h, _ = _forward(model, batch)
    return h, sigmoid(logit)


def crm_forward(model: CrmModel, sample: InteractionSample, max_len: int | None = None) -> CrmOutput:
    h, y = crm_forward_batch(model, id_batch(model, [sample], max_len))
    return CrmOutput(h[0], float(y[0]))


def bce_from_logits(logit: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    loss = np.logaddexp(0.0, logit) - labels * logit
    return float(loss.mean()), (sigmoid(logit) - labels) / len(labels)


def crm_loss_and_grads(model: CrmModel, batch: IdBatch) -> tuple[float, Params]:
    p = model.params
    logit, h, (E, e_c, weights, z) = _forward(model, batch)
    loss, dlogit = bce_from_logits(logit, batch.labels)
    d = model.d_e
    grads: Params = {"g.w": dlogit @ h, "g.b": np.array([dlogit.sum()])}
    dh = np.outer(dlogit, p["g.w"])
    mlp_grads, dz = mlp2_backward(model.mlp, z, dh, "f")
    grads.update(mlp_grads)
    dr, dpooled, de_c = dz[:, :d], dz[:, d : 2 * d], dz[:, 2 * d :].copy()
    dE = weights[:, :, None] * dpooled[:, None, :]
    if model.aggregator == "attention":
        dw = np.einsum("bld,bd->bl", E, dpooled)
        dscore = weights * (dw - (dw * weights).sum(axis=1, keepdims=True)) / np.sqrt(d)
        dE += dscore[:, :, None] * e_c[:, None, :]
        de_c += np.einsum("bl,bld->bd", dscore, E)
    dE *= batch.mask[:, :, None]
    item_g = np.zeros_like(p["item_emb"])
    np.add.at(item_g, batch.hist.reshape(-1), dE.reshape(-1, d))
    np.add.at(item_g, batch.targets, de_c)
    user_g = np.zeros_like(p["user_emb"])
    np.add.at(user_g, batch.users, dr)
    grads["item_emb"] = item_g
    grads["user_emb"] = user_g
    return loss, grads


def crm_pretrain(
    model: CrmModel,
    train: Sequence[InteractionSample],
    epochs: int,
    seed: int,
    lr: float = 3e-3,
    batch_size: int = 64,
    max_len: int | None = 32,
    weight_decay: float = 1e-4,
) -> list[float]:
    """Minimize mean BCE with AdamW; returns the per-step loss history.

    The caller freezes the model afterwards (:meth:`CrmModel.freeze`).
    """
    if not train:
        raise ContractError("CRM pretraining needs a non-empty train set")
    if model.frozen:
        raise ContractError("CRM is frozen; pretraining would modify it")
    opt = AdamW(lr=lr, weight_decay=weight_decay, no_decay=model.no_decay)
    rng = rng_for(seed, "crm-pretrain")
    batch_all = id_batch(model, train, max_len)
    n = len(train)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = IdBatch(
                batch_all.users[idx], batch_all.hist[idx], batch_all.mask[idx],
                batch_all.targets[idx], batch_all.labels[idx],
            )
            loss, grads = crm_loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise FloatingPointError(f"CRM loss diverged at step {len(history)}")
            opt.step(model.params, grads)
            history.append(loss)
        log.info("crm epoch %d mean loss %.4f", epoch, np.mean(history[-(n // batch_size + 1):]))
    return history
