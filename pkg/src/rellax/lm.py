"""A small pre-norm causal transformer with LoRA hosts on the query and value
projections, written with explicit forward and backward passes.

The model accepts either token ids or an already-assembled embedding
sequence (text tokens with spliced soft tokens). Output logits are tied to
the token-embedding table.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapter import CfLoraAdapter, adapter_backward_rows, adapter_forward_rows
from .numerics import (
    ContractError,
    Params,
    digest,
    load_tensors,
    log_softmax,
    rng_for,
    save_tensors,
    sigmoid,
    softmax,
)

HOST_KINDS = ("q", "v")


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 48
    n_heads: int = 2
    n_layers: int = 2
    context: int = 512
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


class ToyLm:
    def __init__(self, config: LmConfig, params: Params, vocab=None):
        self.config = config
        self.params = params
        self.vocab = vocab

    @classmethod
    def init(cls, config: LmConfig, seed: int, vocab=None) -> "ToyLm":
        d, f, V = config.d_model, config.ffn_mult * config.d_model, config.vocab_size

        def normal(name: str, shape, std: float) -> np.ndarray:
            return rng_for(seed, "lm", name).normal(0.0, std, size=shape)

        p: Params = {
            "tok_emb": normal("tok_emb", (V, d), 0.3),
            "pos_emb": normal("pos_emb", (config.context, d), 0.05),
            "lnf.g": np.ones(d),
            "lnf.b": np.zeros(d),
        }
        for l in range(config.n_layers):
            pre = f"layers.{l}"
            p[f"{pre}.ln1.g"] = np.ones(d)
            p[f"{pre}.ln1.b"] = np.zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.{w}"] = normal(f"{pre}.{w}", (d, d), 1.0 / np.sqrt(d))
            p[f"{pre}.ln2.g"] = np.ones(d)
            p[f"{pre}.ln2.b"] = np.zeros(d)
            p[f"{pre}.ff1.w"] = normal(f"{pre}.ff1.w", (f, d), np.sqrt(2.0 / d))
            p[f"{pre}.ff1.b"] = np.zeros(f)
            p[f"{pre}.ff2.w"] = normal(f"{pre}.ff2.w", (d, f), 1.0 / np.sqrt(f))
            p[f"{pre}.ff2.b"] = np.zeros(d)
        return cls(config, p, vocab)

    def hosts(self) -> list[str]:
        return [f"layers.{l}.{k}" for l in range(self.config.n_layers) for k in HOST_KINDS]

    def digest(self) -> str:
        return digest(self.params)

    def config_dict(self) -> dict:
        return asdict(self.config)

    @property
    def no_decay(self) -> frozenset[str]:
        return frozenset(n for n in self.params if n.endswith((".g", ".b")) or "emb" in n)

    def save(self, path: str | Path, vocab_file: str = "vocab.txt", extra: Mapping[str, str] | None = None) -> str:
        header = {"config": json.dumps(self.config_dict(), sort_keys=True), "vocab": vocab_file}
        header.update(extra or {})
        return save_tensors(path, self.params, header)

    @classmethod
    def load(cls, path: str | Path, vocab=None) -> "ToyLm":
        params, header = load_tensors(path)
        config = LmConfig(**json.loads(header["config"]))
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ContractError(f"{path}: vocabulary has {len(vocab)} tokens, model expects {config.vocab_size}")
        return cls(config, params, vocab)


@dataclass
class LmOutput:
    logits: np.ndarray  # (V,) for the last position, or (T, V)
    hidden: np.ndarray  # (T, d) output of the last block, before the final norm
    attn: list[np.ndarray]  # per layer (H, T, T)
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class LmGrads:
    base: Params
    adapters: Params
    dW: dict[str, np.ndarray]
    d_embeds: np.ndarray


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    n = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


def embed_tokens(model: ToyLm, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise ContractError("token id out of vocabulary range")
    return model.params["tok_emb"][tokens]


def lm_forward(
    model: ToyLm,
    tokens=None,
    embeds: np.ndarray | None = None,
    adapters: Mapping[str, CfLoraAdapter] | None = None,
    ws: Mapping[str, np.ndarray] | None = None,
    all_logits: bool = False,
    keep_cache: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> LmOutput:
    """Run the stack on token ids or on an embedding sequence.

    Each adapted host projection computes ``base(x) + adapter(x)``, with the
    sample's interaction matrix taken from ``ws[host]`` (identity-style
    sources may omit it). Logits are returned for the last position unless
    ``all_logits``.
    """
    cfg, p = model.config, model.params
    if embeds is None:
        if tokens is None:
            raise ContractError("lm_forward needs tokens or embeds")
        embeds = embed_tokens(model, tokens)
    T = embeds.shape[0]
    if T < 1:
        raise ContractError("empty input sequence")
    if T > cfg.context:
        raise ContractError(f"sequence of {T} positions exceeds the context limit {cfg.context}")
    adapters = adapters or {}
    ws = dict(ws or {})
    for host, ad in adapters.items():
        if host not in ws:
            ws[host] = ad.interaction(None)

    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    x = embeds + p["pos_emb"][:T]
    cache: dict = {"T": T, "ws": ws, "tokens": tokens}
    attn_all = []
    for l in range(cfg.n_layers):
        pre = f"layers.{l}"
        lc: dict = {"x_in": x}
        a, lc["ln1"] = _layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.ln_eps)
        lc["a"] = a
        q = a @ p[f"{pre}.wq"].T
        k = a @ p[f"{pre}.wk"].T
        v = a @ p[f"{pre}.wv"].T
        for kind, target in (("q", "q"), ("v", "v")):
            host = f"{pre}.{kind}"
            if host in adapters:
                delta, lc[f"ad_{kind}"] = adapter_forward_rows(adapters[host], ws[host], a, dropout_rng)
                if kind == "q":
                    q = q + delta
                else:
                    v = v + delta
        qh = q.reshape(T, H, dh).transpose(1, 0, 2)
        kh = k.reshape(T, H, dh).transpose(1, 0, 2)
        vh = v.reshape(T, H, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
        scores = np.where(causal, -np.inf, scores)
        P = softmax(scores, axis=-1)
        oh = P @ vh
        o = oh.transpose(1, 0, 2).reshape(T, d)
        x = x + o @ p[f"{pre}.wo"].T
        lc.update(qh=qh, kh=kh, vh=vh, P=P, o=o, x_mid=x)
        c, lc["ln2"] = _layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.ln_eps)
        pre1 = c @ p[f"{pre}.ff1.w"].T + p[f"{pre}.ff1.b"]
        f1 = np.maximum(pre1, 0.0)
        x = x + f1 @ p[f"{pre}.ff2.w"].T + p[f"{pre}.ff2.b"]
        lc.update(c=c, pre1=pre1, f1=f1)
        attn_all.append(P)
        cache[l] = lc
    hidden = x
    y, cache["lnf"] = _layer_norm(x, p["lnf.g"], p["lnf.b"], cfg.ln_eps)
    cache["y"] = y
    logits = (y if all_logits else y[-1]) @ p["tok_emb"].T
    return LmOutput(logits, hidden, attn_all, cache if keep_cache else {})


def lm_backward(
    model: ToyLm,
    out: LmOutput,
    dlogits: np.ndarray,
    adapters: Mapping[str, CfLoraAdapter] | None = None,
    want_base: bool = True,
) -> LmGrads:
    """Reverse pass for a forward run with ``keep_cache=True``.

    ``dlogits`` matches ``out.logits``. Returns gradients for the base
    weights (if ``want_base``), the adapter factors, each host's interaction
    matrix, and the input embedding rows.
    """
    cfg, p, cache = model.config, model.params, out.cache
    if not cache:
        raise ContractError("lm_backward needs a forward pass run with keep_cache=True")
    adapters = adapters or {}
    ws = cache["ws"]
    T = cache["T"]
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    base: Params = {}
    ad_grads: Params = {}
    dW: dict[str, np.ndarray] = {}

    y = cache["y"]
    emb = p["tok_emb"]
    dy = np.zeros_like(y)
    if dlogits.ndim == 1:
        dy[-1] = dlogits @ emb
        if want_base:
            base["tok_emb"] = np.outer(dlogits, y[-1])
    else:
        dy = dlogits @ emb
        if want_base:
            base["tok_emb"] = dlogits.T @ y
    dx, dg, db = _layer_norm_backward(dy, p["lnf.g"], cache["lnf"])
    if want_base:
        base["lnf.g"], base["lnf.b"] = dg, db

    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}"
        lc = cache[l]
        # feed-forward
        df1 = dx @ p[f"{pre}.ff2.w"]
        dpre1 = df1 * (lc["pre1"] > 0)
        dc = dpre1 @ p[f"{pre}.ff1.w"]
        if want_base:
            base[f"{pre}.ff2.w"] = dx.T @ lc["f1"]
            base[f"{pre}.ff2.b"] = dx.sum(axis=0)
            base[f"{pre}.ff1.w"] = dpre1.T @ lc["c"]
            base[f"{pre}.ff1.b"] = dpre1.sum(axis=0)
        dmid, dg, db = _layer_norm_backward(dc, p[f"{pre}.ln2.g"], lc["ln2"])
        if want_base:
            base[f"{pre}.ln2.g"], base[f"{pre}.ln2.b"] = dg, db
        dx = dx + dmid
        # attention
        do = dx @ p[f"{pre}.wo"]
        if want_base:
            base[f"{pre}.wo"] = dx.T @ lc["o"]
        doh = do.reshape(T, H, dh).transpose(1, 0, 2)
        P = lc["P"]
        dP = doh @ lc["vh"].transpose(0, 2, 1)
        dvh = P.transpose(0, 2, 1) @ doh
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        dqh = dS @ lc["kh"]
        dkh = dS.transpose(0, 2, 1) @ lc["qh"]
        dq = dqh.transpose(1, 0, 2).reshape(T, d)
        dk = dkh.transpose(1, 0, 2).reshape(T, d)
        dv = dvh.transpose(1, 0, 2).reshape(T, d)
        a = lc["a"]
        da = dq @ p[f"{pre}.wq"] + dk @ p[f"{pre}.wk"] + dv @ p[f"{pre}.wv"]
        if want_base:
            base[f"{pre}.wq"] = dq.T @ a
            base[f"{pre}.wk"] = dk.T @ a
            base[f"{pre}.wv"] = dv.T @ a
        for kind, dout in (("q", dq), ("v", dv)):
            host = f"{pre}.{kind}"
            if host in adapters:
                ad = adapters[host]
                dA, dB, dWh, dxa = adapter_backward_rows(ad, ws[host], lc[f"ad_{kind}"], dout)
                ad_grads[f"{host}.A"] = dA
                ad_grads[f"{host}.B"] = dB
                dW[host] = dWh
                da = da + dxa
        dln, dg, db = _layer_norm_backward(da, p[f"{pre}.ln1.g"], lc["ln1"])
        if want_base:
            base[f"{pre}.ln1.g"], base[f"{pre}.ln1.b"] = dg, db
        dx = dx + dln

    if want_base:
        dpos = np.zeros_like(p["pos_emb"])
        dpos[:T] = dx
        base["pos_emb"] = dpos
        if cache["tokens"] is not None:
            np.add.at(base["tok_emb"], np.asarray(cache["tokens"], dtype=np.int64), dx)
    return LmGrads(base, ad_grads, dW, dx)


# --------------------------------------------------------------------------
# Losses and scoring


def answer_loss_from_logits(logits: np.ndarray, answer_id: int) -> tuple[float, np.ndarray]:
    """Negative log-softmax of the answer token and its gradient w.r.t. logits."""
    if not 0 <= answer_id < logits.shape[-1]:
        raise ContractError(f"answer token {answer_id} not in vocabulary of size {logits.shape[-1]}")
    lsm = log_softmax(logits)
    grad = np.exp(lsm)
    grad[answer_id] -= 1.0
    return float(-lsm[answer_id]), grad


def causal_lm_loss(
    model: ToyLm,
    answer_id: int,
    tokens=None,
    embeds: np.ndarray | None = None,
    adapters: Mapping[str, CfLoraAdapter] | None = None,
    ws: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Loss on the single answer token predicted after the whole prompt."""
    out = lm_forward(model, tokens=tokens, embeds=embeds, adapters=adapters, ws=ws)
    return answer_loss_from_logits(out.logits, answer_id)[0]


def next_token_loss(model: ToyLm, tokens, keep_cache: bool = False) -> tuple[float, np.ndarray, LmOutput]:
    """Mean next-token loss over a token sequence (every position predicts the next).

    Used to pretrain the base model on prompts; the answer token is never
    part of ``tokens`` so it is excluded from the objective.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ContractError("need at least two tokens for next-token loss")
    out = lm_forward(model, tokens=tokens, all_logits=True, keep_cache=keep_cache)
    lsm = log_softmax(out.logits[:-1], axis=-1)
    targets = tokens[1:]
    n = len(targets)
    loss = float(-lsm[np.arange(n), targets].mean())
    dlogits = np.zeros_like(out.logits)
    dlogits[:-1] = np.exp(lsm)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits, out


def pointwise_score(logits: np.ndarray, yes_id: int, no_id: int) -> float:
    """Two-way softmax over the "Yes"/"No" logits, as ``sigmoid(s_yes - s_no)``."""
    V = logits.shape[-1]
    if yes_id == no_id or not (0 <= yes_id < V and 0 <= no_id < V):
        raise ContractError(f"invalid answer indices {yes_id}, {no_id} for vocabulary of size {V}")
    return float(sigmoid(logits[yes_id] - logits[no_id]))


# --------------------------------------------------------------------------
# Attention case studies


@dataclass
class AttentionExtract:
    titles: list[str]
    masses: np.ndarray  # per history item
    target_mass: float
    row: np.ndarray  # head-averaged last-layer attention from the final position


def extract_item_attention(
    out: LmOutput, spans: list[tuple[int, int]], titles: list[str] | None = None
) -> AttentionExtract:
    """Sum head-averaged last-layer attention from the final position within item spans.

    ``spans`` lists history items then the target, as [start, end) positions
    of the (possibly soft-token spliced) sequence.
    """
    P = out.attn[-1]
    T = P.shape[-1]
    for s, e in spans:
        if not 0 <= s < e <= T:
            raise ContractError(f"span ({s}, {e}) out of range for sequence of length {T}")
    row = P[:, -1, :].mean(axis=0)
    masses = np.array([row[s:e].sum() for s, e in spans[:-1]])
    target_mass = float(row[spans[-1][0] : spans[-1][1]].sum()) if spans else 0.0
    titles = titles or [f"item{j}" for j in range(len(spans) - 1)]
    return AttentionExtract(list(titles[: len(masses)]), masses, target_mass, row)
