"""End-to-end training and evaluation: frozen base LM + frozen CRM, trainable
LoRA factors, interaction projectors and the soft-prompt projector.

The four method configurations share one code path:

============  ===========  =====  ==========
variant       W source     SPA    retrieval
============  ===========  =====  ==========
identity-W    identity     off    off        (TALLRec-style)
rella         identity     off    on
ilora         block diag.  off    off
rellax        projected    on     on
============  ===========  =====  ==========
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapter import CfLoraAdapter, InteractionSource, interaction_backward
from .crm import CrmModel, crm_forward_batch, id_batch
from .data import InteractionSample, Item, User, sample_few_shot
from .lm import (
    AttentionExtract,
    LmConfig,
    ToyLm,
    answer_loss_from_logits,
    extract_item_attention,
    lm_backward,
    lm_forward,
    next_token_loss,
    pointwise_score,
)
from .metrics import compute_auc, compute_logloss_acc
from .numerics import (
    AdamW,
    ContractError,
    Mlp2,
    Params,
    add_grads,
    child_seed,
    load_tensors,
    mlp2_backward,
    mlp2_forward,
    rng_for,
    save_tensors,
)
from .prompt import (
    PromptTemplate,
    TokenizedPrompt,
    Vocabulary,
    assemble_soft_prompt,
    render_item_description,
    render_mention,
    render_profile,
    tokenize,
    tokenize_sample,
)
from .subr import SemanticIndex

log = logging.getLogger(__name__)

VARIANTS = {
    "rellax": {"w_source": "projected", "spa": True, "subr": True},
    "rella": {"w_source": "identity", "spa": False, "subr": True},
    "identity-W": {"w_source": "identity", "spa": False, "subr": False},
    "ilora": {"w_source": "block_diagonal", "spa": False, "subr": False},
}


@dataclass
class TrainConfig:
    variant: str = "rellax"
    w_source: str = "projected"
    spa: bool = True
    subr: bool = True
    shots: int = 2000
    epochs: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    k_text: int = 8
    l_id: int = 32
    rank: int = 4
    alpha: float = 8.0
    dropout: float = 0.0
    n_blocks: int = 2
    proj_hidden: int = 32

    def __post_init__(self) -> None:
        if self.k_text < 1:
            raise ContractError("k_text must be >= 1")
        if self.l_id < 1:
            raise ContractError("l_id must be >= 1")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "TrainConfig":
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}; known: {sorted(VARIANTS)}")
        return cls(variant=variant, **{**VARIANTS[variant], **overrides})

    @property
    def history_mode(self) -> str:
        return "retrieved" if self.subr else "recent"


@dataclass
class Rellax:
    """Everything needed to score a sample: frozen parts plus trainables."""

    lm: ToyLm
    crm: CrmModel
    template: PromptTemplate
    config: TrainConfig
    adapters: dict[str, CfLoraAdapter]
    spa: Mlp2 | None = None
    index: SemanticIndex | None = None

    def trainable_params(self) -> Params:
        out: Params = {}
        for ad in self.adapters.values():
            out.update(ad.params())
        if self.spa is not None:
            out.update(self.spa.params("spa"))
        return out

    @property
    def needs_h(self) -> bool:
        return any(ad.source.needs_h for ad in self.adapters.values())

    def frozen_digests(self) -> dict[str, str]:
        return {"crm": self.crm.digest(), "lm": self.lm.digest()}


def build_rellax(
    lm: ToyLm,
    crm: CrmModel,
    template: PromptTemplate,
    config: TrainConfig,
    index: SemanticIndex | None = None,
    adapters: bool = True,
) -> Rellax:
    """Initialize trainables: zero-B adapters on every query/value host, the
    interaction projectors (near-zero last layer) and the soft-prompt projector."""
    if config.subr and index is None:
        raise ContractError("retrieval is enabled but no semantic index was given")
    d = lm.config.d_model
    seed = config.seed
    ads: dict[str, CfLoraAdapter] = {}
    if adapters:
        for host in lm.hosts():
            rng = rng_for(seed, "adapter", host)
            if config.w_source == "projected":
                src = InteractionSource(
                    "projected", config.rank,
                    projector=Mlp2.init(rng, crm.d_h, config.proj_hidden, config.rank**2, out_std=1e-3),
                )
            elif config.w_source == "block_diagonal":
                src = InteractionSource(
                    "block_diagonal", config.rank, n_blocks=config.n_blocks,
                    projector=Mlp2.init(rng, crm.d_h, config.proj_hidden, config.n_blocks, out_std=1e-3),
                )
            else:
                src = InteractionSource("identity", config.rank)
            ads[host] = CfLoraAdapter.init(host, rng, d, d, config.rank, config.alpha, src, config.dropout)
    spa = None
    if config.spa:
        spa = Mlp2.init(rng_for(seed, "spa"), crm.d_e, config.proj_hidden, d)
    return Rellax(lm, crm, template, config, ads, spa, index)


def save_trainables(system: Rellax, path, header: dict | None = None) -> str:
    return save_tensors(path, system.trainable_params(), {"variant": system.config.variant, **(header or {})})


def load_trainables(system: Rellax, path) -> None:
    """Copy a saved trainable set into a freshly built system of the same shape."""
    saved, _ = load_tensors(path)
    params = system.trainable_params()
    if set(saved) != set(params):
        missing = sorted(set(params) ^ set(saved))
        raise ContractError(f"{path}: trainable names do not match the configured variant: {missing[:4]}")
    for name, arr in params.items():
        if saved[name].shape != arr.shape:
            raise ContractError(f"{path}: {name} has shape {saved[name].shape}, expected {arr.shape}")
        arr[...] = saved[name]


# --------------------------------------------------------------------------
# Per-sample preparation and scoring


@dataclass
class Prepared:
    tp: TokenizedPrompt
    item_rows: np.ndarray  # CRM item-table rows of rendered items, target last
    h: np.ndarray | None
    label: int


def prepare(system: Rellax, samples: Sequence[InteractionSample]) -> list[Prepared]:
    """Tokenize prompts and run the frozen CRM once per sample."""
    cfg = system.config
    hs = None
    if system.needs_h and samples:
        hs, _ = crm_forward_batch(system.crm, id_batch(system.crm, samples, cfg.l_id))
    out = []
    for b, s in enumerate(samples):
        tp = tokenize_sample(s, system.template, system.lm.vocab, cfg.history_mode, cfg.k_text, system.index)
        rows = np.array([system.crm.item_index(it.item_id) for it in tp.items], dtype=np.int64)
        out.append(Prepared(tp, rows, None if hs is None else hs[b], s.label))
    return out


def _inputs(system: Rellax, prep: Prepared):
    tok_emb = system.lm.params["tok_emb"]
    e_id = None
    if system.spa is not None:
        e_id = system.crm.params["item_emb"][prep.item_rows]
        soft = mlp2_forward(system.spa, e_id)
        assembled = assemble_soft_prompt(prep.tp, tok_emb, soft)
    else:
        assembled = assemble_soft_prompt(prep.tp, tok_emb, None)
    ws = {host: ad.interaction(prep.h) for host, ad in system.adapters.items()}
    return assembled, e_id, ws


def sample_loss_and_grads(
    system: Rellax, prep: Prepared, dropout_rng: np.random.Generator | None = None
) -> tuple[float, Params]:
    """Answer-token loss for one sample and gradients for every trainable."""
    assembled, e_id, ws = _inputs(system, prep)
    out = lm_forward(
        system.lm, embeds=assembled.embeds, adapters=system.adapters, ws=ws,
        keep_cache=True, dropout_rng=dropout_rng,
    )
    loss, dlogits = answer_loss_from_logits(out.logits, prep.tp.answer_id)
    g = lm_backward(system.lm, out, dlogits, system.adapters, want_base=False)
    grads = dict(g.adapters)
    for host, ad in system.adapters.items():
        grads.update(interaction_backward(ad.source, prep.h, g.dW[host], host))
    if system.spa is not None:
        d_soft = g.d_embeds[assembled.soft_positions]
        spa_grads, _ = mlp2_backward(system.spa, e_id, d_soft, "spa")
        grads.update(spa_grads)
    return loss, grads


def score_prepared(system: Rellax, prep: Prepared, keep_attention: bool = False):
    assembled, _, ws = _inputs(system, prep)
    out = lm_forward(system.lm, embeds=assembled.embeds, adapters=system.adapters, ws=ws)
    vocab = system.lm.vocab
    score = pointwise_score(out.logits, vocab.yes_id, vocab.no_id)
    if keep_attention:
        return score, out, assembled
    return score


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    losses: list[float]
    steps: int
    digests_before: dict[str, str]
    digests_after: dict[str, str]
    runtime: float


def _check_frozen(system: Rellax, expected: dict[str, str], step: int) -> None:
    now = system.frozen_digests()
    if now != expected:
        changed = [k for k in expected if expected[k] != now[k]]
        raise RuntimeError(f"frozen parameters changed ({', '.join(changed)}) at step {step}")


def train_rellax(system: Rellax, train: Sequence[InteractionSample]) -> TrainResult:
    """Few-shot instruction tuning of the trainables with AdamW and linear decay.

    Gradients are accumulated sample by sample (each sample has its own W)
    and averaged over the batch.
    """
    cfg = system.config
    t0 = time.perf_counter()
    before = system.frozen_digests()
    subset = sample_few_shot(train, min(cfg.shots, len(train)), cfg.seed)
    prepared = prepare(system, subset)
    params = system.trainable_params()
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = rng_for(cfg.seed, "train-order")
    drop_rng = rng_for(cfg.seed, "dropout") if cfg.dropout > 0 else None
    per_epoch = -(-len(prepared) // cfg.batch_size)
    total = max(cfg.epochs * per_epoch, 1)
    losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc: Params = {}
            batch_loss = 0.0
            for i in batch:
                loss, grads = sample_loss_and_grads(system, prepared[i], drop_rng)
                batch_loss += loss
                add_grads(acc, grads, 1.0 / len(batch))
            batch_loss /= len(batch)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"training loss is not finite at step {step}")
            opt.lr = cfg.lr * (1.0 - step / total)
            opt.step(params, acc)
            losses.append(batch_loss)
            step += 1
        _check_frozen(system, before, step)
        log.info("epoch %d mean loss %.4f", epoch, float(np.mean(losses[-per_epoch:])))
    return TrainResult(losses, step, before, system.frozen_digests(), time.perf_counter() - t0)


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    auc: float
    logloss: float
    acc: float
    scores: np.ndarray
    labels: np.ndarray
    mean_tokens: float
    config: dict = field(default_factory=dict)
    runtime: float = 0.0

    def metrics_row(self) -> dict:
        return {
            "auc": self.auc, "logloss": self.logloss, "acc": self.acc,
            "n": len(self.labels), "mean_tokens": self.mean_tokens,
        }


def evaluate(system: Rellax, test: Sequence[InteractionSample]) -> EvalReport:
    t0 = time.perf_counter()
    prepared = prepare(system, test)
    scores = np.array([score_prepared(system, p) for p in prepared])
    labels = np.array([p.label for p in prepared])
    logloss, acc = compute_logloss_acc(labels, scores)
    mean_tokens = float(np.mean([p.tp.length + (len(p.tp.spans) if system.spa else 0) for p in prepared]))
    return EvalReport(
        compute_auc(labels, scores), logloss, acc, scores, labels, mean_tokens,
        asdict(system.config), time.perf_counter() - t0,
    )


def sweep(system: Rellax, test: Sequence[InteractionSample], knob: str, values: Sequence[int]) -> list[dict]:
    """Re-evaluate a trained system while varying ``k_text`` or ``l_id``."""
    if knob not in ("k_text", "l_id"):
        raise ContractError(f"can only sweep k_text or l_id, not {knob!r}")
    rows = []
    original = system.config
    try:
        for v in values:
            system.config = replace(original, **{knob: int(v)})
            rep = evaluate(system, test)
            rows.append({knob: int(v), **rep.metrics_row()})
    finally:
        system.config = original
    return rows


def case_study(
    system: Rellax, samples: Sequence[InteractionSample]
) -> list[tuple[InteractionSample, float, AttentionExtract]]:
    """Last-layer attention from the answer position onto each rendered history item."""
    out = []
    for s, prep in zip(samples, prepare(system, samples)):
        score, lm_out, assembled = score_prepared(system, prep, keep_attention=True)
        titles = [it.title for it in prep.tp.items]
        out.append((s, score, extract_item_attention(lm_out, assembled.spans, titles)))
    return out


# --------------------------------------------------------------------------
# Base LM pretraining (surrogate for a pretrained backbone)


def vocabulary_corpus(items: Sequence[Item], users: Sequence[User], template: PromptTemplate) -> list[str]:
    """Every text fragment a prompt or item description can contain."""
    texts = [
        template.history_header, template.question, template.liked, template.disliked,
        template.history_item, template.target, template.empty_value,
    ]
    texts += [render_item_description(it, template) for it in items]
    texts += [render_mention(it, template) for it in items]
    texts += [render_profile(u, template) for u in users]
    return texts


def build_vocabulary(items, users, template) -> Vocabulary:
    return Vocabulary.build(vocabulary_corpus(items, users, template))


def pretrain_lm(
    lm: ToyLm,
    sequences: Sequence[np.ndarray],
    epochs: int,
    seed: int,
    lr: float = 3e-3,
    batch_size: int = 8,
) -> list[float]:
    """Next-token pretraining of every base weight on prompt texts (answers excluded)."""
    opt = AdamW(lr=lr, weight_decay=0.01, no_decay=lm.no_decay)
    rng = rng_for(seed, "lm-pretrain")
    total = max(epochs * -(-len(sequences) // batch_size), 1)
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(sequences))
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            acc: Params = {}
            batch_loss = 0.0
            for i in batch:
                loss, dlogits, out = next_token_loss(lm, sequences[i], keep_cache=True)
                g = lm_backward(lm, out, dlogits)
                add_grads(acc, g.base, 1.0 / len(batch))
                batch_loss += loss / len(batch)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"LM pretraining loss is not finite at step {step}")
            opt.lr = lr * (1.0 - step / total)
            opt.step(lm.params, acc)
            losses.append(batch_loss)
            step += 1
    return losses


def pretraining_sequences(
    samples: Sequence[InteractionSample],
    items: Sequence[Item],
    template: PromptTemplate,
    vocab: Vocabulary,
    k: int,
    n_prompts: int,
    seed: int,
) -> list[np.ndarray]:
    """Recent-K prompts of a random subset of samples plus every item description."""
    chosen = sample_few_shot(samples, min(n_prompts, len(samples)), child_seed(seed, "lm-corpus"))
    seqs = [tokenize_sample(s, template, vocab, "recent", k).ids for s in chosen]
    seqs += [tokenize(render_item_description(it, template), vocab).ids for it in items]
    return seqs


def new_lm(vocab: Vocabulary, seed: int, **kw) -> ToyLm:
    return ToyLm.init(LmConfig(vocab_size=len(vocab), **kw), seed, vocab)
