"""Hard-prompt rendering, word-level tokenization and soft-prompt splicing."""

from __future__ import annotations

import bisect
import re
import string
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .data import InteractionSample, Item, User
from .numerics import ContractError, Mlp2, mlp2_forward

TOKEN_RE = re.compile(r"\w+|[^\w\s]")

PAD, BOS, EOS, UNK, YES, NO = "<pad>", "<bos>", "<eos>", "<unk>", "Yes", "No"
RESERVED = (PAD, BOS, EOS, UNK, YES, NO)


# --------------------------------------------------------------------------
# Vocabulary


class Vocabulary:
    """Word-level vocabulary; ids are positions in ``tokens``.

    The first six ids are reserved, so "Yes" and "No" are always single,
    atomic entries.
    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ContractError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ContractError("duplicate token in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def yes_id(self) -> int:
        return self.index[YES]

    @property
    def no_id(self) -> int:
        return self.index[NO]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(TOKEN_RE.findall(text))
        seen.difference_update(RESERVED)
        return cls(list(RESERVED) + sorted(seen))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# --------------------------------------------------------------------------
# Templates


@dataclass(frozen=True)
class PromptTemplate:
    """Named clauses with ``{field}`` placeholders.

    ``mention`` renders one item inside the prompt and is the span that a
    soft token attaches to. ``history_item`` wraps a mention with the user's
    judgment; ``target`` wraps the target mention.
    """

    name: str
    item_description: str
    profile: str
    history_header: str
    history_item: str
    mention: str
    target: str
    question: str
    liked: str = "liked"
    disliked: str = "disliked"
    empty_value: str = "unknown"
    list_sep: str = ", "

    @classmethod
    def from_dict(cls, data: dict) -> "PromptTemplate":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown template keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "PromptTemplate":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


TEMPLATES: dict[str, PromptTemplate] = {
    "movielens": PromptTemplate(
        name="movielens",
        item_description="Here is a movie. Its title is {title}. Its genres are {genres}.",
        profile="The user is {gender}, aged {age}, working as {occupation}.",
        history_header="The user watched the following movies in order:",
        history_item="{mention}, {judgment};",
        mention="{title} ({genres})",
        target="The new movie is {mention}.",
        question="Will the user like the new movie? Answer Yes or No. Answer:",
    ),
    # registry stubs, same clause layout
    "bookcrossing": PromptTemplate(
        name="bookcrossing",
        item_description="Here is a book. Its title is {title}. Its author is {author}.",
        profile="The user is aged {age}, living in {location}.",
        history_header="The user rated the following books in order:",
        history_item="{mention}, {judgment};",
        mention="{title} by {author}",
        target="The new book is {mention}.",
        question="Will the user like the new book? Answer Yes or No. Answer:",
    ),
}


def _placeholders(fmt: str) -> list[str]:
    return [f for _, f, _, _ in string.Formatter().parse(fmt) if f]


def _substitute(fmt: str, values: dict[str, str], what: str) -> str:
    missing = [f for f in _placeholders(fmt) if f not in values]
    if missing:
        raise ContractError(f"{what}: no value for placeholder(s) {missing}")
    return fmt.format_map(values)


def _item_fields(item: Item, template: PromptTemplate) -> dict[str, str]:
    values = {"title": item.title}
    for name, vals in item.attributes:
        values[name] = template.list_sep.join(vals) if vals else template.empty_value
    return values


def render_item_description(item: Item, template: PromptTemplate) -> str:
    return _substitute(template.item_description, _item_fields(item, template), f"item {item.item_id}")


def render_mention(item: Item, template: PromptTemplate) -> str:
    return _substitute(template.mention, _item_fields(item, template), f"item {item.item_id}")


def render_profile(user: User, template: PromptTemplate) -> str:
    return _substitute(template.profile, dict(user.profile), f"user {user.user_id}")


@dataclass
class RenderedPrompt:
    text: str
    spans: list[tuple[int, int]]  # character [start, end) of each item mention
    items: list[Item]  # rendered history items (chronological) then the target
    history_labels: list[int] = field(default_factory=list)

    @property
    def n_history(self) -> int:
        return len(self.items) - 1


def select_history(
    sample: InteractionSample, mode: str, k: int, index=None
) -> list[int]:
    """Indices into ``sample.history`` of the K behaviors to render, chronological."""
    if not sample.history:
        raise ContractError("cannot render a prompt for an empty history")
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    n = len(sample.history)
    if mode == "recent":
        return list(range(max(0, n - k), n))
    if mode == "retrieved":
        if index is None:
            raise ContractError("retrieved mode needs a semantic index")
        from .subr import retrieve_top_k_indices

        return retrieve_top_k_indices(
            [item for item, _ in sample.history], sample.target, k, index
        )
    raise ContractError(f"unknown history mode {mode!r}")


def render_hard_prompt(
    sample: InteractionSample,
    template: PromptTemplate,
    mode: str = "recent",
    k: int = 8,
    index=None,
) -> RenderedPrompt:
    """Profile, header, K judged history mentions, target mention, question.

    Clauses are joined by single spaces. Character spans are recorded for
    every item mention so they can be mapped onto tokens later.
    """
    chosen = select_history(sample, mode, k, index)
    parts: list[str] = []
    pos = 0
    spans: list[tuple[int, int]] = []

    def emit(text: str) -> int:
        nonlocal pos
        if parts:
            pos += 1
        start = pos
        parts.append(text)
        pos += len(text)
        return start

    def emit_wrapped(wrapper: str, mention: str, extra: dict[str, str]) -> None:
        before, _, after = wrapper.partition("{mention}")
        if "{mention}" not in wrapper:
            raise ContractError(f"clause {wrapper!r} lacks a {{mention}} slot")
        head = _substitute(before, extra, "clause")
        tail = _substitute(after, extra, "clause")
        start = emit(head + mention + tail)
        spans.append((start + len(head), start + len(head) + len(mention)))

    emit(render_profile(sample.user, template))
    emit(template.history_header)
    items, labels = [], []
    for idx in chosen:
        item, y = sample.history[idx]
        judgment = template.liked if y else template.disliked
        emit_wrapped(template.history_item, render_mention(item, template), {"judgment": judgment})
        items.append(item)
        labels.append(y)
    emit_wrapped(template.target, render_mention(sample.target, template), {})
    items.append(sample.target)
    emit(template.question)
    return RenderedPrompt(" ".join(parts), spans, items, labels)


# --------------------------------------------------------------------------
# Tokenization


@dataclass
class TokenizedPrompt:
    ids: np.ndarray
    spans: list[tuple[int, int]]  # token [start, end) per item; last one is the target
    items: list[Item] = field(default_factory=list)
    answer_id: int | None = None

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def last_positions(self) -> list[int]:
        return [end - 1 for _, end in self.spans]


def tokenize(
    text: str,
    vocab: Vocabulary,
    char_spans: Sequence[tuple[int, int]] = (),
    add_bos: bool = True,
) -> TokenizedPrompt:
    """Word-level tokenization with punctuation split off.

    Character spans are mapped to the token range they cover; the span's
    last token index is the insertion anchor for soft tokens.
    """
    offset = 1 if add_bos else 0
    ids = [vocab.bos_id] if add_bos else []
    starts, ends = [], []
    for m in TOKEN_RE.finditer(text):
        ids.append(vocab.id(m.group()))
        starts.append(m.start())
        ends.append(m.end())
    spans = []
    for cs, ce in char_spans:
        lo = bisect.bisect_left(starts, cs)
        hi = bisect.bisect_left(starts, ce)
        assert lo < len(starts) and starts[lo] == cs, "span start inside a token"
        assert ends[hi - 1] <= ce, "span end inside a token"
        spans.append((lo + offset, hi + offset))
    return TokenizedPrompt(np.array(ids, dtype=np.int64), spans)


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i != vocab.bos_id)


def tokenize_sample(
    sample: InteractionSample,
    template: PromptTemplate,
    vocab: Vocabulary,
    mode: str = "recent",
    k: int = 8,
    index=None,
) -> TokenizedPrompt:
    rendered = render_hard_prompt(sample, template, mode, k, index)
    tp = tokenize(rendered.text, vocab, rendered.spans)
    tp.items = rendered.items
    tp.answer_id = vocab.yes_id if sample.label else vocab.no_id
    return tp


# --------------------------------------------------------------------------
# Soft prompts


def spa_project(projector: Mlp2, item_embeddings: np.ndarray) -> np.ndarray:
    """Map CRM item embeddings (rows) into the LM token-embedding space."""
    return mlp2_forward(projector, item_embeddings)


@dataclass
class AssembledPrompt:
    embeds: np.ndarray
    spans: list[tuple[int, int]]  # token spans in the spliced sequence, soft token included
    soft_positions: list[int]


def soft_positions_for(tp: TokenizedPrompt) -> list[int]:
    return [n + 1 + j for j, n in enumerate(tp.last_positions)]


def assemble_soft_prompt(
    tp: TokenizedPrompt, token_embeddings: np.ndarray, soft_tokens: np.ndarray | None
) -> AssembledPrompt:
    """Insert each item's soft token right after the item's last text token."""
    base = token_embeddings[tp.ids]
    if soft_tokens is None or len(tp.spans) == 0:
        if soft_tokens is not None and len(soft_tokens):
            raise ContractError(f"{len(soft_tokens)} soft tokens for 0 rendered items")
        return AssembledPrompt(base, list(tp.spans), [])
    soft_tokens = np.atleast_2d(soft_tokens)
    if len(soft_tokens) != len(tp.spans):
        raise ContractError(f"{len(soft_tokens)} soft tokens for {len(tp.spans)} rendered items")
    if soft_tokens.shape[1] != base.shape[1]:
        raise ContractError(f"soft token dim {soft_tokens.shape[1]} != embedding dim {base.shape[1]}")
    anchors = tp.last_positions
    out = np.insert(base, [n + 1 for n in anchors], soft_tokens, axis=0)
    spans = [(s + j, e + j + 1) for j, (s, e) in enumerate(tp.spans)]
    return AssembledPrompt(out, spans, soft_positions_for(tp))

