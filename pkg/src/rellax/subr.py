"""Semantic behavior retrieval: item encoding, PCA, cosine top-K, heterogeneity."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import InteractionSample, Item
from .numerics import ContractError, load_tensors, save_tensors
from .prompt import PromptTemplate, Vocabulary, render_item_description, tokenize


# --------------------------------------------------------------------------
# Encoders


class ToyLmEncoder:
    """Average of last-block hidden states over the item description tokens."""

    def __init__(self, model, template: PromptTemplate, vocab: Vocabulary):
        self.model = model
        self.template = template
        self.vocab = vocab

    @property
    def dim(self) -> int:
        return self.model.config.d_model

    def encode(self, item: Item) -> np.ndarray:
        from .lm import lm_forward

        text = render_item_description(item, self.template)
        tp = tokenize(text, self.vocab, add_bos=False)
        return lm_forward(self.model, tokens=tp.ids).hidden.mean(axis=0)


class FileEncoder:
    """Look up precomputed vectors (e.g. exported from a real LLM) by item id."""

    def __init__(self, vectors: Mapping[int, np.ndarray]):
        self.vectors = dict(vectors)
        dims = {len(v) for v in self.vectors.values()}
        if len(dims) > 1:
            raise ContractError(f"imported vectors have mixed dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def encode(self, item: Item) -> np.ndarray:
        try:
            return self.vectors[item.item_id]
        except KeyError:
            raise ContractError(f"no imported vector for item id {item.item_id}") from None

    @classmethod
    def from_file(cls, path: str | Path) -> "FileEncoder":
        return cls(load_vectors(path))


def encode_item(item: Item, encoder) -> np.ndarray:
    return np.asarray(encoder.encode(item), dtype=np.float64)


def encode_catalog(items: Iterable[Item], encoder) -> dict[int, np.ndarray]:
    items = list(items)
    if isinstance(encoder, FileEncoder):
        missing = [it.item_id for it in items if it.item_id not in encoder.vectors]
        if missing:
            raise ContractError(f"imported vectors missing item ids {missing[:20]}")
    return {it.item_id: encode_item(it, encoder) for it in items}


def save_vectors(path: str | Path, vectors: Mapping[int, np.ndarray]) -> None:
    """``item_id<TAB>v1,v2,...`` per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for iid in sorted(vectors):
            fh.write(f"{iid}\t" + ",".join(f"{v:.17g}" for v in vectors[iid]) + "\n")


def load_vectors(path: str | Path) -> dict[int, np.ndarray]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            iid, values = line.split("\t")
            out[int(iid)] = np.array([float(v) for v in values.split(",")])
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: malformed vector line ({exc})") from exc
    return out


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (d_q, d_z), orthonormal rows
    explained_variance: np.ndarray
    n_fitted: int

    @property
    def d_q(self) -> int:
        return self.components.shape[0]

    def save(self, path: str | Path) -> None:
        save_tensors(
            path,
            {"mean": self.mean, "components": self.components, "explained_variance": self.explained_variance},
            {"n_fitted": str(self.n_fitted)},
        )

    @classmethod
    def load(cls, path: str | Path) -> "PcaModel":
        t, header = load_tensors(path)
        return cls(t["mean"], t["components"], t["explained_variance"], int(header["n_fitted"]))


def default_dq(d_z: int, rank: int, cap: int = 32) -> int:
    return min(cap, d_z, rank)


def data_rank(X: np.ndarray, rtol: float = 1e-10) -> int:
    Xc = X - X.mean(axis=0)
    s = np.linalg.svd(Xc, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > rtol * s[0]).sum())


def fit_pca(X: np.ndarray, d_q: int | None = None, rtol: float = 1e-10) -> PcaModel:
    """PCA via SVD of the centered data matrix (rows are items).

    Each component is sign-fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank = int((s > rtol * s[0]).sum()) if s.size and s[0] > 0 else 0
    if d_q is None:
        d_q = default_dq(X.shape[1], rank)
    if d_q > rank:
        raise ContractError(f"d_q={d_q} exceeds the data rank; achievable rank is {rank}")
    comps = vt[:d_q].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = s[:d_q] ** 2 / max(len(X) - 1, 1)
    return PcaModel(mean, comps, var, len(X))


def reduce(model: PcaModel, z: np.ndarray) -> np.ndarray:
    """Project one vector (or rows) onto the fitted components."""
    return (np.asarray(z) - model.mean) @ model.components.T


# --------------------------------------------------------------------------
# Retrieval


class SemanticIndex:
    """Reduced semantic vectors keyed by item id."""

    def __init__(self, vectors: Mapping[int, np.ndarray]):
        self.vectors = {int(k): np.asarray(v, dtype=np.float64) for k, v in vectors.items()}

    def vector(self, item_id: int) -> np.ndarray:
        try:
            return self.vectors[item_id]
        except KeyError:
            raise ContractError(f"item {item_id} has no semantic vector") from None

    @classmethod
    def build(cls, raw: Mapping[int, np.ndarray], d_q: int | None = None) -> tuple["SemanticIndex", PcaModel]:
        ids = sorted(raw)
        pca = fit_pca(np.stack([raw[i] for i in ids]), d_q)
        reduced = reduce(pca, np.stack([raw[i] for i in ids]))
        return cls(dict(zip(ids, reduced))), pca


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine of the angle between two vectors; -1 if either has zero norm."""
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return -1.0
    return float(np.dot(x, y) / (nx * ny))


def _similarities(history: Sequence[Item], target: Item, index: SemanticIndex) -> np.ndarray:
    H = np.stack([index.vector(it.item_id) for it in history])
    t = index.vector(target.item_id)
    norms = np.linalg.norm(H, axis=1) * np.linalg.norm(t)
    sims = np.full(len(history), -1.0)
    ok = norms > 0
    sims[ok] = (H[ok] @ t) / norms[ok]
    return sims


def retrieve_top_k_indices(
    history: Sequence[Item], target: Item, k: int, index: SemanticIndex
) -> list[int]:
    """Positions of the K most cosine-similar history items, in chronological order.

    Ties go to the later history position, then to the smaller item id.
    """
    if not history:
        raise ContractError("cannot retrieve from an empty history")
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    n = len(history)
    if k >= n:
        return list(range(n))
    sims = _similarities(history, target, index)
    order = sorted(range(n), key=lambda j: (-sims[j], -j, history[j].item_id))
    return sorted(order[:k])


def retrieve_top_k(history: Sequence[Item], target: Item, k: int, index: SemanticIndex) -> list[Item]:
    return [history[j] for j in retrieve_top_k_indices(history, target, k, index)]


# --------------------------------------------------------------------------
# Heterogeneity


@dataclass
class HeterogeneityReport:
    k: int
    mode: str
    field: str
    mean: float
    n_sequences: int


def heterogeneity_score(sequence: Iterable[Item], field: str = "genres") -> int:
    """Number of distinct values of ``field`` across the sequence."""
    seen: set[str] = set()
    for item in sequence:
        if not item.has(field):
            raise ContractError(f"item {item.item_id} ({item.title!r}) has no attribute {field!r}")
        seen.update(item.values(field))
    return len(seen)


def heterogeneity_table(
    samples: Sequence[InteractionSample],
    ks: Sequence[int],
    mode: str,
    index: SemanticIndex | None = None,
    field: str = "genres",
) -> list[HeterogeneityReport]:
    """Mean heterogeneity of recent-K or retrieved-K sequences for each K.

    For each K only samples whose lifelong history has at least K items are
    averaged, so both modes always compare sequences of exactly K items.
    """
    rows = []
    for k in ks:
        scores = []
        for s in samples:
            hist = s.history_items
            if len(hist) < k:
                continue
            if mode == "recent":
                seq = hist[-k:]
            elif mode == "retrieved":
                if index is None:
                    raise ContractError("retrieved mode needs a semantic index")
                seq = retrieve_top_k(hist, s.target, k, index)
            else:
                raise ContractError(f"unknown mode {mode!r}")
            scores.append(heterogeneity_score(seq, field))
        mean = float(np.mean(scores)) if scores else float("nan")
        rows.append(HeterogeneityReport(k, mode, field, mean, len(scores)))
    return rows
