"""Component fully-interactive LoRA: ``delta = scale * B @ W @ A``.

``A`` (r x d_down) and ``B`` (d_up x r) are the usual LoRA factors. ``W``
(r x r) sets how strongly column ``B_i`` interacts with row ``A_j``:

* identity W        -> vanilla LoRA (only matching pairs, weight 1)
* block-diagonal W  -> N LoRA sets of rank r/N, each scaled by alpha_k
* projected W       -> every pair interacts, weights generated per sample
                       from the recommender representation ``h``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, Mlp2, Params, mlp2_backward, mlp2_forward, softmax

VARIANTS = ("identity", "block_diagonal", "projected")


@dataclass
class InteractionSource:
    """Where the interaction matrix ``W`` comes from.

    For ``block_diagonal`` the block weights are either fixed (``alphas``) or
    produced per sample by a gate perceptron followed by a softmax over the
    ``n_blocks`` sets (``projector`` mapping d_h -> n_blocks). For
    ``projected`` the projector maps d_h -> r*r.
    """

    variant: str
    rank: int
    n_blocks: int = 1
    alphas: np.ndarray | None = None
    projector: Mlp2 | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown interaction variant {self.variant!r}")
        if self.variant == "block_diagonal":
            if self.n_blocks < 1 or self.rank % self.n_blocks:
                raise ContractError(
                    f"block count {self.n_blocks} must divide rank {self.rank}"
                )
            if self.alphas is None and self.projector is None:
                self.alphas = np.ones(self.n_blocks)
            if self.alphas is not None and len(self.alphas) != self.n_blocks:
                raise ContractError(f"need {self.n_blocks} alphas, got {len(self.alphas)}")
            if self.projector is not None and self.projector.out_dim != self.n_blocks:
                raise ContractError("gate projector must output one logit per block")
        if self.variant == "projected":
            if self.projector is None:
                raise ContractError("projected interaction source needs a projector")
            if self.projector.out_dim != self.rank * self.rank:
                raise ContractError(
                    f"projector outputs {self.projector.out_dim} values, need r^2 = {self.rank ** 2}"
                )

    @property
    def needs_h(self) -> bool:
        return self.projector is not None

    def params(self, prefix: str) -> Params:
        return self.projector.params(f"{prefix}.proj") if self.projector is not None else {}


def block_weights(src: InteractionSource, h: np.ndarray | None) -> np.ndarray:
    if src.projector is None:
        return np.asarray(src.alphas, dtype=np.float64)
    return softmax(mlp2_forward(src.projector, h))


def make_interaction_matrix(src: InteractionSource, h: np.ndarray | None = None) -> np.ndarray:
    """Realize the r x r interaction matrix for one sample."""
    r = src.rank
    if src.needs_h and h is None:
        raise ContractError(f"{src.variant} interaction source needs the CRM representation h")
    if src.variant == "identity":
        return np.eye(r)
    if src.variant == "block_diagonal":
        alphas = block_weights(src, h)
        return np.diag(np.repeat(alphas, r // src.n_blocks))
    return mlp2_forward(src.projector, h).reshape(r, r)


def interaction_backward(
    src: InteractionSource, h: np.ndarray | None, dW: np.ndarray, prefix: str
) -> Params:
    """Push a gradient w.r.t. ``W`` back into the source's projector, if any."""
    if src.projector is None:
        return {}
    if src.variant == "projected":
        grads, _ = mlp2_backward(src.projector, h, dW.reshape(-1), f"{prefix}.proj")
        return grads
    block = src.rank // src.n_blocks
    dalpha = np.diag(dW).reshape(src.n_blocks, block).sum(axis=1)
    alphas = block_weights(src, h)
    dlogits = alphas * (dalpha - alphas @ dalpha)
    grads, _ = mlp2_backward(src.projector, h, dlogits, f"{prefix}.proj")
    return grads


def _check_shapes(A: np.ndarray, B: np.ndarray, W: np.ndarray) -> None:
    r = A.shape[0]
    if B.shape[1] != r or W.shape != (r, r):
        raise ContractError(f"shape mismatch: A {A.shape}, B {B.shape}, W {W.shape}")


def cflora_delta_composite(A: np.ndarray, B: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Weight update as the matrix product ``B @ W @ A`` (unscaled)."""
    _check_shapes(A, B, W)
    return B @ W @ A


def cflora_delta_decomposed(A: np.ndarray, B: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Same update accumulated as ``sum_ij w_ij * outer(B[:, i], A[j, :])``."""
    _check_shapes(A, B, W)
    r = A.shape[0]
    delta = np.zeros((B.shape[0], A.shape[1]))
    for i in range(r):
        for j in range(r):
            delta += W[i, j] * np.outer(B[:, i], A[j, :])
    return delta


@dataclass
class CfLoraAdapter:
    """Low-rank additive path attached to one host projection."""

    name: str
    A: np.ndarray
    B: np.ndarray
    alpha: float
    source: InteractionSource
    dropout: float = 0.0

    def __post_init__(self) -> None:
        r = self.A.shape[0]
        if self.B.shape[1] != r or self.source.rank != r:
            raise ContractError(f"{self.name}: rank mismatch A {self.A.shape} B {self.B.shape}")
        if r > min(self.A.shape[1], self.B.shape[0]):
            raise ContractError(f"{self.name}: rank {r} exceeds host dims")

    @classmethod
    def init(
        cls,
        name: str,
        rng: np.random.Generator,
        d_down: int,
        d_up: int,
        rank: int,
        alpha: float,
        source: InteractionSource,
        dropout: float = 0.0,
    ) -> "CfLoraAdapter":
        bound = 1.0 / np.sqrt(d_down)
        A = rng.uniform(-bound, bound, size=(rank, d_down))
        return cls(name, A, np.zeros((d_up, rank)), alpha, source, dropout)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def params(self) -> Params:
        out = {f"{self.name}.A": self.A, f"{self.name}.B": self.B}
        out.update(self.source.params(self.name))
        return out

    def interaction(self, h: np.ndarray | None) -> np.ndarray:
        return make_interaction_matrix(self.source, h)


def adapter_apply(adapter: CfLoraAdapter, W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Additive adapter output ``scale * B @ (W @ (A @ x))`` for a vector or rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != adapter.A.shape[1]:
        raise ContractError(f"{adapter.name}: input dim {x.shape[-1]} != {adapter.A.shape[1]}")
    u = x @ adapter.A.T
    z = u @ W.T
    return adapter.scale * (z @ adapter.B.T)


def adapter_forward_rows(
    adapter: CfLoraAdapter,
    W: np.ndarray,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, tuple]:
    """Row-batched adapter path with optional training-time dropout on ``A @ x``."""
    u = x @ adapter.A.T
    mask = None
    if rng is not None and adapter.dropout > 0.0:
        keep = 1.0 - adapter.dropout
        mask = (rng.random(u.shape) < keep) / keep
        u = u * mask
    z = u @ W.T
    return adapter.scale * (z @ adapter.B.T), (x, u, z, mask)


def adapter_backward_rows(
    adapter: CfLoraAdapter, W: np.ndarray, cache: tuple, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (dA, dB, dW, dx) for the row-batched path."""
    x, u, z, mask = cache
    s = adapter.scale
    dB = s * dout.T @ z
    dz = s * dout @ adapter.B
    dW = dz.T @ u
    du = dz @ W
    if mask is not None:
        du = du * mask
    dA = du.T @ x
    dx = du @ adapter.A
    return dA, dB, dW, dx
