"""Dense numerics shared by every stage: two-layer perceptrons, AdamW,
finite-difference gradient checks, seeded RNG streams, digests and the
named-tensor text format used for checkpoints.

Parameters are plain ``dict[str, np.ndarray]`` mappings of float64 arrays.
Every trainable component exposes such a mapping, so the optimizer, the
gradient checker and the checkpoint writer all work on the same shape.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]
LossAndGrad = Callable[[Params], tuple[float, Params]]


class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


# --------------------------------------------------------------------------
# RNG


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def rng_for(seed: int, *names: str) -> np.random.Generator:
    """Return a generator derived from ``seed`` and a path of stage/tensor names.

    The same (seed, names) pair always yields the same stream, and streams for
    different names are statistically independent.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for name in names:
        words.extend(_name_words(name))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def child_seed(seed: int, name: str) -> int:
    """Derive a 63-bit integer seed for a named stage."""
    return int(rng_for(seed, name).integers(0, 2**63 - 1))


# --------------------------------------------------------------------------
# Two-layer perceptron


@dataclass
class Mlp2:
    """``w2 @ relu(w1 @ x + b1) + b2``; weights stored as (out, in)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def __post_init__(self) -> None:
        h, d_in = self.w1.shape
        d_out, h2 = self.w2.shape
        if self.b1.shape != (h,) or h2 != h or self.b2.shape != (d_out,):
            raise ContractError(
                f"inconsistent Mlp2 shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        hidden_dim: int,
        out_dim: int,
        out_std: float | None = None,
    ) -> "Mlp2":
        """He-normal first layer; second layer He-normal unless ``out_std`` given."""
        w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(hidden_dim, in_dim))
        std2 = np.sqrt(1.0 / hidden_dim) if out_std is None else out_std
        w2 = rng.normal(0.0, std2, size=(out_dim, hidden_dim))
        return cls(w1, np.zeros(hidden_dim), w2, np.zeros(out_dim))

    @classmethod
    def zeros(cls, in_dim: int, hidden_dim: int, out_dim: int) -> "Mlp2":
        return cls(
            np.zeros((hidden_dim, in_dim)),
            np.zeros(hidden_dim),
            np.zeros((out_dim, hidden_dim)),
            np.zeros(out_dim),
        )

    def params(self, prefix: str) -> Params:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], prefix: str) -> "Mlp2":
        return cls(
            params[f"{prefix}.w1"],
            params[f"{prefix}.b1"],
            params[f"{prefix}.w2"],
            params[f"{prefix}.b2"],
        )

    def copy(self) -> "Mlp2":
        return Mlp2(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def mlp2_forward(m: Mlp2, x: np.ndarray) -> np.ndarray:
    """Evaluate the perceptron on a vector or on a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.in_dim:
        raise ContractError(f"Mlp2 expects input dim {m.in_dim}, got {x.shape[-1]}")
    hidden = np.maximum(x @ m.w1.T + m.b1, 0.0)
    return hidden @ m.w2.T + m.b2


def mlp2_backward(
    m: Mlp2, x: np.ndarray, dout: np.ndarray, prefix: str
) -> tuple[Params, np.ndarray]:
    """Gradients of a scalar w.r.t. the perceptron's parameters and its input.

    ``dout`` has the shape of ``mlp2_forward(m, x)``. Batched inputs have their
    parameter gradients summed over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    pre = x @ m.w1.T + m.b1
    hidden = np.maximum(pre, 0.0)
    x2 = np.atleast_2d(x)
    h2 = np.atleast_2d(hidden)
    d2 = np.atleast_2d(dout)
    dw2 = d2.T @ h2
    db2 = d2.sum(axis=0)
    dh = (d2 @ m.w2) * (np.atleast_2d(pre) > 0)
    dw1 = dh.T @ x2
    db1 = dh.sum(axis=0)
    dx = dh @ m.w1
    if x.ndim == 1:
        dx = dx[0]
    grads = {
        f"{prefix}.w1": dw1,
        f"{prefix}.b1": db1,
        f"{prefix}.w2": dw2,
        f"{prefix}.b2": db2,
    }
    return grads, dx


# --------------------------------------------------------------------------
# Small helpers


def sigmoid(x):
    """Numerically stable logistic function (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def add_grads(total: Params, new: Mapping[str, np.ndarray], scale: float = 1.0) -> None:
    for name, g in new.items():
        if name in total:
            total[name] += scale * g
        else:
            total[name] = scale * np.array(g, dtype=np.float64)


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    ``no_decay`` lists parameter names exempt from weight decay (embedding
    tables, biases, norms). The learning rate may be changed between steps
    by the caller to implement a schedule.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    no_decay: frozenset[str] = frozenset()
    step_count: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place. Parameters without a gradient are untouched."""
        for name, g in grads.items():
            if name not in params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ContractError(
                    f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}"
                )
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t if self.beta1 > 0 else 1.0
        bc2 = 1.0 - self.beta2**t if self.beta2 > 0 else 1.0
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and name not in self.no_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# --------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float]
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:g}, {self.n_checked} entries, worst {worst})"
        )


def check_gradients(
    loss_fn: LossAndGrad,
    params: Params,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    names: list[str] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences entry by entry.

    ``loss_fn(params)`` returns ``(loss, grads)``. The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)``. Central differences at
    step 1e-5 carry roughly 1e-11 of rounding noise, so entries whose true
    gradient is below the floor are effectively held to an absolute bound of
    ``tolerance * floor`` instead of a meaningless ratio.
    """
    loss0, grads = loss_fn(params)
    loss_again, _ = loss_fn(params)
    if loss0 != loss_again:
        raise ContractError(
            f"loss function is not deterministic: {loss0!r} then {loss_again!r}"
        )
    names = sorted(params) if names is None else names
    per_param: dict[str, float] = {}
    n_checked = 0
    for name in names:
        p = params[name]
        analytic = grads.get(name, np.zeros_like(p))
        worst = 0.0
        flat = p.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_fn(params)
            flat[i] = orig - step
            lm, _ = loss_fn(params)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        per_param[name] = worst
        n_checked += flat.size
    max_err = max(per_param.values(), default=0.0)
    return GradCheckReport(max_err, tolerance, per_param, n_checked)


# --------------------------------------------------------------------------
# Digests and named-tensor files


def digest(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and little-endian float64 bytes, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_tensors(
    path: str | Path, tensors: Mapping[str, np.ndarray], header: Mapping[str, str] | None = None
) -> str:
    """Write a textual named-tensor dump and return its digest.

    Layout: ``#``-prefixed header lines (``key: value``), then one line per
    tensor: ``name<TAB>d0,d1,...<TAB>v v v ...`` with 17 significant digits,
    which round-trips float64 exactly.
    """
    lines = ["# rellax-tensors v1", f"# digest: {digest(tensors)}"]
    for key, value in (header or {}).items():
        lines.append(f"# {key}: {value}")
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape)
        values = " ".join(f"{v:.17g}" for v in arr.reshape(-1))
        lines.append(f"{name}\t{shape}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return digest(tensors)


def load_tensors(path: str | Path) -> tuple[Params, dict[str, str]]:
    """Read a file written by :func:`save_tensors`; verifies the stored digest."""
    tensors: Params = {}
    header: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        if line.startswith("#"):
            if ":" in line:
                key, value = line[1:].split(":", 1)
                header[key.strip()] = value.strip()
            continue
        try:
            name, shape, values = line.split("\t")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            data = np.array([float(v) for v in values.split()], dtype=np.float64)
            tensors[name] = data.reshape(dims)
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: malformed tensor line ({exc})") from exc
    stored = header.get("digest")
    if stored is not None and stored != digest(tensors):
        raise ContractError(f"{path}: digest mismatch, file is corrupt or edited")
    return tensors, header
