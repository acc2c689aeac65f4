"""Built-in invariant suite behind ``rellax selftest``.

Each check builds its own small inputs, compares against a brute-force or
algebraic reference and returns a one-line verdict. Nothing here touches
an output directory.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .adapter import InteractionSource, cflora_delta_composite, cflora_delta_decomposed, make_interaction_matrix
from .crm import CrmModel, crm_loss_and_grads, crm_pretrain, id_batch
from .data import Item, build_samples, generate_synthetic_movielens, load_movielens_1m, split_samples
from .lm import ToyLm, lm_forward, pointwise_score
from .metrics import auc_pair_count, compute_auc, compute_logloss_acc
from .numerics import check_gradients, load_tensors, rng_for, save_tensors
from .pipeline import (
    TrainConfig,
    build_rellax,
    build_vocabulary,
    evaluate,
    new_lm,
    prepare,
    sample_loss_and_grads,
)
from .prompt import TEMPLATES
from .subr import SemanticIndex, heterogeneity_score, retrieve_top_k_indices


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _check_cflora() -> str:
    rng = rng_for(0, "selftest", "cflora")
    worst = 0.0
    for _ in range(300):
        r = int(rng.choice([1, 2, 4, 8]))
        d_in, d_out = (int(v) for v in rng.integers(r, 65, size=2))
        A, B, W = rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r)), rng.normal(size=(r, r))
        worst = max(worst, float(np.abs(cflora_delta_composite(A, B, W) - cflora_delta_decomposed(A, B, W)).max()))
    assert worst < 1e-10, worst
    return f"300 instances, max |diff| {worst:.1e}"


def _check_lattice() -> str:
    rng = rng_for(0, "selftest", "lattice")
    A, B = rng.normal(size=(4, 7)), rng.normal(size=(5, 4))
    vanilla = sum(np.outer(B[:, j], A[j]) for j in range(4))
    W = make_interaction_matrix(InteractionSource("identity", 4))
    assert np.abs(cflora_delta_composite(A, B, W) - vanilla).max() < 1e-12
    alphas = np.array([0.3, 1.7])
    W = make_interaction_matrix(InteractionSource("block_diagonal", 4, n_blocks=2, alphas=alphas))
    assert np.array_equal(W, np.diag([0.3, 0.3, 1.7, 1.7]))
    scaled = sum(alphas[j // 2] * np.outer(B[:, j], A[j]) for j in range(4))
    assert np.abs(cflora_delta_composite(A, B, W) - scaled).max() < 1e-12
    return "identity and block-diagonal reductions exact"


def _check_pointwise() -> str:
    rng = rng_for(0, "selftest", "pointwise")
    for _ in range(2000):
        s = rng.normal(scale=10, size=2)
        c = rng.normal(scale=10)
        a = pointwise_score(s, 0, 1)
        assert abs(a + pointwise_score(s, 1, 0) - 1.0) < 1e-12
        assert abs(a - pointwise_score(s + c, 0, 1)) < 1e-12
    for (m, n), want in (((0.0, 0.0), 0.5), ((1.0, 0.0), 0.731059), ((-1.0, 1.0), 0.119203)):
        assert round(pointwise_score(np.array([m, n]), 0, 1), 6) == want
    return "complement, shift invariance and worked values"


def _check_retrieval() -> str:
    rng = rng_for(0, "selftest", "retrieval")
    for trial in range(300):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, 17))
        base = rng.normal(size=(max(2, n // 3), 3))
        vecs = {i: base[rng.integers(len(base))] if trial % 2 else rng.normal(size=3) for i in range(1, n + 2)}
        index = SemanticIndex(vecs)
        items = {i: Item(i, f"t{i}", ()) for i in vecs}
        hist = [items[int(i)] for i in rng.integers(1, n + 2, size=n)]
        target = items[int(rng.integers(1, n + 2))]
        got = retrieve_top_k_indices(hist, target, k, index)
        t = vecs[target.item_id]
        sims = [float(vecs[h.item_id] @ t / (np.linalg.norm(vecs[h.item_id]) * np.linalg.norm(t))) for h in hist]
        ranked = sorted(range(n), key=lambda j: (-sims[j], -j, hist[j].item_id))
        assert got == sorted(ranked[: min(k, n)]), (got, ranked)
    return "300 instances match exhaustive sort"


def _check_metrics() -> str:
    rng = rng_for(0, "selftest", "metrics")
    for _ in range(300):
        n = int(rng.integers(2, 80))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, size=n) / 5.0
        assert abs(compute_auc(y, s) - auc_pair_count(y, s)) < 1e-12
    ll, _ = compute_logloss_acc([0, 1, 1], [0.5, 0.5, 0.5])
    assert abs(ll - math.log(2)) < 1e-12
    return "rank AUC equals pair counting; uniform log loss is ln 2"


def _check_heterogeneity() -> str:
    def seq(*genres):
        return [Item(i, "x", (("genres", (g,)),)) for i, g in enumerate(genres)]

    assert heterogeneity_score(seq("Comedy", "Fiction", "Comedy", "Family")) == 3
    assert heterogeneity_score(seq("Fiction", "Fiction", "Child", "Fiction")) == 2
    return "worked examples"


class _Tiny:
    """Miniature corpus, LM and CRM shared by the model-level checks."""

    def __init__(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        d = Path(self.tmp.name)
        generate_synthetic_movielens(d, seed=3, n_users=12, n_items=20, events_per_user=(10, 12))
        items, users, events, _ = load_movielens_1m(d)
        self.samples = build_samples(events, items, users)
        self.train, self.test = split_samples(self.samples)
        self.template = TEMPLATES["movielens"]
        vocab = build_vocabulary(items.values(), users.values(), self.template)
        self.lm = new_lm(vocab, 1, d_model=8, n_heads=2, n_layers=1, context=128)
        self.crm = CrmModel.init(users, items, 2, d_e=4, d_h=4, hidden=6)
        crm_pretrain(self.crm, self.train, 1, 2, lr=1e-2)
        self.crm.freeze()
        vecs = {i: self.lm.params["tok_emb"][self.lm.vocab.id(it.title.split()[1])] for i, it in items.items()}
        self.index = SemanticIndex(vecs)

    def system(self, variant: str, **kw):
        cfg = TrainConfig.for_variant(variant, rank=2, proj_hidden=4, k_text=3, l_id=6, **kw)
        return build_rellax(self.lm, self.crm, self.template, cfg, self.index)


def _check_causality(tiny: _Tiny) -> str:
    rng = rng_for(0, "selftest", "causal")
    toks = rng.integers(0, len(tiny.lm.vocab), size=20)
    base = lm_forward(tiny.lm, toks, all_logits=True).logits
    for p in (3, 10, 18):
        pert = toks.copy()
        pert[p + 1 :] = rng.integers(0, len(tiny.lm.vocab), size=len(toks) - p - 1)
        other = lm_forward(tiny.lm, pert, all_logits=True).logits
        assert np.abs(base[: p + 1] - other[: p + 1]).max() < 1e-12
    return "future tokens never change earlier logits"


def _check_crm_gradients(tiny: _Tiny) -> str:
    out = []
    for agg in ("attention", "mean"):
        crm = CrmModel.init(tiny.crm.user_row, tiny.crm.item_row, 5, d_e=3, d_h=4, hidden=5, aggregator=agg)
        batch = id_batch(crm, tiny.train[:6], 5)
        rep = check_gradients(lambda p: crm_loss_and_grads(crm, batch), crm.params)
        assert rep.passed, str(rep)
        out.append(f"{agg} {rep.max_rel_error:.1e}")
    return "BCE: " + ", ".join(out)


def _check_adapter_gradients(tiny: _Tiny) -> str:
    out = []
    for variant in ("rellax", "ilora"):
        system = tiny.system(variant)
        rng = rng_for(0, "selftest", "B", variant)
        for ad in system.adapters.values():
            ad.B[...] = rng.normal(scale=0.3, size=ad.B.shape)
        prep = prepare(system, tiny.train[:1])[0]
        params = system.trainable_params()
        rep = check_gradients(lambda p: sample_loss_and_grads(system, prep), params)
        assert rep.passed, str(rep)
        out.append(f"{variant} {rep.max_rel_error:.1e} over {rep.n_checked}")
    return "A, B, projectors, SPA: " + ", ".join(out)


def _check_zero_b(tiny: _Tiny) -> str:
    fixture = tiny.test[:50] if len(tiny.test) >= 10 else tiny.samples[:50]
    with_ad = evaluate(tiny.system("rellax", spa=False), fixture)
    plain = build_rellax(
        tiny.lm, tiny.crm, tiny.template,
        TrainConfig.for_variant("rellax", spa=False, k_text=3, l_id=6), tiny.index, adapters=False,
    )
    without = evaluate(plain, fixture)
    assert np.abs(with_ad.scores - without.scores).max() < 1e-12
    assert (with_ad.auc, with_ad.logloss, with_ad.acc) == (without.auc, without.logloss, without.acc)
    return f"{len(fixture)} samples scored identically with and without B = 0 adapters"


def _check_checkpoint(tiny: _Tiny) -> str:
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "lm.ckpt"
        tiny.lm.save(path)
        back = ToyLm.load(path, tiny.lm.vocab)
        assert back.digest() == tiny.lm.digest()
        save_tensors(Path(d) / "x.txt", {"a": np.array([0.1, 1 / 3])})
        t, _ = load_tensors(Path(d) / "x.txt")
        assert t["a"][1] == 1 / 3
    return "named-tensor files round-trip bit-exactly"


PURE_CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("cflora-equivalence", _check_cflora),
    ("degradation-lattice", _check_lattice),
    ("pointwise-scoring", _check_pointwise),
    ("retrieval-oracle", _check_retrieval),
    ("metric-oracles", _check_metrics),
    ("heterogeneity-examples", _check_heterogeneity),
]
MODEL_CHECKS: list[tuple[str, Callable[[_Tiny], str]]] = [
    ("lm-causality", _check_causality),
    ("crm-gradients", _check_crm_gradients),
    ("adapter-gradients", _check_adapter_gradients),
    ("zero-b-invariant", _check_zero_b),
    ("checkpoint-roundtrip", _check_checkpoint),
]


def run_checks() -> list[CheckResult]:
    results = []

    def run(name, fn, *args):
        t0 = time.perf_counter()
        try:
            detail, ok = fn(*args), True
        except Exception as exc:  # a failing check must not stop the suite
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))

    for name, fn in PURE_CHECKS:
        run(name, fn)
    tiny = _Tiny()
    try:
        for name, fn in MODEL_CHECKS:
            run(name, fn, tiny)
    finally:
        tiny.tmp.cleanup()
    return results


def run_selftest(verbose: bool = False) -> bool:
    results = run_checks()
    for r in results:
        status = "ok  " if r.ok else "FAIL"
        line = f"{status} {r.name:<24} {r.seconds:6.2f}s"
        if verbose or not r.ok:
            line += f"  {r.detail}"
        print(line)
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return failed == 0
