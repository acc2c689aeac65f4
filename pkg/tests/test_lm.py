import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rellax.adapter import CfLoraAdapter, InteractionSource
from rellax.lm import (
    LmConfig,
    ToyLm,
    answer_loss_from_logits,
    causal_lm_loss,
    extract_item_attention,
    lm_backward,
    lm_forward,
    next_token_loss,
    pointwise_score,
)
from rellax.numerics import ContractError, check_gradients
from rellax.prompt import Vocabulary


def matvec(W, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def layer_norm(x, g, b, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(x)]


def loop_transformer(model, tokens, adapters=None, ws=None):
    """Straight-line reference: one position, one head, one scalar at a time."""
    cfg = model.config
    p = {k: v.tolist() for k, v in model.params.items()}
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    adapters = adapters or {}
    xs = [[p["tok_emb"][t][c] + p["pos_emb"][i][c] for c in range(d)] for i, t in enumerate(tokens)]
    for l in range(cfg.n_layers):
        pre = f"layers.{l}"
        a = [layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.ln_eps) for x in xs]
        proj = {}
        for kind, w in (("q", "wq"), ("k", "wk"), ("v", "wv")):
            rows = [matvec(p[f"{pre}.{w}"], ai) for ai in a]
            host = f"{pre}.{kind}"
            if host in adapters:
                ad = adapters[host]
                for i, ai in enumerate(a):
                    u = matvec(ad.A.tolist(), ai)
                    z = matvec(ws[host].tolist(), u)
                    extra = matvec(ad.B.tolist(), z)
                    rows[i] = [rows[i][c] + ad.scale * extra[c] for c in range(d)]
            proj[kind] = rows
        o = [[0.0] * d for _ in xs]
        for h in range(H):
            sl = range(h * dh, (h + 1) * dh)
            for i in range(len(xs)):
                scores = [sum(proj["q"][i][c] * proj["k"][j][c] for c in sl) / math.sqrt(dh) for j in range(i + 1)]
                top = max(scores)
                ex = [math.exp(s - top) for s in scores]
                tot = sum(ex)
                for c in sl:
                    o[i][c] = sum(ex[j] / tot * proj["v"][j][c] for j in range(i + 1))
        xs = [[x[c] + v for c, v in enumerate(matvec(p[f"{pre}.wo"], oi))] for x, oi in zip(xs, o)]
        new = []
        for x in xs:
            c = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.ln_eps)
            f = [max(0.0, v + p[f"{pre}.ff1.b"][i]) for i, v in enumerate(matvec(p[f"{pre}.ff1.w"], c))]
            ff = [v + p[f"{pre}.ff2.b"][i] for i, v in enumerate(matvec(p[f"{pre}.ff2.w"], f))]
            new.append([x[k] + ff[k] for k in range(d)])
        xs = new
    y = layer_norm(xs[-1], p["lnf.g"], p["lnf.b"], cfg.ln_eps)
    return np.array(matvec(p["tok_emb"], y))


def random_model(seed, V=11, d=8, heads=2, layers=2, context=16):
    m = ToyLm.init(LmConfig(V, d, heads, layers, context), seed)
    g = np.random.default_rng(seed)
    # move norms and biases off their trivial init so the oracle exercises them
    for k, v in m.params.items():
        if k.endswith((".g", ".b")):
            v += g.normal(scale=0.2, size=v.shape)
    return m


def test_forward_matches_loop_oracle():
    m = random_model(0)
    toks = [3, 1, 4, 1, 5]
    assert np.abs(lm_forward(m, toks).logits - loop_transformer(m, toks)).max() < 1e-9


def test_forward_matches_loop_oracle_desk_scale():
    m = random_model(1, V=30, d=48, heads=2, layers=2, context=512)
    toks = [7, 2, 29, 0, 11]
    assert np.abs(lm_forward(m, toks).logits - loop_transformer(m, toks)).max() < 1e-9


def adapters_for(m, rng):
    out, ws = {}, {}
    for host in m.hosts():
        ad = CfLoraAdapter.init(host, rng, m.config.d_model, m.config.d_model, 2, 4.0, InteractionSource("identity", 2))
        ad.B[...] = rng.normal(scale=0.5, size=ad.B.shape)
        out[host] = ad
        ws[host] = rng.normal(size=(2, 2))
    return out, ws


def test_adapted_forward_matches_loop_oracle(rng):
    m = random_model(2)
    ads, ws = adapters_for(m, rng)
    toks = [0, 9, 2, 2, 7]
    got = lm_forward(m, toks, adapters=ads, ws=ws).logits
    assert np.abs(got - loop_transformer(m, toks, ads, ws)).max() < 1e-9


def test_zero_b_adapters_are_invisible(rng):
    m = random_model(3)
    ads, ws = adapters_for(m, rng)
    for ad in ads.values():
        ad.B[...] = 0.0
    toks = [1, 2, 3, 4]
    assert np.abs(lm_forward(m, toks, adapters=ads, ws=ws).logits - lm_forward(m, toks).logits).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=2, max_size=12), st.integers(0, 11), st.integers(0, 2**31))
def test_causality(tokens, p, seed):
    m = random_model(4)
    p = min(p, len(tokens) - 2)
    g = np.random.default_rng(seed)
    pert = list(tokens)
    for i in range(p + 1, len(pert)):
        pert[i] = int(g.integers(0, 11))
    a = lm_forward(m, tokens, all_logits=True).logits
    b = lm_forward(m, pert, all_logits=True).logits
    assert np.abs(a[: p + 1] - b[: p + 1]).max() < 1e-12


def test_single_token_uses_only_that_token():
    m = random_model(5)
    single = lm_forward(m, [6]).logits
    assert np.abs(single - lm_forward(m, [6, 1, 2], all_logits=True).logits[0]).max() < 1e-12


def test_embeds_path_equals_token_path():
    m = random_model(6)
    toks = [2, 8, 5]
    a = lm_forward(m, toks).logits
    b = lm_forward(m, embeds=m.params["tok_emb"][toks]).logits
    assert np.array_equal(a, b)


def test_context_limit_is_hard():
    m = random_model(7, context=6)
    lm_forward(m, [1] * 6)
    with pytest.raises(ContractError, match="context limit 6"):
        lm_forward(m, [1] * 7)
    with pytest.raises(ContractError):
        lm_forward(m, [])
    with pytest.raises(ContractError):
        lm_forward(m, [11])


def test_uniform_logits_loss_is_ln_v():
    loss, grad = answer_loss_from_logits(np.zeros(13), 4)
    assert loss == pytest.approx(math.log(13), abs=1e-15)
    assert abs(grad.sum()) < 1e-15


def test_saturated_answer_loss():
    s = np.zeros(9)
    s[2] = 100.0
    loss, _ = answer_loss_from_logits(s, 2)
    assert loss < 1e-40
    with pytest.raises(ContractError):
        answer_loss_from_logits(s, 9)


def test_causal_loss_matches_softmax_oracle():
    m = random_model(8)
    toks = [1, 4, 2, 6]
    s = lm_forward(m, toks).logits
    prob = math.exp(s[3]) / sum(math.exp(v) for v in s)
    assert causal_lm_loss(m, 3, tokens=toks) == pytest.approx(-math.log(prob), abs=1e-12)


def test_pointwise_worked_values():
    assert pointwise_score(np.array([0.0, 0.0]), 0, 1) == 0.5
    assert round(pointwise_score(np.array([1.0, 0.0]), 0, 1), 6) == 0.731059
    assert round(pointwise_score(np.array([0.0, 2.0]), 0, 1), 6) == 0.119203
    with pytest.raises(ContractError):
        pointwise_score(np.zeros(3), 1, 1)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-100, 100))
def test_pointwise_properties(a, b, c):
    s = np.array([a, b, 0.0])
    assert abs(pointwise_score(s, 0, 1) + pointwise_score(s, 1, 0) - 1.0) < 1e-12
    assert abs(pointwise_score(s, 0, 1) - pointwise_score(s + c, 0, 1)) < 1e-12
    e_a, e_b = math.exp(a - max(a, b)), math.exp(b - max(a, b))
    assert abs(pointwise_score(s, 0, 1) - e_a / (e_a + e_b)) < 1e-12


def test_base_gradients_on_small_model(rng):
    m = random_model(9, V=7, d=4, heads=2, layers=1, context=6)
    toks = [1, 3, 2, 5, 0]

    def loss_fn(p):
        loss, dlogits, out = next_token_loss(m, toks, keep_cache=True)
        return loss, lm_backward(m, out, dlogits).base

    rep = check_gradients(loss_fn, m.params)
    assert rep.passed, str(rep)


def test_adapter_and_embed_gradients(rng):
    m = random_model(10, V=7, d=4, heads=2, layers=2, context=8)
    ads, ws = adapters_for(m, rng)
    embeds = rng.normal(size=(5, 4))
    params = {"embeds": embeds, **{k: v for ad in ads.values() for k, v in ad.params().items()}}
    params.update({f"W:{h}": w for h, w in ws.items()})

    def loss_fn(p):
        out = lm_forward(m, embeds=p["embeds"], adapters=ads, ws=ws, keep_cache=True)
        loss, dlogits = answer_loss_from_logits(out.logits, 2)
        g = lm_backward(m, out, dlogits, ads, want_base=False)
        grads = {"embeds": g.d_embeds, **g.adapters}
        grads.update({f"W:{h}": w for h, w in g.dW.items()})
        return loss, grads

    rep = check_gradients(loss_fn, params)
    assert rep.passed, str(rep)


def test_attention_extract(rng):
    m = random_model(11)
    toks = [1, 2, 3, 4, 5, 6, 7]
    out = lm_forward(m, toks)
    P = out.attn[-1]
    assert np.abs(P[:, -1, :].sum(axis=-1) - 1.0).max() < 1e-12
    spans = [(1, 3), (3, 4), (5, 7)]
    ex = extract_item_attention(out, spans, ["a", "b"])
    for (s, e), mass in zip(spans, ex.masses):
        loop = sum(P[h, -1, j] for h in range(P.shape[0]) for j in range(s, e)) / P.shape[0]
        assert abs(mass - loop) < 1e-12
    assert (ex.masses >= 0).all() and ex.titles == ["a", "b"]
    # one history item covering every non-target position carries all the remaining mass
    whole = extract_item_attention(out, [(0, 6), (6, 7)])
    assert abs(whole.masses[0] + whole.target_mass - 1.0) < 1e-12
    with pytest.raises(ContractError):
        extract_item_attention(out, [(0, 9)])


def test_checkpoint_roundtrip(tmp_path, tiny):
    tiny.lm.save(tmp_path / "lm.ckpt")
    back = ToyLm.load(tmp_path / "lm.ckpt", tiny.lm.vocab)
    assert back.digest() == tiny.lm.digest() and back.config == tiny.lm.config
    with pytest.raises(ContractError, match="vocabulary"):
        ToyLm.load(tmp_path / "lm.ckpt", Vocabulary.build(["x"]))


def test_config_rejects_indivisible_heads():
    with pytest.raises(ContractError):
        LmConfig(10, d_model=6, n_heads=4)
