import math

import numpy as np
import pytest

from rellax.crm import (
    CrmModel,
    IdBatch,
    bce_from_logits,
    crm_forward,
    crm_forward_batch,
    crm_loss_and_grads,
    crm_pretrain,
    id_batch,
    lookup_item_embeddings,
)
from rellax.data import InteractionSample, Item, User
from rellax.numerics import AdamW, ContractError, check_gradients

ITEMS = {i: Item(i, f"m{i}", ()) for i in range(1, 11)}
USERS = {u: User(u, ()) for u in range(1, 5)}


def make_sample(user, hist_ids, target, label=1):
    hist = tuple((ITEMS[i], 1) for i in hist_ids)
    return InteractionSample(USERS[user], hist, ITEMS[target], label, 0, "train")


def small_model(agg="attention", seed=0, d_e=3, d_h=4, hidden=5):
    m = CrmModel.init(USERS, ITEMS, seed, d_e=d_e, d_h=d_h, hidden=hidden, aggregator=agg)
    g = np.random.default_rng(seed + 100)
    # the default 0.01 embeddings are too flat for meaningful attention checks
    m.params["item_emb"][...] = g.normal(size=m.params["item_emb"].shape)
    m.params["user_emb"][...] = g.normal(size=m.params["user_emb"].shape)
    return m


def loop_forward(model, sample):
    p = model.params
    d = model.d_e
    E = [p["item_emb"][model.item_index(it.item_id)] for it in sample.history_items]
    e_c = p["item_emb"][model.item_index(sample.target.item_id)]
    r = p["user_emb"][model.user_index(sample.user.user_id)]
    if model.aggregator == "mean":
        w = [1.0 / len(E)] * len(E)
    else:
        s = [sum(e[k] * e_c[k] for k in range(d)) / math.sqrt(d) for e in E]
        top = max(s)
        ex = [math.exp(v - top) for v in s]
        w = [v / sum(ex) for v in ex]
    pooled = [sum(w[l] * E[l][k] for l in range(len(E))) for k in range(d)]
    z = list(r) + pooled + list(e_c)
    hid = [max(0.0, p["f.b1"][i] + sum(p["f.w1"][i, j] * z[j] for j in range(len(z)))) for i in range(len(p["f.b1"]))]
    h = [p["f.b2"][i] + sum(p["f.w2"][i, j] * hid[j] for j in range(len(hid))) for i in range(len(p["f.b2"]))]
    logit = p["g.b"][0] + sum(p["g.w"][i] * h[i] for i in range(len(h)))
    return np.array(h), 1.0 / (1.0 + math.exp(-logit))


@pytest.mark.parametrize("agg", ["attention", "mean"])
def test_forward_matches_loop_oracle(agg):
    m = small_model(agg)
    for s in (make_sample(1, [1, 2, 3], 4), make_sample(2, [5, 5, 9, 1, 2], 7, 0), make_sample(3, [6], 6)):
        out = crm_forward(m, s)
        h, y = loop_forward(m, s)
        assert np.abs(out.h - h).max() < 1e-12
        assert abs(out.y_hat - y) < 1e-12
        assert 0.0 < out.y_hat < 1.0


@pytest.mark.parametrize("agg", ["attention", "mean"])
def test_constant_history_pools_to_that_vector(agg):
    m = small_model(agg)
    m.params["item_emb"][[1, 2, 3]] = m.params["item_emb"][1]
    a = crm_forward(m, make_sample(1, [2, 3, 4], 6))
    b = crm_forward(m, make_sample(1, [2], 6))
    assert np.abs(a.h - b.h).max() < 1e-12


def test_singleton_attention_weight_is_one():
    m = small_model("attention")
    s = make_sample(2, [7], 3)
    mean = small_model("mean")
    assert np.abs(crm_forward(m, s).h - crm_forward(mean, s).h).max() < 1e-12


def test_mean_pooling_permutation_invariant():
    m = small_model("mean")
    a = crm_forward(m, make_sample(1, [1, 4, 8, 2], 5))
    b = crm_forward(m, make_sample(1, [8, 2, 4, 1], 5))
    assert np.abs(a.h - b.h).max() < 1e-12


def test_padding_does_not_leak():
    m = small_model("attention")
    short, long = make_sample(1, [3, 4], 5), make_sample(2, [1, 2, 6, 7, 8], 9)
    h, y = crm_forward_batch(m, id_batch(m, [short, long]))
    assert np.abs(h[0] - crm_forward(m, short).h).max() < 1e-12


@pytest.mark.parametrize("agg", ["attention", "mean"])
def test_bce_gradients(agg):
    m = small_model(agg, d_e=2, d_h=3, hidden=4)
    batch = id_batch(m, [make_sample(1, [1, 2, 3], 4), make_sample(2, [4, 4, 5], 1, 0), make_sample(3, [9, 2], 2)])
    rep = check_gradients(lambda p: crm_loss_and_grads(m, batch), m.params)
    assert rep.passed, str(rep)


def test_bce_half_is_ln2():
    loss, _ = bce_from_logits(np.zeros(6), np.array([0, 1, 1, 0, 1, 0.0]))
    assert abs(loss - math.log(2)) < 1e-15


def test_lookup_rows():
    m = small_model()
    rows = lookup_item_embeddings(m, [ITEMS[2]], ITEMS[5])
    assert rows.shape == (2, m.d_e)
    rows = lookup_item_embeddings(m, [ITEMS[3], ITEMS[1], ITEMS[3]], ITEMS[5])
    assert np.array_equal(rows[0], rows[2])
    with pytest.raises(ContractError, match="99"):
        lookup_item_embeddings(m, [Item(99, "x", ())], ITEMS[1])


def test_empty_history_rejected():
    m = small_model()
    with pytest.raises(ContractError):
        crm_forward(m, InteractionSample(USERS[1], (), ITEMS[1], 1, 0, "train"))


def test_one_step_changes_only_touched_rows():
    m = small_model(hidden=16)
    before = m.params["item_emb"].copy()
    batch = id_batch(m, [make_sample(1, [2], 3)])
    _, grads = crm_loss_and_grads(m, batch)
    assert np.abs(grads["item_emb"]).max() > 0
    AdamW(lr=0.1, no_decay=m.no_decay).step(m.params, grads)
    changed = np.nonzero(np.any(m.params["item_emb"] != before, axis=1))[0]
    assert set(changed) == {m.item_index(2), m.item_index(3)}
    others = lookup_item_embeddings(m, [ITEMS[5], ITEMS[6]], ITEMS[7])
    assert np.array_equal(others, before[[m.item_index(5), m.item_index(6), m.item_index(7)]])


def test_zero_epochs_is_noop():
    m = CrmModel.init(USERS, ITEMS, 4, d_e=3, d_h=4, hidden=5)
    d0 = m.digest()
    assert crm_pretrain(m, [make_sample(1, [1, 2], 3)], 0, 1) == []
    assert m.digest() == d0


def separable_set():
    # items 1-5 are always liked, items 6-10 never
    g = np.random.default_rng(0)
    out = []
    for _ in range(200):
        hist = list(g.integers(1, 11, size=5))
        t = int(g.integers(1, 11))
        out.append(make_sample(int(g.integers(1, 5)), hist, t, int(t <= 5)))
    return out


def test_separable_set_is_learned():
    train = separable_set()
    m = CrmModel.init(USERS, ITEMS, 0, d_e=4, d_h=8, hidden=8)
    losses = crm_pretrain(m, train, 20, 0, lr=1e-2, batch_size=32)
    _, y_hat = crm_forward_batch(m, id_batch(m, train))
    labels = np.array([s.label for s in train], dtype=float)
    final = float(-(labels * np.log(y_hat) + (1 - labels) * np.log1p(-y_hat)).mean())
    assert losses[0] == pytest.approx(math.log(2), abs=0.02)
    assert final < 0.3


def test_pretrain_is_deterministic():
    train = separable_set()[:40]
    a = CrmModel.init(USERS, ITEMS, 0, d_e=3, d_h=4, hidden=4)
    b = CrmModel.init(USERS, ITEMS, 0, d_e=3, d_h=4, hidden=4)
    crm_pretrain(a, train, 2, 9, batch_size=8)
    crm_pretrain(b, train, 2, 9, batch_size=8)
    assert a.digest() == b.digest()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    m = CrmModel.init(USERS, ITEMS, 0, d_e=3, d_h=4, hidden=4)
    m.params["g.b"][0] = np.nan
    with pytest.raises(FloatingPointError, match="step 0"):
        crm_pretrain(m, separable_set()[:10], 1, 0)


def test_freeze_and_checkpoint(tmp_path):
    m = small_model()
    d = m.freeze()
    with pytest.raises(ValueError):
        m.params["item_emb"][0, 0] = 1.0
    with pytest.raises(ContractError):
        crm_pretrain(m, [make_sample(1, [1], 2)], 1, 0)
    assert m.save(tmp_path / "crm.ckpt") == d
    back = CrmModel.load(tmp_path / "crm.ckpt")
    assert back.digest() == d and back.aggregator == m.aggregator
    assert back.item_row == m.item_row
    s = make_sample(2, [1, 5], 6)
    assert crm_forward(back, s).y_hat == crm_forward(m, s).y_hat


def test_tiny_fixture_crm_is_frozen(tiny):
    assert tiny.crm.frozen
    assert isinstance(id_batch(tiny.crm, tiny.train[:3]), IdBatch)
