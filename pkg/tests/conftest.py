from dataclasses import dataclass

import numpy as np
import pytest

from rellax.config import RunConfig
from rellax.crm import CrmModel, crm_pretrain
from rellax.data import build_samples, generate_synthetic_movielens, load_movielens_1m, split_samples
from rellax.pipeline import TrainConfig, build_rellax, build_vocabulary, new_lm
from rellax.prompt import TEMPLATES
from rellax.subr import SemanticIndex, ToyLmEncoder, encode_catalog
from rellax.workspace import Workspace


@dataclass
class Tiny:
    items: dict
    users: dict
    samples: list
    train: list
    test: list
    template: object
    lm: object
    crm: object
    index: object

    def system(self, variant="rellax", adapters=True, **kw):
        kw = {"rank": 2, "proj_hidden": 4, "k_text": 3, "l_id": 6, **kw}
        cfg = TrainConfig.for_variant(variant, **kw)
        return build_rellax(self.lm, self.crm, self.template, cfg, self.index, adapters=adapters)


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    """A small corpus with a tiny LM, a briefly trained CRM and a semantic index."""
    d = tmp_path_factory.mktemp("tiny")
    generate_synthetic_movielens(d, seed=11, n_users=16, n_items=24, events_per_user=(10, 14))
    items, users, events, _ = load_movielens_1m(d)
    samples = build_samples(events, items, users)
    train, test = split_samples(samples)
    template = TEMPLATES["movielens"]
    vocab = build_vocabulary(items.values(), users.values(), template)
    lm = new_lm(vocab, 4, d_model=8, n_heads=2, n_layers=2, context=256)
    crm = CrmModel.init(users, items, 5, d_e=4, d_h=4, hidden=6)
    crm_pretrain(crm, train, 2, 5, lr=1e-2)
    crm.freeze()
    raw = encode_catalog(items.values(), ToyLmEncoder(lm, template, vocab))
    index, _ = SemanticIndex.build(raw, 4)
    return Tiny(items, users, samples, train, test, template, lm, crm, index)


@pytest.fixture(scope="session")
def planted(tmp_path_factory):
    """Default-config workspace on the planted synthetic task, seed 0, with
    the base LM, CRM and semantic index already built."""
    ws = Workspace(tmp_path_factory.mktemp("planted"), RunConfig(seed=0))
    ws.lm(), ws.crm(), ws.index()
    return ws


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(n, ok, detail, hard=True):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {n:>2}: {status}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        if ok is None:
            pytest.skip(detail)
        if hard:
            assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
