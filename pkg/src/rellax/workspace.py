"""On-disk run directory: every stage's artifact, rebuilt on demand.

Each stage records a fingerprint of the configuration it was built from in
``stages.json``. Asking for an artifact whose fingerprint is stale (or
missing) rebuilds it and everything downstream, so commands can be run in
any order against one output directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .crm import CrmModel, crm_forward_batch, crm_pretrain, id_batch
from .data import (
    InteractionSample,
    LoadReport,
    build_samples,
    generate_synthetic_movielens,
    load_movielens_1m,
    load_samples,
    save_samples,
    split_samples,
)
from .lm import ToyLm
from .metrics import compute_auc
from .numerics import ContractError, child_seed
from .pipeline import (
    Rellax,
    TrainResult,
    build_rellax,
    build_vocabulary,
    load_trainables,
    new_lm,
    pretrain_lm,
    pretraining_sequences,
    save_trainables,
    train_rellax,
)
from .prompt import TEMPLATES, PromptTemplate, Vocabulary
from .subr import (
    FileEncoder,
    PcaModel,
    SemanticIndex,
    ToyLmEncoder,
    encode_catalog,
    load_vectors,
    reduce,
    save_vectors,
)

log = logging.getLogger(__name__)

# stage -> (config sections, upstream stages)
STAGES = {
    "ingest": (("data",), ()),
    "lm": (("lm", "template"), ("ingest",)),
    "encode": (("subr",), ("lm",)),
    "crm": (("crm",), ("ingest",)),
    "train": (("train",), ("lm", "crm", "encode")),
}


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_tsv(path: Path, rows: list[dict], header_lines: list[str] = ()) -> None:
    """Tab-separated table; floats with 10 significant digits so reruns are byte-identical."""
    if not rows:
        path.write_text("".join(f"# {h}\n" for h in header_lines), encoding="utf-8")
        return
    cols = list(rows[0])
    out = [f"# {h}" for h in header_lines] + ["\t".join(cols)]
    for row in rows:
        out.append("\t".join(_fmt(row[c]) for c in cols))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


class Workspace:
    def __init__(self, out: str | Path, config: RunConfig):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self._cache: dict = {}
        self._stages_path = self.out / "stages.json"

    # -- bookkeeping ------------------------------------------------------
    def seed(self, stage: str) -> int:
        return child_seed(self.config.seed, stage)

    def fingerprint(self, stage: str) -> str:
        sections, upstream = STAGES[stage]
        parts = [str(self.config.seed), self.config.section_digest(*sections)]
        parts += [self.fingerprint(u) for u in upstream]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]

    def _recorded(self) -> dict:
        if self._stages_path.exists():
            return json.loads(self._stages_path.read_text(encoding="utf-8"))
        return {}

    def _fresh(self, stage: str, *files: str) -> bool:
        return self._recorded().get(stage) == self.fingerprint(stage) and all(
            (self.out / f).exists() for f in files
        )

    def _mark(self, stage: str) -> None:
        rec = self._recorded()
        rec[stage] = self.fingerprint(stage)
        self._stages_path.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def write_echo(self) -> None:
        """Config echo, root seed and digests of every frozen input built so far."""
        (self.out / "config.echo").write_text(self.config.echo(), encoding="utf-8")
        lines = [f"seed\t{self.config.seed}", f"config\t{hashlib.sha256(self.config.echo().encode()).hexdigest()}"]
        for name in ("samples.jsonl", "vocab.txt", "lm.ckpt", "vectors.tsv", "pca.txt", "crm.ckpt", "adapters.ckpt"):
            p = self.out / name
            if p.exists():
                lines.append(f"{name}\t{file_digest(p)}")
        if "lm" in self._cache:
            lines.append(f"lm.params\t{self._cache['lm'].digest()}")
        if "crm" in self._cache:
            lines.append(f"crm.params\t{self._cache['crm'].digest()}")
        (self.out / "digests.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @property
    def template(self) -> PromptTemplate:
        name = self.config.template
        if name in TEMPLATES:
            return TEMPLATES[name]
        return PromptTemplate.load(name)

    # -- ingest -----------------------------------------------------------
    def _raw(self):
        if "raw" in self._cache:
            return self._cache["raw"]
        d = self.config.data
        if d.source == "synthetic":
            src = self.out / "data"
            if not self._fresh("ingest", "data/ratings.dat"):
                src.mkdir(exist_ok=True)
                generate_synthetic_movielens(
                    src, seed=self.seed("data"), n_users=d.n_users, n_items=d.n_items, n_genres=d.n_genres
                )
        elif d.source == "movielens-1m":
            if not d.path:
                raise ContractError("data.source is movielens-1m but data.path is not set")
            src = Path(d.path)
        else:
            raise ContractError(f"unknown data source {d.source!r}")
        items, users, events, report = load_movielens_1m(src, encoding=d.encoding)
        self._cache["raw"] = (items, users, events, report)
        return self._cache["raw"]

    def samples(self) -> list[InteractionSample]:
        if "samples" in self._cache:
            return self._cache["samples"]
        items, users, events, report = self._raw()
        path = self.out / "samples.jsonl"
        if self._fresh("ingest", "samples.jsonl"):
            samples = load_samples(path, items, users)
        else:
            d = self.config.data
            samples = build_samples(events, items, users, d.label_rule, d.min_history)
            if not samples:
                raise ContractError("no user has enough history to form a sample")
            save_samples(path, samples)
            self._mark("ingest")
        self._cache["samples"] = samples
        return samples

    def load_report(self) -> LoadReport:
        return self._raw()[3]

    def items(self):
        return self._raw()[0]

    def users(self):
        return self._raw()[1]

    def events(self):
        return self._raw()[2]

    def split(self) -> tuple[list[InteractionSample], list[InteractionSample]]:
        return split_samples(self.samples())

    def test_set(self) -> list[InteractionSample]:
        test = self.split()[1]
        n = self.config.eval.max_samples
        return test if n is None else test[:n]

    # -- base LM ----------------------------------------------------------
    def lm(self) -> ToyLm:
        if "lm" in self._cache:
            return self._cache["lm"]
        train = self.split()[0]
        if self._fresh("lm", "lm.ckpt", "vocab.txt"):
            vocab = Vocabulary.load(self.out / "vocab.txt")
            lm = ToyLm.load(self.out / "lm.ckpt", vocab)
        else:
            c = self.config.lm
            t0 = time.perf_counter()
            vocab = build_vocabulary(self.items().values(), self.users().values(), self.template)
            lm = new_lm(vocab, self.seed("lm"), d_model=c.d_model, n_heads=c.n_heads, n_layers=c.n_layers, context=c.context)
            seqs = pretraining_sequences(
                train, list(self.items().values()), self.template, vocab, c.pretrain_k, c.pretrain_prompts,
                self.seed("lm-corpus"),
            )
            losses = pretrain_lm(lm, seqs, c.pretrain_epochs, self.seed("lm-pretrain"), lr=c.lr)
            vocab.save(self.out / "vocab.txt")
            lm.save(self.out / "lm.ckpt", extra={"config_sha": self.fingerprint("lm")})
            write_tsv(self.out / "lm_loss.tsv", [{"step": i, "loss": l} for i, l in enumerate(losses)])
            log.info("base LM pretrained on %d sequences in %.1fs", len(seqs), time.perf_counter() - t0)
            self._mark("lm")
        for arr in lm.params.values():
            arr.flags.writeable = False
        self._cache["lm"] = lm
        return lm

    # -- semantic index ---------------------------------------------------
    def raw_vectors(self) -> dict[int, np.ndarray]:
        if "vectors" in self._cache:
            return self._cache["vectors"]
        path = self.out / "vectors.tsv"
        if self._fresh("encode", "vectors.tsv", "pca.txt"):
            vectors = load_vectors(path)
        else:
            s = self.config.subr
            if s.vectors:
                encoder = FileEncoder.from_file(s.vectors)
            else:
                encoder = ToyLmEncoder(self.lm(), self.template, self.lm().vocab)
            vectors = encode_catalog(self.items().values(), encoder)
            save_vectors(path, vectors)
        self._cache["vectors"] = vectors
        return vectors

    def index(self) -> tuple[SemanticIndex, PcaModel]:
        if "index" in self._cache:
            return self._cache["index"]
        raw = self.raw_vectors()
        pca_path = self.out / "pca.txt"
        if self._fresh("encode", "vectors.tsv", "pca.txt"):
            pca = PcaModel.load(pca_path)
            index = SemanticIndex({i: reduce(pca, z) for i, z in raw.items()})
        else:
            index, pca = SemanticIndex.build(raw, self.config.subr.d_q)
            pca.save(pca_path)
            self._mark("encode")
        self._cache["index"] = (index, pca)
        return index, pca

    # -- CRM --------------------------------------------------------------
    def crm(self) -> CrmModel:
        if "crm" in self._cache:
            return self._cache["crm"]
        path = self.out / "crm.ckpt"
        train = self.split()[0]
        if self._fresh("crm", "crm.ckpt"):
            crm = CrmModel.load(path)
        else:
            c = self.config.crm
            crm = CrmModel.init(
                self.users(), self.items(), self.seed("crm"), d_e=c.d_e, d_h=c.d_h, hidden=c.hidden,
                aggregator=c.aggregator,
            )
            losses = crm_pretrain(crm, train, c.epochs, self.seed("crm-pretrain"), lr=c.lr, max_len=c.max_len)
            crm.save(path)
            write_tsv(self.out / "crm_loss.tsv", [{"step": i, "loss": l} for i, l in enumerate(losses)])
            self._mark("crm")
        crm.freeze()
        self._cache["crm"] = crm
        return crm

    def crm_test_auc(self) -> float:
        test = self.test_set()
        crm = self.crm()
        _, y = crm_forward_batch(crm, id_batch(crm, test, self.config.crm.max_len))
        return compute_auc([s.label for s in test], y)

    # -- ReLLaX system ----------------------------------------------------
    def train_config(self):
        return replace(self.config.train, seed=self.seed("train"))

    def system(self, with_adapters: bool = True) -> Rellax:
        cfg = self.train_config()
        index = self.index()[0] if cfg.subr else None
        return build_rellax(self.lm(), self.crm(), self.template, cfg, index, adapters=with_adapters)

    def train(self) -> tuple[Rellax, TrainResult]:
        system = self.system()
        result = train_rellax(system, self.split()[0])
        save_trainables(system, self.out / "adapters.ckpt", {"config_sha": self.fingerprint("train")})
        write_tsv(
            self.out / "loss.tsv", [{"step": i, "loss": l} for i, l in enumerate(result.losses)],
            [f"variant: {system.config.variant}"],
        )
        self._mark("train")
        self._cache["trained"] = system
        return system, result

    def trained_system(self) -> Rellax:
        """The trained system, training first if no fresh checkpoint exists."""
        if "trained" in self._cache:
            return self._cache["trained"]
        if self._fresh("train", "adapters.ckpt"):
            system = self.system()
            load_trainables(system, self.out / "adapters.ckpt")
            self._cache["trained"] = system
            return system
        return self.train()[0]

