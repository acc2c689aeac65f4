"""Command-line entry point: ``python -m rellax <command> [options]``.

Every command works against one output directory (``--out``). Missing
prerequisites are built on the fly, so ``rellax eval --out runs/a`` on an
empty directory ingests, pretrains both frozen models, trains and evaluates.

Exit status: 0 success, 1 contract or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig, set_path
from .data import LoadError
from .numerics import ContractError
from .pipeline import VARIANTS, case_study, evaluate, sweep
from .subr import heterogeneity_table, retrieve_top_k_indices
from .workspace import Workspace, write_tsv

log = logging.getLogger("rellax")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted path, e.g. crm.epochs=4")
    common.add_argument("--data-path", help="directory holding MovieLens-1M .dat files")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--variant", choices=sorted(VARIANTS))
    model.add_argument("--shots", type=int)
    model.add_argument("--epochs", type=int)
    model.add_argument("--lr", type=float)
    model.add_argument("--k-text", type=int)
    model.add_argument("--l-id", type=int)
    model.add_argument("--max-samples", type=int, help="evaluate on the first N test samples")

    parser = argparse.ArgumentParser(prog="rellax", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("ingest", parents=[common], help="parse ratings and cache labeled samples")
    sub.add_parser("pretrain-lm", parents=[common], help="build the vocabulary and pretrain the base LM")
    sub.add_parser("encode", parents=[common], help="semantic item vectors and PCA reduction")
    sub.add_parser("pretrain-crm", parents=[common], help="train and freeze the conventional model")

    p = sub.add_parser("retrieve", parents=[common, model], help="dump recent vs retrieved histories")
    p.add_argument("--limit", type=int, default=20)

    p = sub.add_parser("heterogeneity", parents=[common], help="distinct-genre counts per sequence")
    p.add_argument("--mode", choices=["recent", "retrieved", "both"], default="both")
    p.add_argument("--k", type=_int_list, help="comma-separated K values")

    sub.add_parser("train", parents=[common, model], help="few-shot tuning of the trainable parts")

    p = sub.add_parser("eval", parents=[common, model], help="AUC / log loss / accuracy on the test split")
    p.add_argument("--zero-shot", action="store_true", help="score with untrained (B = 0) adapters")
    p.add_argument("--sweep-k", nargs="?", const="", type=str, metavar="K,K,...",
                   help="also re-evaluate over textual lengths")
    p.add_argument("--sweep-l", nargs="?", const="", type=str, metavar="L,L,...",
                   help="also re-evaluate over ID sequence lengths")

    p = sub.add_parser("case-study", parents=[common, model], help="attention mass per history item")
    p.add_argument("--n", type=int, help="number of test samples")

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File values first, then ``--set`` pairs, then dedicated flags."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for pair in args.set:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ContractError(f"--set expects KEY=VALUE, got {pair!r}")
        set_path(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.data_path:
        cfg.data.source = "movielens-1m"
        cfg.data.path = args.data_path
    if getattr(args, "variant", None):
        cfg.apply_variant(args.variant)
    for flag, key in (("shots", "shots"), ("epochs", "epochs"), ("lr", "lr"), ("k_text", "k_text"), ("l_id", "l_id")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg.train, key, value)
    if getattr(args, "max_samples", None) is not None:
        cfg.eval.max_samples = args.max_samples
    if cfg.train.k_text < 1 or cfg.train.l_id < 1:
        raise ContractError("k_text and l_id must be >= 1")
    return cfg


# --------------------------------------------------------------------------
# Commands


def cmd_ingest(ws: Workspace, args) -> None:
    samples = ws.samples()
    train, test = ws.split()
    rep = ws.load_report()
    pos = sum(s.label for s in samples)
    print(f"items {len(ws.items())}  users {len(ws.users())}  events {len(ws.events())}")
    print(f"samples {len(samples)} (train {len(train)}, test {len(test)}), positive rate {pos / len(samples):.3f}")
    if rep.malformed:
        print(f"skipped {len(rep.malformed)} malformed lines")


def cmd_pretrain_lm(ws: Workspace, args) -> None:
    lm = ws.lm()
    n = sum(a.size for a in lm.params.values())
    print(f"base LM: vocab {len(lm.vocab)}, {n} parameters, digest {lm.digest()[:16]}")


def cmd_encode(ws: Workspace, args) -> None:
    index, pca = ws.index()
    print(f"encoded {len(index.vectors)} items, d_z {pca.mean.shape[0]} -> d_q {pca.d_q}")


def cmd_pretrain_crm(ws: Workspace, args) -> None:
    crm = ws.crm()
    print(f"CRM ({crm.aggregator}) test AUC {ws.crm_test_auc():.4f}, digest {crm.digest()[:16]}")


def cmd_retrieve(ws: Workspace, args) -> None:
    index, _ = ws.index()
    k = ws.config.train.k_text
    rows = []
    for s in ws.test_set()[: args.limit]:
        hist = s.history_items
        recent = [it.item_id for it in hist[-k:]]
        picked = [hist[i].item_id for i in retrieve_top_k_indices(hist, s.target, k, index)]
        rows.append({
            "user": s.user.user_id, "target": s.target.item_id, "label": s.label,
            "recent": ",".join(map(str, recent)), "retrieved": ",".join(map(str, picked)),
        })
    write_tsv(ws.out / "retrieve.tsv", rows, [f"k: {k}"])
    for r in rows:
        print(f"user {r['user']:>5} target {r['target']:>5}  recent [{r['recent']}]  retrieved [{r['retrieved']}]")


def cmd_heterogeneity(ws: Workspace, args) -> None:
    ks = args.k or ws.config.eval.heterogeneity_k
    modes = ["recent", "retrieved"] if args.mode == "both" else [args.mode]
    index = ws.index()[0] if "retrieved" in modes else None
    rows = []
    for mode in modes:
        for rep in heterogeneity_table(ws.samples(), ks, mode, index, ws.config.subr.field):
            rows.append({"mode": mode, "k": rep.k, "mean": rep.mean, "n_sequences": rep.n_sequences})
    name = "heterogeneity.tsv" if args.mode == "both" else f"heterogeneity_{args.mode}.tsv"
    write_tsv(ws.out / name, rows, [f"field: {ws.config.subr.field}"])
    print("mode       K   mean    sequences")
    for r in rows:
        print(f"{r['mode']:<10}{r['k']:>2}  {r['mean']:.3f}  {r['n_sequences']}")


def cmd_train(ws: Workspace, args) -> None:
    system, result = ws.train()
    print(
        f"{system.config.variant}: {result.steps} steps in {result.runtime:.1f}s, "
        f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}"
    )


def _metrics_rows(variant: str, mode: str, report) -> list[dict]:
    return [{"variant": variant, "mode": mode, **report.metrics_row()}]


def cmd_eval(ws: Workspace, args) -> None:
    test = ws.test_set()
    mode = "zero-shot" if args.zero_shot else "trained"
    system = ws.system() if args.zero_shot else ws.trained_system()
    report = evaluate(system, test)
    variant = system.config.variant
    write_tsv(ws.out / "metrics.tsv", _metrics_rows(variant, mode, report))
    with open(ws.out / "scores.jsonl", "w", encoding="utf-8") as fh:
        for s, score in zip(test, report.scores):
            fh.write(json.dumps({"user": s.user.user_id, "target": s.target.item_id,
                                 "label": s.label, "score": round(float(score), 12)}) + "\n")
    print(f"{'variant':<12}{'mode':<11}{'AUC':>8}{'LogLoss':>9}{'ACC':>8}{'n':>6}")
    print(f"{variant:<12}{mode:<11}{report.auc:>8.4f}{report.logloss:>9.4f}{report.acc:>8.4f}{len(test):>6}")
    print(f"evaluated in {report.runtime:.1f}s")
    for flag, knob, default in (("sweep_k", "k_text", ws.config.eval.sweep_k), ("sweep_l", "l_id", ws.config.eval.sweep_l)):
        raw = getattr(args, flag)
        if raw is None:
            continue
        values = _int_list(raw) if raw else default
        rows = sweep(system, test, knob, values)
        write_tsv(ws.out / f"{flag}.tsv", rows, [f"variant: {variant}", f"mode: {mode}"])
        print(f"\n{knob:>6}{'AUC':>8}{'LogLoss':>9}{'tokens':>8}")
        for r in rows:
            print(f"{r[knob]:>6}{r['auc']:>8.4f}{r['logloss']:>9.4f}{r['mean_tokens']:>8.1f}")


def cmd_case_study(ws: Workspace, args) -> None:
    system = ws.trained_system()
    n = args.n or ws.config.eval.case_study
    rows = []
    for i, (s, score, extract) in enumerate(case_study(system, ws.test_set()[:n])):
        print(f"\nuser {s.user.user_id}, target {s.target.title!r}, label {s.label}, score {score:.3f}")
        for pos, (title, mass) in enumerate(zip(extract.titles, extract.masses)):
            rows.append({"case": i, "user": s.user.user_id, "target": s.target.item_id,
                         "label": s.label, "score": score, "position": pos, "title": title, "mass": mass})
            print(f"  {mass:.4f}  {title}")
        print(f"  {extract.target_mass:.4f}  (target) {s.target.title}")
        rows.append({"case": i, "user": s.user.user_id, "target": s.target.item_id, "label": s.label,
                     "score": score, "position": "target", "title": s.target.title, "mass": extract.target_mass})
    write_tsv(ws.out / "attention.tsv", rows, [f"variant: {system.config.variant}"])


HANDLERS = {
    "ingest": cmd_ingest,
    "pretrain-lm": cmd_pretrain_lm,
    "encode": cmd_encode,
    "pretrain-crm": cmd_pretrain_crm,
    "retrieve": cmd_retrieve,
    "heterogeneity": cmd_heterogeneity,
    "train": cmd_train,
    "eval": cmd_eval,
    "case-study": cmd_case_study,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "selftest":
            from .selftest import run_selftest

            return 0 if run_selftest(verbose=args.verbose) else 1
        cfg = resolve_config(args)
        ws = Workspace(args.out, cfg)
        t0 = time.perf_counter()
        HANDLERS[args.command](ws, args)
        ws.write_echo()
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return 0
    except (ContractError, LoadError, FloatingPointError, RuntimeError, FileNotFoundError) as exc:
        print(f"rellax {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
