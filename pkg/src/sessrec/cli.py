"""``sessrec`` command line: prepare, train, evaluate, grid, ablate, verify-lemma, consistency.

Exit codes: 0 success, 2 usage or configuration, 3 data, 4 numeric failure.
Outputs go under ``--out`` (default ``$SESSREC_OUT/<command>``, with
``SESSREC_OUT`` defaulting to ``runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .data import build_corpus, expand_prefixes, ingest, load_corpus, save_corpus, temporal_split
from .errors import ConfigError, ContractError, DataError, NumericError, ChecksumError
from .evaluation import consistency_report, evaluate, verify_lemma
from .model import ModelConfig, init_state, load_checkpoint
from .reports import format_table, write_manifest, write_report
from .trainer import TrainConfig, ablate, ablation_variants, grid_search, make_rng, train

logger = logging.getLogger("sessrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_TAU, DEFAULT_RHO = 0.07, 0.2


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seeds(text: str) -> list:
    """``"5"`` means seeds 0..4; ``"3,7,11"`` lists them."""
    try:
        parts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a count or comma-separated seeds, got {text!r}") from None
    if len(parts) == 1 and "," not in text:
        return list(range(parts[0]))
    return parts


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get("SESSREC_OUT", "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _emit(out: Path, text: str) -> None:
    print(text)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared flags


def _add_model_args(p):
    p.add_argument("--encoder", choices=["ave", "trm", "nonlinear"], default="trm")
    p.add_argument("--decoder", choices=["rdm", "dot"], default="rdm")
    p.add_argument("--tau", type=float, default=None, help=f"temperature for rdm (default {DEFAULT_TAU})")
    p.add_argument("--rho", type=float, default=None, help=f"candidate dropout for rdm (default {DEFAULT_RHO})")
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--hidden-dropout", type=float, default=0.2)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--causal", action="store_true")


def _add_train_args(p):
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=2048)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--grad-clip", type=float, default=None)


def _model_config(args, allow_dot_rdm_flags=False) -> ModelConfig:
    if args.decoder == "dot" and not allow_dot_rdm_flags and (args.tau is not None or args.rho is not None):
        raise UsageError("--tau/--rho only apply to --decoder rdm")
    return ModelConfig(
        d=args.d,
        encoder=args.encoder,
        n_layers=args.layers,
        n_heads=args.heads,
        d_ff=args.d_ff,
        decoder=args.decoder,
        tau=DEFAULT_TAU if args.tau is None else args.tau,
        rho=DEFAULT_RHO if args.rho is None else args.rho,
        max_len=args.max_len,
        hidden_dropout=args.hidden_dropout,
        causal=args.causal,
    )


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
        eval_k=args.k,
        grad_clip=args.grad_clip,
        **extra,
    )


def _load_split_corpus(path):
    corpus = load_corpus(_require_file(path))
    if corpus.splits is None:
        raise ContractError(f"{path} has no train/valid/test split; re-run prepare without --no-split")
    return corpus


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    ratios = _floats(args.ratios)
    src = _require_file(args.input)
    out = _out_dir(args)
    events = ingest(src, args.format, strict=args.strict)
    corpus = build_corpus(events, args.min_item_freq, args.min_session_len)
    if not args.no_split:
        corpus = temporal_split(corpus, tuple(int(r) if r.is_integer() else r for r in ratios))
    path = out / "corpus.corc"
    save_corpus(path, corpus)

    stats = corpus.stats()
    sections = {
        "ingest": {"events": len(events), "malformed_lines": events.n_malformed},
        "stats": stats,
    }
    if corpus.splits is not None:
        sections["splits"] = {s: corpus.splits.count(s) for s in ("train", "valid", "test")}
    write_report(out / "report.json", "prepare", sections)
    table = format_table(
        ["interactions", "items", "sessions", "avg_length"],
        [[stats["interactions"], stats["items"], stats["sessions"], round(stats["avg_length"], 2)]],
    )
    _emit(out, table)
    write_manifest(out, "prepare", vars_clean(args), [src], None, [path, out / "report.json"])
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_train(args) -> int:
    mcfg = _model_config(args)
    tcfg = _train_config(args)
    corpus = _load_split_corpus(args.corpus)
    out = _out_dir(args)
    record = train(corpus, mcfg, tcfg, out, label=f"{mcfg.encoder}/{mcfg.decoder}", evaluate_test=True)
    with open(out / "runlog.jsonl", "w", encoding="utf-8") as fh:
        for e in record.epochs:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
    summary = record.to_dict()
    epochs = summary.pop("epochs")
    for e in epochs:
        e.pop("seconds")
    summary["epochs"] = epochs
    summary.pop("best_checkpoint")
    summary.pop("last_checkpoint")
    write_report(out / "report.json", "train", {"run": summary, "test": record.test.as_dict()})
    rows = [[e.epoch, e.train_loss, e.valid_recall, e.valid_mrr] for e in record.epochs]
    text = format_table(["epoch", "train_loss", f"valid_R@{tcfg.eval_k}", f"valid_M@{tcfg.eval_k}"], rows)
    text += (
        f"\nbest epoch {record.best_epoch}; test R@{tcfg.eval_k} {record.test.recall_at_k:.6g}"
        f" M@{tcfg.eval_k} {record.test.mrr_at_k:.6g} ({record.test.n_examples} examples)"
    )
    _emit(out, text)
    write_manifest(
        out,
        "train",
        {"model": asdict(mcfg), "train": asdict(tcfg), "args": vars_clean(args)},
        [args.corpus],
        tcfg.seed,
        [out / "best.corm", out / "last.corm", out / "report.json"],
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = _require_file(args.checkpoint)
    corpus = _load_split_corpus(args.corpus)
    state, meta = load_checkpoint(ckpt)
    if args.k > corpus.n_items:
        raise UsageError(f"--k {args.k} exceeds the catalog size {corpus.n_items}")
    want = meta.get("vocab_sha256")
    have = corpus.vocab_hash()
    if state.n_items != corpus.n_items or (want is not None and want != have):
        raise ChecksumError(f"checkpoint vocabulary {want} ({state.n_items} items) != corpus {have} ({corpus.n_items} items)")
    out = _out_dir(args)
    examples = expand_prefixes(corpus, args.split, state.config.max_len)
    report = evaluate(state, examples, args.k, args.batch_size, split=args.split, label=meta.get("label", ""))
    write_report(out / "report.json", "evaluate", {"metrics": report.as_dict()})
    _emit(
        out,
        format_table(
            ["split", "examples", f"R@{args.k}", f"M@{args.k}"],
            [[args.split, report.n_examples, report.recall_at_k, report.mrr_at_k]],
        ),
    )
    write_manifest(out, "evaluate", vars_clean(args), [ckpt, args.corpus], None, [out / "report.json"])
    return EXIT_OK


def cmd_grid(args) -> int:
    if args.decoder != "rdm":
        raise UsageError("grid search over tau/rho needs --decoder rdm")
    mcfg = _model_config(args)
    tcfg = _train_config(args, taus=args.taus, rhos=args.rhos, jobs=args.jobs)
    corpus = _load_split_corpus(args.corpus)
    out = _out_dir(args)
    result = grid_search(corpus, mcfg, tcfg, out)
    rows = [
        [tau, rho, rec.best_epoch, rec.best_valid_mrr] for (tau, rho), rec in sorted(result.records.items())
    ]
    text = format_table(["tau", "rho", "best_epoch", f"valid_M@{tcfg.eval_k}"], rows)
    text += f"\nselected tau={result.best_tau:g} rho={result.best_rho:g}; test R@{tcfg.eval_k} {result.test.recall_at_k:.6g} M@{tcfg.eval_k} {result.test.mrr_at_k:.6g}"
    _emit(out, text)
    write_report(
        out / "report.json",
        "grid",
        {
            "cells": {f"tau={t:g},rho={r:g}": {"valid_mrr": rec.best_valid_mrr, "best_epoch": rec.best_epoch}
                      for (t, r), rec in result.records.items()},
            "failures": {f"tau={t:g},rho={r:g}": msg for (t, r), msg in result.failures.items()},
            "selected": {"tau": result.best_tau, "rho": result.best_rho},
            "test": result.test.as_dict(),
        },
    )
    write_manifest(out, "grid", {"model": asdict(mcfg), "train": asdict(tcfg)}, [args.corpus], tcfg.seed,
                   [out / "report.json"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    mcfg = _model_config(args, allow_dot_rdm_flags=True)
    tcfg = _train_config(args)
    corpus = _load_split_corpus(args.corpus)
    out = _out_dir(args)
    table = ablate(corpus, ablation_variants(mcfg), tcfg, args.seeds, out)
    _emit(out, table.format())
    write_report(
        out / "report.json",
        "ablate",
        {
            "rows": {f"{r.variant}@seed{r.seed}": r.test.as_dict() for r in table.rows},
            "summary": table.summary(),
        },
    )
    write_manifest(out, "ablate", {"model": asdict(mcfg), "train": asdict(tcfg), "seeds": args.seeds},
                   [args.corpus], None, [out / "report.json"])
    return EXIT_OK


def cmd_verify_lemma(args) -> int:
    out = _out_dir(args)
    rep = verify_lemma(args.n, args.m, args.d, args.norm_mode, make_rng(args.seed), args.scales)
    rows = [
        [s.scale, s.max_plain_discrepancy, s.max_literal_discrepancy, s.max_identity_error, s.pearson]
        for s in rep.strata
    ]
    text = format_table(
        ["logit_scale", "rewrite_err", "rewrite_err(|V|-1)", "dot_vs_sqdist_err", "pearson(ce,tuplet)"], rows
    )
    _emit(out, f"n={rep.n_instances} m={rep.m} d={rep.d} norm_mode={rep.norm_mode}\n{text}")
    write_report(
        out / "report.json",
        "verify-lemma",
        {
            "setup": {"n": rep.n_instances, "m": rep.m, "d": rep.d, "norm_mode": rep.norm_mode, "seed": args.seed},
            "strata": {f"{s.scale:g}": s.summary() for s in rep.strata},
        },
    )
    write_manifest(out, "verify-lemma", vars_clean(args), [], args.seed, [out / "report.json"])
    return EXIT_OK


def cmd_consistency(args) -> int:
    states = {}
    inputs = []
    for spec in args.checkpoint or []:
        label, _, path = spec.rpartition("=")
        path = _require_file(path)
        state, meta = load_checkpoint(path)
        states[label or meta.get("label") or path.stem] = state
        inputs.append(path)
    if args.fresh:
        rng = make_rng(args.seed)
        for enc in ("ave", "trm", "nonlinear"):
            cfg = ModelConfig(d=args.d, encoder=enc, d_ff=max(4, 2 * args.d), n_heads=1)
            states[f"fresh-{enc}"] = init_state(cfg, args.fresh, rng)
    if not states:
        raise UsageError("give at least one --checkpoint or --fresh N_ITEMS")
    n_items = min(s.n_items for s in states.values())
    if args.probes > n_items:
        raise UsageError(f"--probes {args.probes} exceeds the catalog size {n_items}")
    probes = sorted(make_rng(args.seed + 1).choice(n_items, size=args.probes, replace=False).tolist())
    out = _out_dir(args)
    rep = consistency_report(states, probes, args.k_max)
    rows = [
        [label, e.encoder, e.max_distance, float(e.spread.max()), e.nearest_item_accuracy]
        for label, e in rep.encoders.items()
    ]
    _emit(out, format_table(["model", "encoder", "max_dist_to_item", "max_spread", "nearest_item_acc"], rows))
    write_report(
        out / "report.json",
        "consistency",
        {
            "setup": {"probe_items": probes, "k_max": args.k_max},
            "encoders": {label: e.summary() for label, e in rep.encoders.items()},
        },
    )
    write_manifest(out, "consistency", vars_clean(args), inputs, args.seed, [out / "report.json"])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sessrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter a TSV session log and cache the corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="tsv", choices=["tsv"])
    p.add_argument("--min-item-freq", type=int, default=5)
    p.add_argument("--min-session-len", type=int, default=2)
    p.add_argument("--ratios", default="8,1,1")
    p.add_argument("--no-split", action="store_true", help="skip the temporal split (tiny logs)")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--corpus", required=True)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank metrics of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=2048)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="grid search over tau and rho")
    p.add_argument("--corpus", required=True)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--taus", type=_floats, default=(0.01, 0.05, 0.07, 0.1, 1.0))
    p.add_argument("--rhos", type=_floats, default=(0.0, 0.1, 0.2))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", help="CORE / w/o RDM / w/o RCE / SASRec-like over several seeds")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", type=_seeds, default=[0])
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify-lemma", help="cross-entropy vs tuplet-loss numeric check")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--norm-mode", choices=["unit", "free"], default="unit")
    p.add_argument("--scales", type=_floats, default=(0.01, 0.1, 1.0, 10.0))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_lemma)

    p = sub.add_parser("consistency", help="distance of [a]*k session embeddings from E[a]")
    p.add_argument("--checkpoint", action="append", help="PATH or LABEL=PATH; repeatable")
    p.add_argument("--fresh", type=int, metavar="N_ITEMS", help="add randomly initialised ave/trm/nonlinear models")
    p.add_argument("--d", type=int, default=32, help="embedding size for --fresh models")
    p.add_argument("--probes", type=int, default=15)
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_consistency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"sessrec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"sessrec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"sessrec {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"sessrec {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
