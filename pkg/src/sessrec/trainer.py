"""Training loop, early stopping, (tau, rho) grid search and the ablation matrix."""

from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import SessionCorpus, batch_iter, expand_prefixes
from .errors import ConfigError, ContractError, NumericError, SessRecError
from .evaluation import MetricsReport, evaluate
from .model import ModelConfig, ModelState, batch_loss, init_state, save_checkpoint
from .optim import AdamState, adam_step
from .tensor import Tape

logger = logging.getLogger(__name__)

DEFAULT_TAUS = (0.01, 0.05, 0.07, 0.1, 1.0)
DEFAULT_RHOS = (0.0, 0.1, 0.2)


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 2048
    max_epochs: int = 300
    patience: int = 5
    seed: int = 0
    eval_k: int = 20
    taus: tuple = DEFAULT_TAUS
    rhos: tuple = DEFAULT_RHOS
    eval_batch_size: int = 2048
    grad_clip: Optional[float] = None
    jobs: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not self.taus or not self.rhos:
            raise ConfigError("tau and rho grids must be non-empty")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        self.taus = tuple(self.taus)
        self.rhos = tuple(self.rhos)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Defaults sized for synthetic corpora on a laptop CPU."""
        return cls(**{"batch_size": 256, "max_epochs": 50, **overrides})


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator owned by the caller."""
    return np.random.Generator(np.random.Philox(seed))


class EarlyStopping:
    """Stop once the metric has not beaten its best value for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True if it improved on the best so far."""
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_recall: float
    valid_mrr: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class RunRecord:
    label: str
    model_config: dict
    train_config: dict
    epochs: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_checkpoint: Optional[str] = None
    last_checkpoint: Optional[str] = None
    test: Optional[MetricsReport] = None
    state: Optional[ModelState] = field(default=None, repr=False, compare=False)

    @property
    def best_valid_mrr(self) -> float:
        return next(e.valid_mrr for e in self.epochs if e.epoch == self.best_epoch)

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_checkpoint": self.best_checkpoint,
            "last_checkpoint": self.last_checkpoint,
            "test": self.test.as_dict() if self.test else None,
        }
        return out


def _param_norms(state: ModelState) -> dict:
    return {k: float(np.linalg.norm(v.data)) for k, v in state.params.items()}


def _clip(grads: dict, max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm:
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * (max_norm / total)


def train(
    corpus: SessionCorpus,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    label: str = "",
    evaluate_test: bool = False,
) -> RunRecord:
    """Fit one model; the returned record's ``state`` holds the best-epoch weights."""
    if corpus.splits is None:
        raise ContractError("corpus has no train/valid/test split")
    train_ex = expand_prefixes(corpus, "train", model_config.max_len)
    valid_ex = expand_prefixes(corpus, "valid", model_config.max_len)
    if not train_ex or not valid_ex:
        raise ContractError("train and valid splits must each yield at least one example")
    if train_config.eval_k > corpus.n_items:
        raise ConfigError(f"K={train_config.eval_k} exceeds the catalog size {corpus.n_items}")

    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(train_config.seed).spawn(3)
    shuffle_rng, drop_rng = make_rng(shuffle_seq), make_rng(drop_seq)
    state = init_state(model_config, corpus.n_items, make_rng(init_seq))
    adam = AdamState(lr=train_config.lr)
    pad = state.pad_index

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"vocab_sha256": corpus.vocab_hash(), "label": label}
    record = RunRecord(label, asdict(model_config), asdict(train_config))
    stopper = EarlyStopping(train_config.patience)
    best = state.snapshot()

    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        batches = batch_iter(train_ex, train_config.batch_size, shuffle=True, rng=shuffle_rng, pad_index=pad)
        for bi, batch in enumerate(batches):
            state.zero_grad()
            try:
                with Tape() as tape:
                    loss = batch_loss(batch, state, training=True, rng=drop_rng)
                    tape.backward(loss)
                grads = {k: p.grad for k, p in state.params.items()}
                for k, g in grads.items():
                    if g is not None and not np.isfinite(g).all():
                        raise NumericError(f"non-finite gradient for {k}")
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {bi}: {exc}; parameter norms {_param_norms(state)}"
                ) from exc
            if grads["item_embedding"] is not None:
                grads["item_embedding"][pad] = 0.0
            if train_config.grad_clip is not None:
                _clip(grads, train_config.grad_clip)
            adam_step(state.params, grads, adam)
            tape.clear()
            total += loss.item() * len(batch)
            count += len(batch)

        valid = evaluate(state, valid_ex, train_config.eval_k, train_config.eval_batch_size)
        record.epochs.append(
            EpochRecord(epoch, total / count, valid.recall_at_k, valid.mrr_at_k, time.perf_counter() - t0)
        )
        logger.info(
            "%s epoch %d loss %.5f valid R@%d %.4f M@%d %.4f",
            label, epoch, total / count, valid.k, valid.recall_at_k, valid.k, valid.mrr_at_k,
        )
        if stopper.update(epoch, valid.mrr_at_k):
            best = state.snapshot()
            if out is not None:
                save_checkpoint(out / "best.corm", state, {**meta, "epoch": epoch})
        if stopper.should_stop:
            break

    if out is not None:
        save_checkpoint(out / "last.corm", state, {**meta, "epoch": record.epochs[-1].epoch})
        record.best_checkpoint = str(out / "best.corm")
        record.last_checkpoint = str(out / "last.corm")
    state.restore(best)
    state.zero_grad()
    record.best_epoch = stopper.best_epoch
    record.state = state
    if evaluate_test:
        record.test = evaluate(
            state,
            expand_prefixes(corpus, "test", model_config.max_len),
            train_config.eval_k,
            train_config.eval_batch_size,
            split="test",
            label=label,
            seed=train_config.seed,
        )
    return record


# ---------------------------------------------------------------------------
# grid search


def cell_seed(seed: int, tau: float, rho: float) -> int:
    bits = [struct.unpack("<Q", struct.pack("<d", float(x)))[0] for x in (tau, rho)]
    return int(np.random.SeedSequence([seed, *bits]).generate_state(1, np.uint64)[0])


@dataclass
class GridResult:
    best_tau: float
    best_rho: float
    records: dict  # (tau, rho) -> RunRecord
    failures: dict  # (tau, rho) -> error message
    test: MetricsReport

    @property
    def best(self) -> RunRecord:
        return self.records[(self.best_tau, self.best_rho)]


def _grid_cell(args):
    corpus, model_config, train_config, out_dir, label = args
    try:
        return train(corpus, model_config, train_config, out_dir, label)
    except SessRecError as exc:
        return exc


def grid_search(
    corpus: SessionCorpus, model_config: ModelConfig, train_config: TrainConfig, out_dir=None
) -> GridResult:
    """One run per (tau, rho); the winner has the best validation M@K.

    Ties prefer the smaller rho, then the smaller tau.  Test metrics are
    computed for the winner only.
    """
    cells = [(tau, rho) for tau in train_config.taus for rho in train_config.rhos]
    jobs = []
    for tau, rho in cells:
        cfg = model_config.replace(tau=tau, rho=rho)
        tcfg = replace(train_config, seed=cell_seed(train_config.seed, tau, rho))
        cell_dir = None if out_dir is None else Path(out_dir) / f"tau{tau:g}_rho{rho:g}"
        jobs.append((corpus, cfg, tcfg, cell_dir, f"tau={tau:g},rho={rho:g}"))

    if train_config.jobs > 1:
        with ProcessPoolExecutor(train_config.jobs) as pool:
            results = list(pool.map(_grid_cell, jobs))
    else:
        results = [_grid_cell(job) for job in jobs]

    records, failures = {}, {}
    for cell, res in zip(cells, results):
        if isinstance(res, Exception):
            logger.warning("grid cell tau=%g rho=%g failed: %s", *cell, res)
            failures[cell] = str(res)
        else:
            records[cell] = res
    if not records:
        raise NumericError(f"every grid cell failed: {failures}")

    tau, rho = min(records, key=lambda c: (-records[c].best_valid_mrr, c[1], c[0]))
    winner = records[(tau, rho)]
    test = evaluate(
        winner.state,
        expand_prefixes(corpus, "test", model_config.max_len),
        train_config.eval_k,
        train_config.eval_batch_size,
        split="test",
        label=winner.label,
        seed=train_config.seed,
    )
    winner.test = test
    return GridResult(tau, rho, records, failures, test)


# ---------------------------------------------------------------------------
# ablations

VARIANTS = {
    "CORE": ("trm", "rdm"),
    "CORE-w/o-RDM": ("trm", "dot"),
    "CORE-w/o-RCE": ("nonlinear", "rdm"),
    "SASRec-like": ("nonlinear", "dot"),
}


def ablation_variants(base: ModelConfig) -> dict:
    """The four encoder x decoder cells, sharing every other setting of ``base``."""
    return {name: base.replace(encoder=enc, decoder=dec) for name, (enc, dec) in VARIANTS.items()}


@dataclass
class AblationRow:
    variant: str
    seed: int
    test: MetricsReport
    best_epoch: int


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)

    def variants(self) -> list:
        return list(dict.fromkeys(r.variant for r in self.rows))

    def summary(self) -> dict:
        out = {}
        for name in self.variants():
            rec = np.array([r.test.recall_at_k for r in self.rows if r.variant == name])
            mrr = np.array([r.test.mrr_at_k for r in self.rows if r.variant == name])
            out[name] = {
                "n": int(rec.size),
                "recall_mean": float(rec.mean()),
                "recall_sd": float(rec.std(ddof=1)) if rec.size > 1 else 0.0,
                "mrr_mean": float(mrr.mean()),
                "mrr_sd": float(mrr.std(ddof=1)) if mrr.size > 1 else 0.0,
            }
        return out

    def format(self) -> str:
        k = self.rows[0].test.k if self.rows else 20
        lines = [f"{'variant':<14} {'seed':>5} {'R@' + str(k):>8} {'M@' + str(k):>8}"]
        for r in self.rows:
            lines.append(f"{r.variant:<14} {r.seed:>5} {r.test.recall_at_k:>8.4f} {r.test.mrr_at_k:>8.4f}")
        lines.append("")
        lines.append(f"{'variant':<14} {'R@' + str(k) + ' mean±sd':>18} {'M@' + str(k) + ' mean±sd':>18}")
        for name, s in self.summary().items():
            lines.append(
                f"{name:<14} {s['recall_mean']:>9.4f}±{s['recall_sd']:<8.4f} {s['mrr_mean']:>9.4f}±{s['mrr_sd']:<8.4f}"
            )
        return "\n".join(lines)


def ablate(
    corpus: SessionCorpus,
    configs: Mapping[str, ModelConfig],
    train_config: TrainConfig,
    seeds: Sequence[int] = (0,),
    out_dir=None,
) -> AblationTable:
    """Train every named config under every seed on the same corpus; report test metrics."""
    table = AblationTable()
    for seed in seeds:
        tcfg = replace(train_config, seed=seed)
        for name, cfg in configs.items():
            run_dir = None if out_dir is None else Path(out_dir) / f"{name.replace('/', '')}_seed{seed}"
            rec = train(corpus, cfg, tcfg, run_dir, label=name, evaluate_test=True)
            table.rows.append(AblationRow(name, seed, rec.test, rec.best_epoch))
    return table
