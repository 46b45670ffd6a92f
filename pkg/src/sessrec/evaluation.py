"""Ranking metrics, the cross-entropy/tuplet-loss harness, the consistency
probe, and the planted-cluster synthetic corpus."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Example, SessionCorpus, batch_iter, make_batch
from .errors import ConfigError, ContractError
from .model import ModelState, encode, score_all
from .tensor import Tensor


@dataclass
class MetricsReport:
    k: int
    recall_at_k: float
    mrr_at_k: float
    n_examples: int
    split: str = ""
    label: str = ""
    seed: Optional[int] = None

    @classmethod
    def from_ranks(cls, ranks: np.ndarray, k: int, **meta) -> "MetricsReport":
        ranks = np.asarray(ranks)
        hit = ranks <= k
        n = int(ranks.size)
        # fsum is correctly rounded, so the result does not depend on batch order
        recall = int(hit.sum()) / n if n else 0.0
        mrr = math.fsum(np.where(hit, 1.0 / ranks, 0.0).tolist()) / n if n else 0.0
        return cls(k, recall, mrr, n, **meta)

    def as_dict(self) -> dict:
        return asdict(self)


def target_ranks(scores: np.ndarray, targets) -> np.ndarray:
    """1-based rank of each target; ties go to the lower item index."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(scores.shape[0])
    mine = scores[rows, targets][:, None]
    above = (scores > mine).sum(axis=1)
    tied_before = ((scores == mine) & (np.arange(scores.shape[1])[None, :] < targets[:, None])).sum(axis=1)
    return 1 + above + tied_before


def rank_metrics(scores, targets, k: int = 20, **meta) -> MetricsReport:
    if isinstance(scores, Tensor):
        scores = scores.data
    m = np.shape(scores)[1]
    if k > m:
        raise ConfigError(f"K={k} exceeds the catalog size {m}")
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    return MetricsReport.from_ranks(target_ranks(scores, targets), k, **meta)


def evaluate(
    state: ModelState, examples: Sequence[Example], k: int = 20, batch_size: int = 2048, **meta
) -> MetricsReport:
    """Full-catalog R@K / M@K of ``state`` on ``examples`` (evaluation mode)."""
    if k > state.n_items:
        raise ConfigError(f"K={k} exceeds the catalog size {state.n_items}")
    ranks = []
    for batch in batch_iter(examples, batch_size, pad_index=state.pad_index):
        h_s = encode(batch, state, training=False).h_s
        ranks.append(target_ranks(score_all(h_s, state).data, batch.targets))
    return MetricsReport.from_ranks(np.concatenate(ranks), k, **meta)


# ---------------------------------------------------------------------------
# cross-entropy vs. tuplet loss


@dataclass
class LemmaStratum:
    scale: float
    cross_entropy: np.ndarray
    rewrite_plain: np.ndarray  # log(1 + sum exp(x)), no (|V|-1) factor
    rewrite_literal: np.ndarray  # log(1 + (|V|-1) sum exp(x))
    tuplet: np.ndarray
    max_plain_discrepancy: float
    max_literal_discrepancy: float
    max_identity_error: float
    pearson: float

    def summary(self) -> dict:
        return {
            "scale": self.scale,
            "max_plain_discrepancy": self.max_plain_discrepancy,
            "max_literal_discrepancy": self.max_literal_discrepancy,
            "max_identity_error": self.max_identity_error,
            "pearson": self.pearson,
        }


@dataclass
class LemmaReport:
    n_instances: int
    m: int
    d: int
    norm_mode: str
    strata: list = field(default_factory=list)

    def stratum(self, scale: float) -> LemmaStratum:
        for s in self.strata:
            if s.scale == scale:
                return s
        raise KeyError(scale)

    @property
    def max_plain_discrepancy(self) -> float:
        return max(s.max_plain_discrepancy for s in self.strata)

    @property
    def max_identity_error(self) -> float:
        return max(s.max_identity_error for s in self.strata)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def verify_lemma(
    n_instances: int = 1000,
    m: int = 50,
    d: int = 16,
    norm_mode: str = "unit",
    rng: Optional[np.random.Generator] = None,
    scales: Sequence[float] = (0.01, 0.1, 1.0, 10.0),
) -> LemmaReport:
    """Compare dot-product cross-entropy with the tuplet surrogate on random draws.

    ``scale`` bounds the logits: in ``unit`` mode items have unit norm and the
    session vector has norm ``scale``; in ``free`` mode both are Gaussian with
    those expected norms, so item norms differ and the squared-distance step
    is no longer exact.
    """
    if m < 2:
        raise ConfigError(f"need at least two items, got m={m}")
    if norm_mode not in ("unit", "free"):
        raise ConfigError(f"norm_mode must be 'unit' or 'free', got {norm_mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = LemmaReport(n_instances, m, d, norm_mode)

    for scale in scales:
        items = rng.normal(size=(n_instances, m, d))
        session = rng.normal(size=(n_instances, d))
        if norm_mode == "unit":
            items = _unit_rows(items)
            session = scale * _unit_rows(session)
        else:
            items = items / np.sqrt(d)
            session = scale * session / np.sqrt(d)
        pos = rng.integers(0, m, size=n_instances)
        rows = np.arange(n_instances)

        logits = np.einsum("nmd,nd->nm", items, session)
        lp = logits[rows, pos]
        mx = logits.max(axis=1)
        ce = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1)) - lp

        neg = np.ones((n_instances, m), dtype=bool)
        neg[rows, pos] = False
        diff = np.where(neg, logits - lp[:, None], -np.inf)  # h_s.h- - h_s.h+
        plain = np.log1p(np.exp(diff).sum(axis=1))
        literal = np.log1p((m - 1) * np.exp(diff).sum(axis=1))

        sq = ((items - session[:, None, :]) ** 2).sum(axis=2)  # ||h_s - h_v||^2
        sq_pos = sq[rows, pos]
        tuplet = np.where(neg, sq_pos[:, None] - sq + 2.0, 0.0).sum(axis=1)
        identity_err = np.abs(np.where(neg, diff - (sq_pos[:, None] - sq) / 2.0, 0.0)).max()

        report.strata.append(
            LemmaStratum(
                scale=float(scale),
                cross_entropy=ce,
                rewrite_plain=plain,
                rewrite_literal=literal,
                tuplet=tuplet,
                max_plain_discrepancy=float(np.abs(plain - ce).max()),
                max_literal_discrepancy=float(np.abs(literal - ce).max()),
                max_identity_error=float(identity_err),
                pearson=float(np.corrcoef(ce, tuplet)[0, 1]),
            )
        )
    return report


# ---------------------------------------------------------------------------
# representation consistency


@dataclass
class EncoderConsistency:
    label: str
    encoder: str
    distances: np.ndarray  # probes × k_max, ||h_s - E[a]|| for session [a]*k
    spread: np.ndarray  # probes, max pairwise distance among the k_max sessions
    nearest_item_accuracy: float

    @property
    def max_distance(self) -> float:
        return float(self.distances.max())

    def summary(self) -> dict:
        return {
            "encoder": self.encoder,
            "max_distance": self.max_distance,
            "mean_distance": float(self.distances.mean()),
            "max_spread": float(self.spread.max()),
            "nearest_item_accuracy": self.nearest_item_accuracy,
        }


@dataclass
class ConsistencyReport:
    probe_items: list
    k_max: int
    encoders: dict = field(default_factory=dict)


def consistency_report(
    states: Mapping[str, ModelState], probe_items: Sequence[int], k_max: int = 5
) -> ConsistencyReport:
    """Encode sessions ``[a]*k`` (k = 1..k_max) and measure how far they land from ``E[a]``."""
    report = ConsistencyReport(list(map(int, probe_items)), k_max)
    for label, state in states.items():
        for a in probe_items:
            if not 0 <= a < state.n_items:
                raise ContractError(f"probe item {a} outside the vocabulary of {label!r}")
        prefixes = [[a] * k for a in probe_items for k in range(1, k_max + 1)]
        batch = make_batch(prefixes, [0] * len(prefixes), state.pad_index)
        h = encode(batch, state, training=False).h_s.data.reshape(len(probe_items), k_max, -1)
        table = state.item_embedding.data[: state.n_items]
        probes = np.asarray(probe_items)
        dist = np.linalg.norm(h - table[probes][:, None, :], axis=2)
        spread = np.linalg.norm(h[:, :, None, :] - h[:, None, :, :], axis=3).max(axis=(1, 2))
        to_items = np.linalg.norm(h[:, :, None, :] - table[None, None, :, :], axis=3)
        nearest = to_items.argmin(axis=2) == probes[:, None]
        report.encoders[label] = EncoderConsistency(
            label, state.config.encoder, dist, spread, float(nearest.mean())
        )
    return report


# ---------------------------------------------------------------------------
# planted-cluster corpus


def cluster_of(item: int, n_items: int, n_clusters: int) -> int:
    return item // (n_items // n_clusters)


def bayes_optimal_recall(n_items: int, n_clusters: int, k: int, intra_cluster_prob: float = 1.0) -> float:
    """Best achievable R@K when the target's cluster is known from the prefix.

    Scoring the true cluster's items first is optimal: a next item is in
    cluster with probability ``p + (1-p)/n_clusters`` and otherwise uniform.
    """
    size = n_items // n_clusters
    p_in = intra_cluster_prob + (1.0 - intra_cluster_prob) * size / n_items
    if k <= size:
        return p_in * k / size
    return p_in + (1.0 - p_in) * (k - size) / (n_items - size)


def make_synthetic_corpus(
    n_items: int = 200,
    n_clusters: int = 10,
    n_sessions: int = 5000,
    session_len_range=(3, 10),
    intra_cluster_prob: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    min_item_freq: int = 5,
) -> SessionCorpus:
    """Sessions that each follow one latent cluster of items.

    Item ``i`` belongs to cluster ``i // (n_items // n_clusters)`` and keeps
    index ``i`` in the vocabulary.  Each event is drawn from the session's
    cluster with probability ``intra_cluster_prob``, otherwise uniformly.
    """
    lo, hi = session_len_range
    if n_clusters < 1 or n_items % n_clusters:
        raise ConfigError(f"n_items={n_items} is not divisible by n_clusters={n_clusters}")
    if lo < 2 or hi < lo:
        raise ConfigError(f"session lengths must satisfy 2 <= lo <= hi, got {session_len_range}")
    if not 0.0 <= intra_cluster_prob <= 1.0:
        raise ConfigError(f"intra_cluster_prob must lie in [0, 1], got {intra_cluster_prob}")
    if n_sessions < 1:
        raise ConfigError("n_sessions must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    size = n_items // n_clusters

    sessions, starts = [], []
    clock = 0
    for _ in range(n_sessions):
        c = rng.integers(n_clusters)
        n = int(rng.integers(lo, hi + 1))
        in_cluster = rng.random(n) < intra_cluster_prob
        local = c * size + rng.integers(size, size=n)
        anywhere = rng.integers(n_items, size=n)
        sessions.append(np.where(in_cluster, local, anywhere).tolist())
        starts.append(clock)
        clock += n

    freq = np.bincount(np.concatenate(sessions), minlength=n_items)
    if freq.min() < min_item_freq:
        raise ConfigError(
            f"item {int(freq.argmin())} occurs {int(freq.min())} times (< {min_item_freq}); use more sessions"
        )
    return SessionCorpus(
        items=[f"item{i}" for i in range(n_items)],
        sessions=sessions,
        starts=starts,
        session_ids=[f"s{i}" for i in range(n_sessions)],
    )
