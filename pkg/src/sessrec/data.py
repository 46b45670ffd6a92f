"""Session logs: ingestion, filtering, temporal splits, prefix expansion, batching.

Also owns the binary corpus cache (``CORC1``); the byte layout is described in
``docs/formats.md``.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ChecksumError, ConfigError, ContractError, EmptyCorpusError, ParseError, SplitError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
_SPLIT_CODE = {None: 0, "train": 1, "valid": 2, "test": 3}
_CODE_SPLIT = {v: k for k, v in _SPLIT_CODE.items()}
CACHE_MAGIC = b"CORC1"


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.session_id or not self.item_id:
            raise ParseError("session_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ParseError(f"timestamp must be non-negative, got {self.timestamp}")


class EventLog(list):
    """List of :class:`RawEvent` that also remembers how many lines were skipped."""

    def __init__(self, events=(), n_malformed: int = 0, first_malformed: Optional[int] = None):
        super().__init__(events)
        self.n_malformed = n_malformed
        self.first_malformed = first_malformed


def _is_int(text: str) -> bool:
    try:
        int(text)
    except ValueError:
        return False
    return True


def ingest(path, format: str = "tsv", strict: bool = False) -> EventLog:
    """Read ``session_id<TAB>item_id<TAB>timestamp`` lines.

    A first line whose third field is not an integer is taken as a header.
    Malformed lines are skipped and counted; with ``strict=True`` the first
    one raises :class:`ParseError`.
    """
    if format != "tsv":
        raise ConfigError(f"unsupported input format {format!r} (only 'tsv')")
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    events = []
    n_bad = 0
    first_bad = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if lineno == 1 and len(fields) == 3 and not _is_int(fields[2].strip()):
            continue
        try:
            if len(fields) != 3:
                raise ValueError(f"expected 3 tab-separated fields, got {len(fields)}")
            sid, iid, ts = (f.strip() for f in fields)
            events.append(RawEvent(sid, iid, int(ts)))
        except (ValueError, ParseError) as exc:
            if strict:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            n_bad += 1
            first_bad = first_bad or lineno

    if n_bad:
        logger.warning("%s: skipped %d malformed line(s), first at line %d", path, n_bad, first_bad)
    if not events:
        logger.warning("%s: no events read", path)
    return EventLog(events, n_bad, first_bad)


@dataclass
class SessionCorpus:
    """Filtered sessions over a dense item vocabulary ``0..n_items-1``."""

    items: list  # index -> raw item id
    sessions: list  # lists of item indices, in time order
    starts: list  # session start timestamps
    session_ids: list
    splits: Optional[list] = None
    item_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.item_index = {raw: i for i, raw in enumerate(self.items)}
        if len(self.item_index) != len(self.items):
            raise ContractError("duplicate raw item ids in vocabulary")

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def pad_index(self) -> int:
        return len(self.items)

    def __len__(self) -> int:
        return len(self.sessions)

    def split_sessions(self, split: str) -> list:
        if split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got {split!r}")
        if self.splits is None:
            raise ContractError("corpus has no split assignment; run temporal_split first")
        return [s for s, tag in zip(self.sessions, self.splits) if tag == split]

    def stats(self) -> dict:
        lengths = [len(s) for s in self.sessions]
        n = sum(lengths)
        return {
            "interactions": n,
            "items": self.n_items,
            "sessions": len(self.sessions),
            "avg_length": n / len(self.sessions) if self.sessions else 0.0,
        }

    def vocab_hash(self) -> str:
        h = hashlib.sha256()
        for raw in self.items:
            h.update(raw.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()


def build_corpus(events: Sequence[RawEvent], min_item_freq: int = 5, min_session_len: int = 2) -> SessionCorpus:
    """Group events into sessions and prune rare items and short sessions.

    Item-frequency and session-length filters alternate until neither removes
    anything, so both constraints hold at once.
    """
    if not events:
        raise EmptyCorpusError("no events to build a corpus from")

    grouped: dict = {}
    for order, ev in enumerate(events):
        grouped.setdefault(ev.session_id, []).append((ev.timestamp, order, ev.item_id))
    sessions = {sid: sorted(evs) for sid, evs in grouped.items()}

    while True:
        freq = Counter(item for evs in sessions.values() for _, _, item in evs)
        rare = {item for item, c in freq.items() if c < min_item_freq}
        changed = False
        if rare:
            sessions = {sid: [e for e in evs if e[2] not in rare] for sid, evs in sessions.items()}
            changed = True
        short = [sid for sid, evs in sessions.items() if len(evs) < min_session_len]
        for sid in short:
            del sessions[sid]
        if not changed and not short:
            break

    if not sessions:
        raise EmptyCorpusError(
            f"every session was filtered out (min_item_freq={min_item_freq}, min_session_len={min_session_len})"
        )

    kept = sorted((order, item) for evs in sessions.values() for _, order, item in evs)
    vocab: dict = {}
    for _, item in kept:
        vocab.setdefault(item, len(vocab))

    return SessionCorpus(
        items=list(vocab),
        sessions=[[vocab[item] for _, _, item in evs] for evs in sessions.values()],
        starts=[evs[0][0] for evs in sessions.values()],
        session_ids=list(sessions),
    )


def temporal_split(
    corpus: SessionCorpus, ratios=(8, 1, 1), min_sessions: int = 10, min_per_split: int = 1
) -> SessionCorpus:
    """Sort sessions by start time and cut them into train/valid/test.

    Train gets ``floor(N*r0/sum)`` sessions, valid ``floor(N*r1/sum)``, test
    the remainder.  Ties in start time keep corpus order.
    """
    n = len(corpus.sessions)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError(f"ratios must be three non-negative numbers, got {ratios}")
    if n < min_sessions:
        raise SplitError(f"need at least {min_sessions} sessions to split, have {n}")
    total = sum(ratios)
    n_train = (n * ratios[0]) // total
    n_valid = (n * ratios[1]) // total
    sizes = (n_train, n_valid, n - n_train - n_valid)
    for name, size in zip(SPLITS, sizes):
        if size < min_per_split:
            raise SplitError(f"{name} split would hold {size} sessions (< {min_per_split})")

    order = sorted(range(n), key=lambda i: corpus.starts[i])
    tags = ["train"] * sizes[0] + ["valid"] * sizes[1] + ["test"] * sizes[2]
    return SessionCorpus(
        items=list(corpus.items),
        sessions=[list(corpus.sessions[i]) for i in order],
        starts=[corpus.starts[i] for i in order],
        session_ids=[corpus.session_ids[i] for i in order],
        splits=tags,
    )


@dataclass(frozen=True)
class Example:
    prefix: tuple
    target: int


def expand_prefixes(corpus: SessionCorpus, split: str, max_len: int = 50) -> list:
    """One example per next-item position; prefixes keep their last ``max_len`` items."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    out = []
    for session in corpus.split_sessions(split):
        for k in range(1, len(session)):
            out.append(Example(tuple(session[max(0, k - max_len) : k]), session[k]))
    return out


@dataclass
class Batch:
    items: np.ndarray  # B×L int64, right-padded with pad_index
    lengths: np.ndarray  # B
    mask: np.ndarray  # B×L bool, True at real positions
    targets: np.ndarray  # B

    def __len__(self) -> int:
        return self.items.shape[0]


def make_batch(prefixes: Sequence[Sequence[int]], targets: Sequence[int], pad_index: int) -> Batch:
    lengths = np.array([len(p) for p in prefixes], dtype=np.int64)
    if (lengths < 1).any():
        raise ContractError("every prefix needs at least one item")
    width = int(lengths.max())
    items = np.full((len(prefixes), width), pad_index, dtype=np.int64)
    for row, p in enumerate(prefixes):
        items[row, : len(p)] = p
    mask = np.arange(width)[None, :] < lengths[:, None]
    return Batch(items, lengths, mask, np.asarray(targets, dtype=np.int64))


def batch_iter(
    examples: Sequence[Example],
    batch_size: int = 2048,
    shuffle: bool = False,
    rng: Optional[np.random.Generator] = None,
    pad_index: int = 0,
) -> Iterator[Batch]:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not examples:
        raise ContractError("batch_iter needs at least one example")
    order = np.arange(len(examples))
    if shuffle:
        if rng is None:
            raise ConfigError("shuffling needs an explicit rng")
        order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        yield make_batch([e.prefix for e in chunk], [e.target for e in chunk], pad_index)


# ---------------------------------------------------------------------------
# CORC1 cache


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


def corpus_to_bytes(corpus: SessionCorpus) -> bytes:
    parts = [CACHE_MAGIC, struct.pack("<QQ", corpus.n_items, len(corpus.sessions))]
    parts.extend(_pack_str(raw) for raw in corpus.items)
    splits = corpus.splits or [None] * len(corpus.sessions)
    for sid, start, tag, session in zip(corpus.session_ids, corpus.starts, splits, corpus.sessions):
        parts.append(_pack_str(sid))
        parts.append(struct.pack("<QBQ", start, _SPLIT_CODE[tag], len(session)))
        parts.append(np.asarray(session, dtype="<u8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<Q")
        return self.take(n).decode("utf-8")


def corpus_from_bytes(buf: bytes) -> SessionCorpus:
    r = _Reader(buf)
    if r.take(len(CACHE_MAGIC)) != CACHE_MAGIC:
        raise ChecksumError("not a CORC1 corpus cache (bad magic)")
    n_items, n_sessions = r.unpack("<QQ")
    items = [r.string() for _ in range(n_items)]
    sessions, starts, sids, tags = [], [], [], []
    for _ in range(n_sessions):
        sids.append(r.string())
        start, code, length = r.unpack("<QBQ")
        starts.append(start)
        tags.append(_CODE_SPLIT[code])
        sessions.append(np.frombuffer(r.take(8 * length), dtype="<u8").astype(np.int64).tolist())
    if r.pos != len(buf):
        raise ChecksumError(f"{len(buf) - r.pos} trailing bytes after corpus data")
    splits = None if all(t is None for t in tags) else tags
    return SessionCorpus(items, sessions, starts, sids, splits)


def save_corpus(path, corpus: SessionCorpus) -> None:
    Path(path).write_bytes(corpus_to_bytes(corpus))


def load_corpus(path) -> SessionCorpus:
    return corpus_from_bytes(Path(path).read_bytes())
