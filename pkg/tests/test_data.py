import itertools
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sessrec.data import (
    Example,
    RawEvent,
    SessionCorpus,
    batch_iter,
    build_corpus,
    corpus_from_bytes,
    corpus_to_bytes,
    expand_prefixes,
    ingest,
    load_corpus,
    save_corpus,
    temporal_split,
)
from sessrec.errors import ChecksumError, ContractError, EmptyCorpusError, ParseError, SplitError

# Six sessions; filtering must cascade: d and e are rare, removing e leaves
# S6 = [c] which is dropped, and only then does c fall to 4 occurrences.
TOY_LOG = [
    ("S1", "a", 10), ("S1", "b", 11), ("S1", "c", 12),
    ("S2", "a", 20), ("S2", "b", 21), ("S2", "c", 22),
    ("S3", "a", 30), ("S3", "b", 31), ("S3", "c", 32), ("S3", "d", 33),
    ("S4", "a", 40), ("S4", "b", 41), ("S4", "c", 42), ("S4", "e", 43),
    ("S5", "a", 50), ("S5", "b", 51), ("S5", "d", 52),
    ("S6", "c", 60), ("S6", "e", 61),
]


def toy_events():
    return [RawEvent(*row) for row in TOY_LOG]


def enumerate_fixed_point(events, min_freq, min_len):
    """Largest item set whose induced sessions satisfy both constraints, by brute force."""
    sessions = {}
    for ev in sorted(events, key=lambda e: e.timestamp):
        sessions.setdefault(ev.session_id, []).append(ev.item_id)
    items = sorted({ev.item_id for ev in events})
    for size in range(len(items), 0, -1):
        for keep in itertools.combinations(items, size):
            keep = set(keep)
            kept = {s: [i for i in seq if i in keep] for s, seq in sessions.items()}
            kept = {s: seq for s, seq in kept.items() if len(seq) >= min_len}
            counts = {i: sum(seq.count(i) for seq in kept.values()) for i in keep}
            if all(c >= min_freq for c in counts.values()):
                return kept
    return {}


class TestIngest:
    def test_empty_file(self, tmp_path, caplog):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        with caplog.at_level(logging.WARNING):
            assert ingest(path) == []
        assert "no events" in caplog.text

    def test_three_lines(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("s1\tx\t5\ns1\ty\t6\ns2\tx\t9\n")
        assert ingest(path) == [RawEvent("s1", "x", 5), RawEvent("s1", "y", 6), RawEvent("s2", "x", 9)]

    def test_header_is_detected(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("session_id\titem_id\ttimestamp\ns1\tx\t5\n")
        assert ingest(path) == [RawEvent("s1", "x", 5)]

    def test_strict_mode_names_bad_line(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("s1\tx\t5\ns1\ty\tsoon\n")
        with pytest.raises(ParseError, match=":2:"):
            ingest(path, strict=True)

    def test_lenient_mode_counts_bad_lines(self, tmp_path, caplog):
        path = tmp_path / "log.tsv"
        path.write_text("s1\tx\t5\ns1\ty\tsoon\nbroken line\ns2\tz\t-3\ns2\tw\t8\n")
        with caplog.at_level(logging.WARNING):
            events = ingest(path)
        assert len(events) == 2
        assert events.n_malformed == 3 and events.first_malformed == 2
        assert "3 malformed" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            ingest(tmp_path / "nope.tsv")


class TestBuildCorpus:
    def test_pair_with_frequent_items_is_kept(self):
        events = [RawEvent(f"s{i}", item, i * 10 + j) for i in range(5) for j, item in enumerate("ab")]
        corpus = build_corpus(events)
        assert corpus.sessions == [[0, 1]] * 5

    def test_single_item_session_dropped(self):
        events = [RawEvent(f"s{i}", item, i * 10 + j) for i in range(5) for j, item in enumerate("ab")]
        events.append(RawEvent("lonely", "a", 100))
        corpus = build_corpus(events)
        assert "lonely" not in corpus.session_ids

    def test_cascading_fixed_point_hand_computed(self):
        corpus = build_corpus(toy_events())
        assert corpus.items == ["a", "b"]
        assert corpus.session_ids == ["S1", "S2", "S3", "S4", "S5"]
        assert corpus.sessions == [[0, 1]] * 5
        assert corpus.starts == [10, 20, 30, 40, 50]

    def test_fixed_point_matches_enumeration_oracle(self):
        events = toy_events()
        oracle = enumerate_fixed_point(events, 5, 2)
        corpus = build_corpus(events)
        got = {sid: [corpus.items[i] for i in s] for sid, s in zip(corpus.session_ids, corpus.sessions)}
        assert got == oracle

    @given(st.lists(st.tuples(st.integers(0, 7), st.sampled_from("abcdef")), min_size=1, max_size=60),
           st.integers(1, 4))
    def test_fixed_point_property(self, rows, min_freq):
        events = [RawEvent(f"s{s}", item, t) for t, (s, item) in enumerate(rows)]
        oracle = enumerate_fixed_point(events, min_freq, 2)
        if not oracle:
            with pytest.raises(EmptyCorpusError):
                build_corpus(events, min_freq)
            return
        corpus = build_corpus(events, min_freq)
        got = {sid: [corpus.items[i] for i in s] for sid, s in zip(corpus.session_ids, corpus.sessions)}
        assert got == oracle
        counts = np.bincount(np.concatenate(corpus.sessions), minlength=corpus.n_items)
        assert counts.min() >= min_freq
        assert min(len(s) for s in corpus.sessions) >= 2

    def test_events_sorted_by_time_with_stable_ties(self):
        events = [RawEvent("s", "z", 5), RawEvent("s", "y", 1), RawEvent("s", "x", 5)] * 5
        corpus = build_corpus([RawEvent(f"s{k}", e.item_id, e.timestamp) for k in range(5) for e in events[:3]])
        assert [corpus.items[i] for i in corpus.sessions[0]] == ["y", "z", "x"]

    def test_vocabulary_round_trip(self):
        corpus = build_corpus(toy_events(), min_item_freq=1)
        assert sorted(corpus.item_index.values()) == list(range(corpus.n_items))
        for raw in corpus.items:
            assert corpus.items[corpus.item_index[raw]] == raw
        assert corpus.items == ["a", "b", "c", "d", "e"]  # first-occurrence order

    def test_everything_filtered(self):
        with pytest.raises(EmptyCorpusError):
            build_corpus([RawEvent("s", "a", 1), RawEvent("s", "b", 2)])

    def test_no_events(self):
        with pytest.raises(EmptyCorpusError):
            build_corpus([])


def corpus_of(n, lengths=None, starts=None):
    lengths = lengths or [2] * n
    return SessionCorpus(
        items=["x", "y", "z"],
        sessions=[[i % 3 for i in range(k)] for k in lengths],
        starts=starts if starts is not None else list(range(n)),
        session_ids=[f"s{i}" for i in range(n)],
    )


class TestTemporalSplit:
    @pytest.mark.parametrize("n, sizes", [(100, (80, 10, 10)), (101, (80, 10, 11)), (10, (8, 1, 1))])
    def test_floor_rule(self, n, sizes):
        split = temporal_split(corpus_of(n))
        assert tuple(split.splits.count(s) for s in ("train", "valid", "test")) == sizes

    def test_sorted_by_start(self):
        split = temporal_split(corpus_of(20, starts=list(range(20, 0, -1))))
        assert split.starts == sorted(split.starts)
        assert split.session_ids[-2:] == ["s1", "s0"]

    @given(st.permutations(list(range(30))))
    def test_input_order_does_not_matter(self, perm):
        base = corpus_of(30, starts=[1000 + 7 * i for i in range(30)])
        shuffled = SessionCorpus(
            base.items,
            [base.sessions[i] for i in perm],
            [base.starts[i] for i in perm],
            [base.session_ids[i] for i in perm],
        )
        a = temporal_split(base)
        b = temporal_split(shuffled)
        assert dict(zip(a.session_ids, a.splits)) == dict(zip(b.session_ids, b.splits))

    def test_too_few_sessions(self):
        with pytest.raises(SplitError):
            temporal_split(corpus_of(9))

    def test_minimum_per_split(self):
        with pytest.raises(SplitError):
            temporal_split(corpus_of(20), min_per_split=3)


class TestExpandPrefixes:
    def split_corpus(self, sessions):
        n = len(sessions)
        return SessionCorpus([f"i{k}" for k in range(100)], sessions, list(range(n)),
                             [f"s{k}" for k in range(n)], ["train"] * n)

    def test_three_items(self):
        assert expand_prefixes(self.split_corpus([[0, 1, 2]]), "train") == [
            Example((0,), 1), Example((0, 1), 2)
        ]

    def test_pair_gives_one_example(self):
        assert len(expand_prefixes(self.split_corpus([[4, 5]]), "train")) == 1

    def test_truncation_keeps_most_recent(self):
        examples = expand_prefixes(self.split_corpus([list(range(60))]), "train", max_len=50)
        assert examples[-1].prefix == tuple(range(9, 59))  # items v10..v59
        assert examples[-1].target == 59
        assert max(len(e.prefix) for e in examples) == 50

    @given(st.lists(st.integers(2, 12), min_size=1, max_size=20))
    def test_count_is_sum_of_lengths_minus_one(self, lengths):
        corpus = self.split_corpus([[k % 100 for k in range(n)] for n in lengths])
        assert len(expand_prefixes(corpus, "train", 5)) == sum(n - 1 for n in lengths)

    def test_unknown_split(self):
        with pytest.raises(ContractError):
            expand_prefixes(self.split_corpus([[0, 1]]), "dev")


class TestBatchIter:
    examples = [Example((1, 2), 3), Example((4,), 5), Example((1, 2, 3), 0), Example((2,), 2), Example((0, 1), 1)]

    def test_sizes(self):
        assert [len(b) for b in batch_iter(self.examples, 2, pad_index=9)] == [2, 2, 1]

    def test_padding_and_mask(self):
        b = next(batch_iter(self.examples[:3], 3, pad_index=9))
        assert b.items.tolist() == [[1, 2, 9], [4, 9, 9], [1, 2, 3]]
        assert b.mask.tolist() == [[True, True, False], [True, False, False], [True, True, True]]
        assert b.lengths.tolist() == [2, 1, 3]
        assert b.targets.tolist() == [3, 5, 0]

    def test_equal_lengths_mask_all_ones(self):
        same = [Example((1, 2), 0), Example((2, 0), 1)]
        assert next(batch_iter(same, 8, pad_index=3)).mask.all()

    def test_seeded_shuffle_is_reproducible(self):
        def order(seed):
            rng = np.random.default_rng(seed)
            return [b.targets.tolist() for b in batch_iter(self.examples, 2, True, rng, pad_index=9)]

        assert order(4) == order(4)
        assert sorted(sum(order(4), [])) == sorted(e.target for e in self.examples)


class TestCorpusCache:
    def test_round_trip_is_bitwise(self, tmp_path):
        corpus = temporal_split(corpus_of(25, lengths=[2 + i % 4 for i in range(25)]))
        path = tmp_path / "c.corc"
        save_corpus(path, corpus)
        loaded = load_corpus(path)
        assert loaded == corpus
        assert corpus_to_bytes(loaded) == path.read_bytes()
        assert path.read_bytes()[:5] == b"CORC1"

    def test_unsplit_round_trip(self):
        corpus = build_corpus(toy_events(), min_item_freq=1)
        assert corpus_from_bytes(corpus_to_bytes(corpus)) == corpus

    def test_bad_magic(self):
        with pytest.raises(ChecksumError):
            corpus_from_bytes(b"NOPE1" + b"\0" * 16)

    def test_truncated(self):
        blob = corpus_to_bytes(corpus_of(3))
        with pytest.raises(ChecksumError):
            corpus_from_bytes(blob[:-3])
