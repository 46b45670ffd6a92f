"""
From a click log to training examples
=====================================

Raw (session, item, timestamp) rows are filtered until every kept item
appears at least five times and every kept session has two or more items.
Dropping one rare item can shorten a session below two items, which can in
turn push another item below five, so the filter runs to a fixed point.
"""

import tempfile
from pathlib import Path

from sessrec.data import build_corpus, expand_prefixes, ingest, temporal_split
from sessrec.evaluation import make_synthetic_corpus
from sessrec.trainer import make_rng

rows = """session_id	item_id	timestamp
S1	a	10
S1	b	11
S1	c	12
S2	a	20
S2	b	21
S2	c	22
S3	a	30
S3	b	31
S3	c	32
S3	d	33
S4	a	40
S4	b	41
S4	c	42
S4	e	43
S5	a	50
S5	b	51
S5	d	52
S6	c	60
S6	e	61
"""

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "clicks.tsv"
    path.write_text(rows)
    events = ingest(path)

print(len(events), "events")

# d and e are rare; once they go, S6 is just [c] and disappears,
# which leaves c with four occurrences, so c goes as well
corpus = build_corpus(events, min_item_freq=5, min_session_len=2)
print("items   ", corpus.items)
print("sessions", dict(zip(corpus.session_ids, corpus.sessions)))
print(corpus.stats())

# a bigger corpus for the temporal split: oldest 80% train, then 10/10
big = temporal_split(make_synthetic_corpus(40, 4, 101, (3, 6), 1.0, make_rng(0)))
print({s: big.splits.count(s) for s in ("train", "valid", "test")})

# every prefix of a session predicts the item right after it
examples = expand_prefixes(big, "train", max_len=50)
print(len(examples), "training examples, e.g.", examples[:3])
