"""Interaction corpora: synthetic long-tail generation, file ingestion,
head/tail and leave-one-out splits, and the augmentation/substitution
transforms used as re-sampling baselines.

Users and items are dense integer indices ``0..J-1`` / ``0..K-1``.  When a
corpus is loaded from a file the original identifiers are kept in
``user_labels`` / ``item_labels`` so that serialization round-trips.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_INTERACTIONS = 5
HEAD_FRACTION = 0.2


class InteractionParseError(ValueError):
    """Malformed row in an interaction file."""

    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


class ConfigurationError(ValueError):
    pass


@dataclass
class Dataset:
    users: list[int]
    items: list[int]
    sequences: list[list[int]]
    popularity: np.ndarray
    # latent structure planted by the synthetic generator (None for real data)
    user_cluster: np.ndarray | None = None
    item_cluster: np.ndarray | None = None
    user_labels: list | None = None
    item_labels: list | None = None

    @property
    def num_items(self) -> int:
        return len(self.items)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def item_label(self, i: int):
        return self.item_labels[i] if self.item_labels is not None else i

    def user_label(self, u: int):
        return self.user_labels[u] if self.user_labels is not None else u


@dataclass(frozen=True)
class HeadTailSplit:
    head: frozenset
    tail: frozenset
    is_head: np.ndarray = field(compare=False, repr=False)

    @property
    def head_sorted(self) -> list[int]:
        return sorted(self.head)

    @property
    def tail_sorted(self) -> list[int]:
        return sorted(self.tail)


@dataclass
class Example:
    user: int
    history: list[int]
    target: int


@dataclass
class SplitDataset:
    train: list[Example]
    valid: list[Example]
    test: list[Example]
    train_sequences: list[list[int]]
    popularity: np.ndarray
    num_items: int
    user_cluster: np.ndarray | None = None
    item_cluster: np.ndarray | None = None
    skipped_users: int = 0

    @property
    def items(self) -> list[int]:
        return list(range(self.num_items))


def count_popularity(sequences: Sequence[Sequence[int]], num_items: int) -> np.ndarray:
    pop = np.zeros(num_items, dtype=np.int64)
    for seq in sequences:
        if len(seq):
            np.add.at(pop, np.asarray(seq, dtype=np.int64), 1)
    return pop


# --------------------------------------------------------------------------
# synthetic generation

def generate_synthetic(num_users: int, num_items: int, avg_len: float, exponent: float,
                       seed: int, num_clusters: int = 20, in_cluster: float = 0.8) -> Dataset:
    """Long-tail corpus with planted user/item clusters.

    Item weights follow a Zipf rank-frequency law ``rank ** -exponent`` over a
    random ranking.  Each user prefers 2-3 item clusters and draws an
    ``in_cluster`` share of interactions from them, the rest from the global
    popularity law; items do not repeat within one sequence.
    """
    if num_users < 10 or num_items < 10:
        raise ValueError("num_users and num_items must be >= 10")
    if avg_len < MIN_INTERACTIONS:
        raise ValueError(f"avg_len must be >= {MIN_INTERACTIONS}")
    if not exponent > 0:
        raise ValueError("exponent must be > 0")
    if num_clusters < 2 or num_clusters > num_items:
        raise ValueError("num_clusters must be in [2, num_items]")
    rng = np.random.default_rng(seed)

    ranks = rng.permutation(num_items)
    weight = (ranks + 1.0) ** (-float(exponent))
    item_cluster = rng.permutation(num_items) % num_clusters
    members = [np.flatnonzero(item_cluster == c) for c in range(num_clusters)]
    cum_by_cluster = [np.cumsum(weight[m]) for m in members]
    cum_global = np.cumsum(weight)

    max_len = num_items // 2
    sequences: list[list[int]] = []
    user_cluster = np.empty(num_users, dtype=np.int64)
    for u in range(num_users):
        k = 2 + int(rng.random() < 0.5)
        prefs = rng.choice(num_clusters, size=k, replace=False)
        user_cluster[u] = prefs[0]
        length = min(MIN_INTERACTIONS + int(rng.poisson(avg_len - MIN_INTERACTIONS)), max_len)
        seen: set[int] = set()
        seq: list[int] = []
        tries = 0
        while len(seq) < length and tries < 50 * length:
            tries += 1
            if rng.random() < in_cluster:
                c = prefs[0] if rng.random() < 0.5 else prefs[rng.integers(1, k)]
                cum = cum_by_cluster[c]
                item = int(members[c][np.searchsorted(cum, rng.random() * cum[-1], side="right")])
            else:
                item = int(np.searchsorted(cum_global, rng.random() * cum_global[-1], side="right"))
            if item in seen:
                continue
            seen.add(item)
            seq.append(item)
        sequences.append(seq)

    return Dataset(
        users=list(range(num_users)),
        items=list(range(num_items)),
        sequences=sequences,
        popularity=count_popularity(sequences, num_items),
        user_cluster=user_cluster,
        item_cluster=item_cluster.astype(np.int64),
    )


def head_share(ds: Dataset, fraction: float = HEAD_FRACTION) -> float:
    """Share of interactions received by the top ``fraction`` of items."""
    pop = np.sort(np.asarray(ds.popularity))[::-1]
    n_head = max(1, math.ceil(fraction * len(pop) - 1e-9))
    return float(pop[:n_head].sum() / pop.sum())


def gini(values) -> float:
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    if n == 0 or x.sum() == 0:
        return 0.0
    cum = np.cumsum(x)
    return float((n + 1 - 2 * (cum.sum() / cum[-1])) / n)


# --------------------------------------------------------------------------
# file ingestion

def _sort_key(labels):
    if all(isinstance(x, int) for x in labels):
        return sorted(labels)
    return sorted(labels, key=str)


def _parse_rows(path: Path):
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    rows = []
    is_jsonl = path.suffix.lower() in (".jsonl", ".json") or (lines and lines[0].lstrip().startswith("{"))
    if is_jsonl:
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append((obj["user"], obj["item"], int(obj["timestamp"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InteractionParseError(path, lineno, f"bad record ({exc})") from None
        return rows
    reader = csv.reader(lines)
    header = None
    for lineno, rec in enumerate(reader, start=1):
        if not rec or not "".join(rec).strip():
            continue
        if header is None:
            cols = [c.strip().lower() for c in rec]
            if {"user", "item", "timestamp"} <= set(cols):
                header = [cols.index("user"), cols.index("item"), cols.index("timestamp")]
                continue
            header = [0, 1, 2]
        try:
            if len(rec) < 3:
                raise ValueError(f"expected 3 columns, got {len(rec)}")
            u, i, t = (rec[j].strip() for j in header)
            if not u or not i:
                raise ValueError("empty user or item")
            rows.append((_maybe_int(u), _maybe_int(i), int(t)))
        except (ValueError, IndexError) as exc:
            raise InteractionParseError(path, lineno, str(exc)) from None
    return rows


def _maybe_int(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def load_interactions(path, min_count: int = MIN_INTERACTIONS) -> Dataset:
    """Read ``(user, item, timestamp)`` rows from CSV or JSONL.

    Sequences are sorted by timestamp (stable for ties).  Users and items with
    fewer than ``min_count`` interactions are dropped repeatedly until no more
    drop out.  Duplicate rows are kept as repeated interactions.
    """
    path = Path(path)
    rows = _parse_rows(path)
    while True:
        ucount = Counter(r[0] for r in rows)
        icount = Counter(r[1] for r in rows)
        kept = [r for r in rows if ucount[r[0]] >= min_count and icount[r[1]] >= min_count]
        if len(kept) == len(rows):
            break
        rows = kept

    user_labels = _sort_key({r[0] for r in rows})
    item_labels = _sort_key({r[1] for r in rows})
    uidx = {u: k for k, u in enumerate(user_labels)}
    iidx = {i: k for k, i in enumerate(item_labels)}
    per_user: list[list[tuple[int, int, int]]] = [[] for _ in user_labels]
    for order, (u, i, t) in enumerate(rows):
        per_user[uidx[u]].append((t, order, iidx[i]))
    sequences = [[i for _, _, i in sorted(events)] for events in per_user]
    return Dataset(
        users=list(range(len(user_labels))),
        items=list(range(len(item_labels))),
        sequences=sequences,
        popularity=count_popularity(sequences, len(item_labels)),
        user_labels=user_labels,
        item_labels=item_labels,
    )


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, seq in zip(ds.users, ds.sequences):
            rec = {"user": ds.user_label(u), "seq": [ds.item_label(i) for i in seq]}
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path, items=None) -> Dataset:
    """Inverse of :func:`save_dataset` (latent clusters are not serialized).

    ``items`` is the full item universe in index order; by default it is the
    set of items that occur in some sequence.
    """
    recs = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    items = _sort_key({i for r in recs for i in r["seq"]}) if items is None else list(items)
    plain = all(isinstance(r["user"], int) for r in recs) and [r["user"] for r in recs] == list(range(len(recs)))
    plain = plain and items == list(range(len(items)))
    iidx = {i: k for k, i in enumerate(items)}
    sequences = [[iidx[i] for i in r["seq"]] for r in recs]
    return Dataset(
        users=list(range(len(recs))),
        items=list(range(len(items))),
        sequences=sequences,
        popularity=count_popularity(sequences, len(items)),
        user_labels=None if plain else [r["user"] for r in recs],
        item_labels=None if plain else items,
    )


# --------------------------------------------------------------------------
# splits

def split_head_tail(ds) -> HeadTailSplit:
    """Top 20% of items by popularity (ties: lower item ID first) form the head."""
    pop = np.asarray(ds.popularity)
    k = len(pop)
    ids = np.arange(k)
    order = np.lexsort((ids, -pop))
    n_head = -(-k // 5)
    is_head = np.zeros(k, dtype=bool)
    is_head[order[:n_head]] = True
    return HeadTailSplit(
        head=frozenset(int(i) for i in order[:n_head]),
        tail=frozenset(int(i) for i in order[n_head:]),
        is_head=is_head,
    )


def leave_one_out(ds: Dataset) -> SplitDataset:
    """Last item -> test, second-to-last -> valid, next-item pairs before that -> train."""
    train, valid, test, train_seqs = [], [], [], []
    skipped = 0
    for u, seq in zip(ds.users, ds.sequences):
        if len(seq) < 3:
            skipped += 1
            train_seqs.append([])
            continue
        n = len(seq)
        test.append(Example(u, list(seq[: n - 1]), seq[n - 1]))
        valid.append(Example(u, list(seq[: n - 2]), seq[n - 2]))
        for t in range(1, n - 2):
            train.append(Example(u, list(seq[:t]), seq[t]))
        train_seqs.append(list(seq[: n - 2]))
    if skipped:
        log.warning("leave_one_out: skipped %d users with fewer than 3 interactions", skipped)
    return SplitDataset(
        train=train,
        valid=valid,
        test=test,
        train_sequences=train_seqs,
        popularity=count_popularity(train_seqs, ds.num_items),
        num_items=ds.num_items,
        user_cluster=ds.user_cluster,
        item_cluster=ds.item_cluster,
        skipped_users=skipped,
    )


def train_portion(split: SplitDataset) -> Dataset:
    """The training interactions as a plain :class:`Dataset`."""
    n = len(split.train_sequences)
    return Dataset(
        users=list(range(n)),
        items=list(range(split.num_items)),
        sequences=[list(s) for s in split.train_sequences],
        popularity=split.popularity.copy(),
        user_cluster=split.user_cluster,
        item_cluster=split.item_cluster,
    )


# --------------------------------------------------------------------------
# augmentation / substitution

def equilibrium_probability(head_share_: float) -> float:
    """Replacement probability that balances head and tail occurrences.

    Solves ``h - h*p = (1 - h) + h*p`` for ``p``.
    """
    return (2.0 * head_share_ - 1.0) / (2.0 * head_share_)


def transform_sequences(ds: Dataset, split: HeadTailSplit, sims: Mapping[int, int], p: float,
                        mode: str, seed: int) -> Dataset:
    """Replace each head occurrence by its most similar tail item with probability ``p``.

    ``mode="substitute"`` returns only the modified sequences; ``"augment"``
    returns the originals followed by the modified copies (copies get fresh
    user indices).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if mode not in ("augment", "substitute"):
        raise ValueError(f"unknown mode {mode!r}")
    missing = [h for h in split.head if h not in sims]
    if missing:
        raise ConfigurationError(f"no similar tail item for head items {sorted(missing)[:5]}")
    rng = np.random.default_rng(seed)
    modified = []
    for seq in ds.sequences:
        draws = rng.random(len(seq))
        modified.append([sims[i] if (i in split.head and r < p) else i for i, r in zip(seq, draws)])
    if mode == "substitute":
        sequences = modified
        user_cluster = ds.user_cluster
    else:
        sequences = [list(s) for s in ds.sequences] + modified
        user_cluster = None if ds.user_cluster is None else np.concatenate([ds.user_cluster, ds.user_cluster])
    return Dataset(
        users=list(range(len(sequences))),
        items=list(ds.items),
        sequences=sequences,
        popularity=count_popularity(sequences, ds.num_items),
        user_cluster=user_cluster,
        item_cluster=ds.item_cluster,
        item_labels=ds.item_labels,
    )


def head_tail_counts(sequences: Sequence[Sequence[int]], split: HeadTailSplit) -> tuple[int, int]:
    h = t = 0
    for seq in sequences:
        for i in seq:
            if i in split.head:
                h += 1
            else:
                t += 1
    return h, t
