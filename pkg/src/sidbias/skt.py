"""Semantic-ID assignment and the prefix trie used for constrained decoding.

Three tokenizers are provided:

* ``tokenize_skt``: head items get ``Lh`` residual codes; each tail item
  copies the codes of its most similar head item and appends ``Lt`` suffix
  codes quantized from what the head's reconstruction leaves unexplained.
* ``baseline_rqk``: one codebook stack over all items, fixed length ``L``.
* ``baseline_rqk_split``: independent stacks with disjoint token ranges for
  head (``L_head``) and tail (``L_tail_total``) items, no prefix inheritance.

Token IDs are level-tagged: every codebook level owns a contiguous range, and
position ``i`` of a SID draws from the ``i``-th level of the stack that
encoded it.  A separate disambiguation level resolves full-SID
collisions, and ``EOS``/``PAD`` sit after every code range.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantize import Codebook, encode_batch, reconstruct, train_codebooks

DEFAULT_HEAD_LEN = 4
DEFAULT_TAIL_LEN = 2
DEFAULT_DEDUP = 32


class DedupOverflowError(ValueError):
    pass


@dataclass
class VocabLayout:
    level_sizes: list[int]
    dedup_size: int = DEFAULT_DEDUP
    kind: str = "rqk"
    head_len: int | None = None

    def __post_init__(self):
        self.offsets = [int(x) for x in np.concatenate([[0], np.cumsum(self.level_sizes)])[:-1]]
        self.dedup_offset = int(sum(self.level_sizes))
        self.eos = self.dedup_offset + self.dedup_size
        self.pad = self.eos + 1

    @property
    def vocab_size(self) -> int:
        return self.pad + 1

    @property
    def num_levels(self) -> int:
        return len(self.level_sizes)

    def token(self, level: int, code: int) -> int:
        if not 0 <= code < self.level_sizes[level]:
            raise ValueError(f"code {code} outside level {level} range")
        return self.offsets[level] + int(code)

    def dedup_token(self, j: int) -> int:
        return self.dedup_offset + j

    def level_range(self, level: int) -> range:
        return range(self.offsets[level], self.offsets[level] + self.level_sizes[level])

    def level_of(self, token: int) -> int:
        """Level index of ``token``; ``-1`` for dedup, ``-2`` for EOS, ``-3`` for PAD."""
        if token == self.eos:
            return -2
        if token == self.pad:
            return -3
        if self.dedup_offset <= token < self.eos:
            return -1
        for lvl in range(self.num_levels - 1, -1, -1):
            if token >= self.offsets[lvl]:
                return lvl
        raise ValueError(token)

    def token_range(self, token: int) -> range:
        lvl = self.level_of(token)
        if lvl >= 0:
            return self.level_range(lvl)
        if lvl == -1:
            return range(self.dedup_offset, self.eos)
        return range(token, token + 1)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "level_sizes": list(self.level_sizes),
            "offsets": self.offsets,
            "head_len": self.head_len,
            "dedup_offset": self.dedup_offset,
            "dedup_size": self.dedup_size,
            "eos": self.eos,
            "pad": self.pad,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VocabLayout":
        return cls(list(doc["level_sizes"]), doc["dedup_size"], doc["kind"], doc.get("head_len"))


@dataclass(frozen=True)
class SemanticId:
    tokens: tuple
    kind: str  # "head" | "tail"

    def __len__(self):
        return len(self.tokens)


@dataclass
class SidTable:
    layout: VocabLayout
    sids: dict  # item -> SemanticId
    base_len: dict = field(default_factory=dict)  # item -> length before any dedup token
    collisions: int = 0

    def __post_init__(self):
        if not self.base_len:
            self.base_len = {i: len(s) for i, s in self.sids.items()}
        self.inverse = {s.tokens: i for i, s in self.sids.items()}

    @property
    def items(self) -> list[int]:
        return sorted(self.sids)

    @property
    def max_len(self) -> int:
        return max(len(s) for s in self.sids.values())

    def tokens(self, item: int) -> tuple:
        return self.sids[item].tokens

    def with_eos(self, item: int) -> tuple:
        return self.sids[item].tokens + (self.layout.eos,)

    def is_bijective(self) -> bool:
        return len(self.inverse) == len(self.sids)

    def flat(self, num_items: int | None = None):
        """``(ptr, tokens)`` CSR arrays of the SIDs (without EOS) in item order."""
        n = num_items if num_items is not None else max(self.sids) + 1
        ptr = np.zeros(n + 1, dtype=np.int64)
        for i in range(n):
            ptr[i + 1] = ptr[i] + (len(self.sids[i]) if i in self.sids else 0)
        toks = np.empty(ptr[-1], dtype=np.int64)
        for i in range(n):
            if i in self.sids:
                toks[ptr[i]:ptr[i + 1]] = self.sids[i].tokens
        return ptr, toks

    def training_allowed(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-position candidate sets used by the training softmax.

        Position ``p`` allows the full range of every token type that occurs at
        ``p`` in some EOS-terminated SID: a code level, the dedup level, or EOS.
        """
        positions: dict[int, set] = defaultdict(set)
        for item in self.sids:
            for p, tok in enumerate(self.with_eos(item)):
                positions[p].update(self.layout.token_range(tok))
        P = max(positions) + 1
        width = max(len(v) for v in positions.values())
        allowed = np.full((P, width), -1, dtype=np.int64)
        counts = np.zeros(P, dtype=np.int64)
        for p, toks in positions.items():
            s = sorted(toks)
            allowed[p, :len(s)] = s
            counts[p] = len(s)
        return allowed, counts

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for item in self.items:
                s = self.sids[item]
                fh.write(json.dumps({"item": item, "sid": list(s.tokens), "kind": s.kind}) + "\n")

    @classmethod
    def from_jsonl(cls, path, layout: VocabLayout) -> "SidTable":
        sids = {}
        base = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                toks = tuple(rec["sid"])
                sids[rec["item"]] = SemanticId(toks, rec["kind"])
                base[rec["item"]] = len(toks) - (1 if toks and layout.level_of(toks[-1]) == -1 else 0)
        return cls(layout, sids, base)


def save_layout(layout: VocabLayout, path) -> None:
    Path(path).write_text(json.dumps(layout.to_json(), indent=1), encoding="utf-8")


def load_layout(path) -> VocabLayout:
    return VocabLayout.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def lcp(a, b) -> int:
    """Length of the longest common prefix of two token sequences."""
    a = a.tokens if isinstance(a, SemanticId) else a
    b = b.tokens if isinstance(b, SemanticId) else b
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


# --------------------------------------------------------------------------
# assignment

def _codes_to_tokens(codes, layout: VocabLayout, first_level: int = 0) -> tuple:
    return tuple(layout.token(first_level + j, int(c)) for j, c in enumerate(codes))


def assign_head_sids(reps: np.ndarray, heads, codebooks: list[Codebook], layout: VocabLayout) -> dict:
    """Residual-encode every head item with the head codebooks."""
    heads = list(heads)
    if not heads:
        return {}
    codes, _ = encode_batch(reps[heads], codebooks)
    return {h: SemanticId(_codes_to_tokens(c, layout), "head") for h, c in zip(heads, codes)}


def nearest_head(x, reps: np.ndarray, heads) -> int:
    """Head item with the highest cosine similarity to ``x`` (lowest ID on ties)."""
    heads = sorted(heads)
    if not heads:
        raise ValueError("empty head set")
    x = np.asarray(x, dtype=np.float64)
    nx = np.linalg.norm(x)
    H = reps[heads]
    nh = np.linalg.norm(H, axis=1)
    if nx == 0 or np.any(nh == 0):
        raise ValueError("zero-norm vector in cosine retrieval")
    cos = (H @ x) / (nh * nx)
    return heads[int(np.argmax(cos))]


def nearest_heads(X: np.ndarray, reps: np.ndarray, heads) -> np.ndarray:
    heads = np.asarray(sorted(heads))
    H = reps[heads]
    nh = np.linalg.norm(H, axis=1)
    nx = np.linalg.norm(X, axis=1)
    if np.any(nh == 0) or np.any(nx == 0):
        raise ValueError("zero-norm vector in cosine retrieval")
    cos = (X @ H.T) / np.outer(nx, nh)
    return heads[np.argmax(cos, axis=1)]


def head_reconstruction(head_sid: SemanticId, codebooks_head: list[Codebook], layout: VocabLayout) -> np.ndarray:
    codes = [t - layout.offsets[j] for j, t in enumerate(head_sid.tokens[:len(codebooks_head)])]
    return reconstruct(codes, codebooks_head)


def tail_start_residuals(reps, tails, head_sids, heads, codebooks_head, layout):
    """``X_tail - reconstruction(nearest head)`` for every tail item, plus the anchors."""
    tails = list(tails)
    anchors = nearest_heads(reps[tails], reps, heads)
    recon = {h: head_reconstruction(head_sids[h], codebooks_head, layout) for h in set(anchors.tolist())}
    start = np.stack([reps[t] - recon[int(a)] for t, a in zip(tails, anchors)])
    return start, anchors


def assign_tail_sids(reps, tails, head_sids: dict, heads, codebooks_head, codebooks_tail,
                     layout: VocabLayout) -> dict:
    """Tail SID = nearest head's skeleton tokens followed by ``Lt`` suffix tokens."""
    tails = list(tails)
    if not tails:
        return {}
    lh = len(codebooks_head)
    start, anchors = tail_start_residuals(reps, tails, head_sids, heads, codebooks_head, layout)
    codes, _ = encode_batch(None, codebooks_tail, start_residual=start)
    out = {}
    for t, a, c in zip(tails, anchors, codes):
        skeleton = head_sids[int(a)].tokens[:lh]
        out[t] = SemanticId(skeleton + _codes_to_tokens(c, layout, first_level=lh), "tail")
    return out


def dedup_sids(table: SidTable, popularity=None) -> SidTable:
    """Append a disambiguation token to every member of a colliding group.

    Members are numbered 0, 1, 2, ... by descending popularity, then item ID.
    """
    layout = table.layout
    groups = defaultdict(list)
    for item, sid in table.sids.items():
        groups[sid.tokens].append(item)
    pop = (lambda i: 0) if popularity is None else (lambda i: int(popularity[i]))
    sids = dict(table.sids)
    base = {i: len(s) for i, s in table.sids.items()}
    collided = 0
    for tokens, members in groups.items():
        if len(members) < 2:
            continue
        if len(members) > layout.dedup_size:
            raise DedupOverflowError(
                f"{len(members)} items share SID {list(tokens)}; dedup capacity is {layout.dedup_size}")
        collided += len(members)
        for j, item in enumerate(sorted(members, key=lambda i: (-pop(i), i))):
            sids[item] = SemanticId(tokens + (layout.dedup_token(j),), table.sids[item].kind)
    return SidTable(layout, sids, base, collisions=collided)


# --------------------------------------------------------------------------
# tokenizers

@dataclass
class Tokenization:
    table: SidTable
    codebooks: dict  # name -> list[Codebook]
    anchors: dict = field(default_factory=dict)  # tail item -> skeleton head (SKT only)


def tokenize_skt(reps, split, popularity=None, Lh: int = DEFAULT_HEAD_LEN, Lt: int = DEFAULT_TAIL_LEN,
                 N: int = 256, iters: int = 25, seed: int = 0, dedup_size: int = DEFAULT_DEDUP) -> Tokenization:
    heads = split.head_sorted
    tails = split.tail_sorted
    books_head = train_codebooks(reps[heads], Lh, N, iters, seed)
    sizes = [b.size for b in books_head]
    # tail codebooks need the layout offsets only for decoding head codes back
    probe = VocabLayout(sizes + [1] * Lt, dedup_size, "skt", Lh)
    head_sids = assign_head_sids(reps, heads, books_head, probe)
    books_tail = []
    anchors = {}
    if tails:
        start, anchor_arr = tail_start_residuals(reps, tails, head_sids, heads, books_head, probe)
        anchors = {t: int(a) for t, a in zip(tails, anchor_arr)}
        books_tail = train_codebooks(start, Lt, N, iters, seed + 7919)
        sizes_tail = [b.size for b in books_tail]
    else:
        sizes_tail = [1] * Lt
    layout = VocabLayout(sizes + sizes_tail, dedup_size, "skt", Lh)
    head_sids = assign_head_sids(reps, heads, books_head, layout)
    tail_sids = assign_tail_sids(reps, tails, head_sids, heads, books_head, books_tail, layout) if tails else {}
    table = dedup_sids(SidTable(layout, {**head_sids, **tail_sids}), popularity)
    return Tokenization(table, {"head": books_head, "tail": books_tail}, anchors)


def baseline_rqk(reps, L: int = 4, N: int = 256, popularity=None, iters: int = 25, seed: int = 0,
                 split=None, dedup_size: int = DEFAULT_DEDUP) -> Tokenization:
    """Undifferentiated tokenization: one stack over every item."""
    items = list(range(reps.shape[0]))
    books = train_codebooks(reps, L, N, iters, seed)
    layout = VocabLayout([b.size for b in books], dedup_size, "rqk")
    codes, _ = encode_batch(reps, books)
    kind = (lambda i: "head" if split is not None and i in split.head else "tail")
    sids = {i: SemanticId(_codes_to_tokens(c, layout), kind(i)) for i, c in zip(items, codes)}
    return Tokenization(dedup_sids(SidTable(layout, sids), popularity), {"all": books})


def baseline_rqk_split(reps, split, L_head: int = 4, L_tail_total: int = 6, N: int = 256, popularity=None,
                       iters: int = 25, seed: int = 0, dedup_size: int = DEFAULT_DEDUP) -> Tokenization:
    """Separate stacks for head and tail items, no inheritance between them.

    The two stacks have their own token ranges: levels ``0..L_head-1`` hold
    head codes and the following ``L_tail_total`` levels hold tail codes, so
    position ``i`` of a head SID and of a tail SID never share a token.
    """
    if L_tail_total <= L_head:
        raise ValueError("L_tail_total must exceed L_head")
    heads, tails = split.head_sorted, split.tail_sorted
    books_head = train_codebooks(reps[heads], L_head, N, iters, seed) if heads else []
    books_tail = train_codebooks(reps[tails], L_tail_total, N, iters, seed + 7919) if tails else []
    sizes = [b.size for b in books_head] or [1] * L_head
    sizes += [b.size for b in books_tail] or [1] * L_tail_total
    layout = VocabLayout(sizes, dedup_size, "rqk-split", L_head)
    sids = {}
    if heads:
        codes, _ = encode_batch(reps[heads], books_head)
        sids.update({h: SemanticId(_codes_to_tokens(c, layout), "head") for h, c in zip(heads, codes)})
    if tails:
        codes, _ = encode_batch(reps[tails], books_tail)
        sids.update({t: SemanticId(_codes_to_tokens(c, layout, first_level=L_head), "tail")
                     for t, c in zip(tails, codes)})
    return Tokenization(dedup_sids(SidTable(layout, sids), popularity), {"head": books_head, "tail": books_tail})


# --------------------------------------------------------------------------
# trie

class Trie:
    """Prefix tree over EOS-terminated SIDs, stored as flat CSR arrays.

    Node 0 is the root.  ``child_tok[child_ptr[n]:child_ptr[n+1]]`` are the
    tokens allowed after reaching node ``n`` (sorted ascending) and
    ``child_node`` the nodes they lead to.  ``node_item[n]`` is the item whose
    EOS edge ends at ``n`` (``-1`` elsewhere).
    """

    def __init__(self, table: SidTable, head_items=None):
        eos = table.layout.eos
        children: list[dict] = [{}]
        depth = [0]
        item_at = [-1]
        for item in table.items:
            node = 0
            for tok in table.with_eos(item):
                nxt = children[node].get(tok)
                if nxt is None:
                    nxt = len(children)
                    children[node][tok] = nxt
                    children.append({})
                    depth.append(depth[node] + 1)
                    item_at.append(-1)
                node = nxt
            if item_at[node] != -1:
                raise ValueError(f"items {item_at[node]} and {item} share SID {table.tokens(item)}")
            item_at[node] = item
        n = len(children)
        self.eos = eos
        self.num_nodes = n
        self.child_ptr = np.zeros(n + 1, dtype=np.int64)
        for k in range(n):
            self.child_ptr[k + 1] = self.child_ptr[k] + len(children[k])
        self.child_tok = np.empty(self.child_ptr[-1], dtype=np.int64)
        self.child_node = np.empty(self.child_ptr[-1], dtype=np.int64)
        for k in range(n):
            toks = sorted(children[k])
            a = self.child_ptr[k]
            self.child_tok[a:a + len(toks)] = toks
            self.child_node[a:a + len(toks)] = [children[k][t] for t in toks]
        self.node_item = np.asarray(item_at, dtype=np.int64)
        self.node_depth = np.asarray(depth, dtype=np.int64)
        heads = set(head_items) if head_items is not None else {i for i, s in table.sids.items() if s.kind == "head"}
        # subtree head counts: children always have larger ids than parents
        self.subtree_heads = np.zeros(n, dtype=np.int64)
        self.subtree_items = np.zeros(n, dtype=np.int64)
        for k in range(n - 1, -1, -1):
            if self.node_item[k] >= 0:
                self.subtree_items[k] = 1
                self.subtree_heads[k] = int(self.node_item[k] in heads)
            for c in self.child_node[self.child_ptr[k]:self.child_ptr[k + 1]]:
                self.subtree_heads[k] += self.subtree_heads[c]
                self.subtree_items[k] += self.subtree_items[c]
        self.table = table
        self.heads = heads

    def walk(self, prefix) -> int:
        node = 0
        for tok in prefix:
            a, b = self.child_ptr[node], self.child_ptr[node + 1]
            pos = a + int(np.searchsorted(self.child_tok[a:b], tok))
            if pos >= b or self.child_tok[pos] != tok:
                return -1
            node = int(self.child_node[pos])
        return node

    def children(self, node: int):
        a, b = self.child_ptr[node], self.child_ptr[node + 1]
        return self.child_tok[a:b], self.child_node[a:b]

    def allowed(self, prefix) -> list[int]:
        node = self.walk(prefix)
        if node < 0:
            return []
        return [int(t) for t in self.children(node)[0]]

    @property
    def depth(self) -> int:
        return int(self.node_depth.max())

    def item_at(self, path) -> int:
        node = self.walk(path)
        return int(self.node_item[node]) if node >= 0 else -1

    def arrays(self):
        return self.child_ptr, self.child_tok, self.child_node, self.node_item


def build_trie(table: SidTable, head_items=None) -> Trie:
    return Trie(table, head_items)


def skeleton_length(table: SidTable, item: int, head_items) -> int:
    """Longest head SID (before dedup) that is a proper prefix of ``item``'s SID."""
    toks = table.tokens(item)
    best = 0
    for h in head_items:
        if h == item:
            continue
        base = table.tokens(h)[: table.base_len[h]]
        if len(base) < len(toks) and toks[: len(base)] == base:
            best = max(best, len(base))
    return best


def branching_steps(trie: Trie, item: int, skeleton: int = 0) -> list[int]:
    """1-based generation steps at which a head-item path offers a competing token.

    Steps inside an inherited head skeleton (the first ``skeleton`` tokens)
    are excluded: there the item's own token is a head token.
    """
    path = trie.table.with_eos(item)
    node = 0
    steps = []
    for j, tok in enumerate(path):
        toks, nodes = trie.children(node)
        if j >= skeleton:
            for t, c in zip(toks, nodes):
                if t != tok and trie.subtree_heads[c] > 0:
                    steps.append(j + 1)
                    break
        node = int(nodes[np.searchsorted(toks, tok)])
    return steps


def branching_census(trie: Trie, items, head_items) -> dict[int, list[int]]:
    """Branching steps for every item in ``items`` (typically the tail items)."""
    table = trie.table
    heads = list(head_items)
    # index head bases by length for the skeleton search
    bases = defaultdict(set)
    for h in heads:
        bases[table.base_len[h]].add(table.tokens(h)[: table.base_len[h]])
    out = {}
    for item in items:
        toks = table.tokens(item)
        skel = 0
        for n, group in bases.items():
            if n < len(toks) and toks[:n] in group:
                skel = max(skel, n)
        out[item] = branching_steps(trie, item, skel)
    return out


def depth_histogram(census: dict[int, list[int]]) -> dict[int, int]:
    hist: dict[int, int] = defaultdict(int)
    for steps in census.values():
        for s in steps:
            hist[s] += 1
    return dict(sorted(hist.items()))
