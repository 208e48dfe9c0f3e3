"""Trie-constrained beam search and the popularity reference recommender."""
from __future__ import annotations

import logging

import numpy as np

from . import _kernels as K
from .core import ModelParams, encode_context, pack_examples, token_logits

log = logging.getLogger(__name__)


def _sid_arrays(trie, num_items: int | None = None):
    return trie.table.flat(num_items if num_items is not None else max(trie.table.sids) + 1)


def beam_decode(params: ModelParams, history, trie, beam_width: int, K_: int, exclude_history: bool = False):
    """Top ``K_`` items for one history as ``(items, scores)`` (summed log-probabilities)."""
    if beam_width < K_:
        raise ValueError("beam_width must be >= K")
    sid_ptr, sid_tok = _sid_arrays(trie)
    out_items = np.full(K_, -1, dtype=np.int64)
    out_scores = np.full(K_, -np.inf)
    n = K.beam_search(*params.blocks(), np.asarray(list(history), dtype=np.int64), sid_ptr, sid_tok,
                      *trie.arrays(), trie.eos, int(beam_width), int(K_), bool(exclude_history),
                      out_items, out_scores)
    if n < K_:
        log.warning("beam exhausted after %d completions (K=%d)", n, K_)
    return [int(i) for i in out_items[:n]], out_scores[:n].copy()


def recommend(params: ModelParams, examples, trie, beam_width: int, K_: int, max_hist: int | None = None,
              exclude_history: bool = False):
    """Beam-search lists for many histories.

    Returns ``(items, scores, counts)`` with ``items`` padded by ``-1`` where a
    beam ran out before ``K_`` completions.  Items already in a history are
    not recommended back to it when ``exclude_history`` is set.
    """
    if beam_width < K_:
        raise ValueError("beam_width must be >= K")
    ex_ptr, ex_hist, _ = pack_examples(examples, max_hist) if examples else (np.zeros(1, np.int64),) * 3
    n = len(examples)
    sid_ptr, sid_tok = _sid_arrays(trie)
    items = np.full((n, K_), -1, dtype=np.int64)
    scores = np.full((n, K_), -np.inf)
    counts = np.zeros(n, dtype=np.int64)
    if n:
        K.beam_search_batch(*params.blocks(), ex_ptr, ex_hist, sid_ptr, sid_tok, *trie.arrays(), trie.eos,
                            int(beam_width), int(K_), bool(exclude_history), items, scores, counts)
    short = int((counts < K_).sum())
    if short:
        log.warning("%d histories returned fewer than %d items", short, K_)
    return items, scores, counts


def enumerate_paths(params: ModelParams, history, trie):
    """Log-probability of every item under trie-constrained decoding (exhaustive)."""
    table = trie.table
    out = {}
    stack = [(0, [], 0.0)]
    while stack:
        node, prefix, score = stack.pop()
        toks, nodes = trie.children(node)
        X = encode_context(params, history, prefix, table)
        logp = np.log(token_logits(params, X, toks))
        for tok, child, lp in zip(toks, nodes, logp):
            if tok == trie.eos:
                out[int(trie.node_item[child])] = score + lp
            else:
                stack.append((int(child), prefix + [int(tok)], score + lp))
    return out


def path_log_probs(params: ModelParams, history, item: int, trie) -> np.ndarray:
    """Per-step trie-constrained log-probabilities along ``item``'s EOS-terminated SID."""
    path = trie.table.with_eos(item)
    node = 0
    out = np.empty(len(path))
    for i, tok in enumerate(path):
        toks, nodes = trie.children(node)
        X = encode_context(params, history, path[:i], trie.table)
        P = token_logits(params, X, toks)
        j = int(np.searchsorted(toks, tok))
        out[i] = np.log(P[j])
        node = int(nodes[j])
    return out


def popularity_ranking(popularity, K_: int) -> list[int]:
    """``K_`` most popular items (ties: lower item ID first)."""
    pop = np.asarray(popularity)
    order = np.lexsort((np.arange(len(pop)), -pop))
    return [int(i) for i in order[:K_]]


def recommend_popular(popularity, examples, K_: int, exclude_history: bool = False) -> np.ndarray:
    """The popularity ranking for every example, optionally skipping history items."""
    pop = np.asarray(popularity)
    order = np.lexsort((np.arange(len(pop)), -pop))
    out = np.full((len(examples), K_), -1, dtype=np.int64)
    for k, ex in enumerate(examples):
        seen = set(ex.history) if exclude_history else set()
        picks = [int(i) for i in order[:K_ + len(seen)] if int(i) not in seen][:K_]
        out[k, :len(picks)] = picks
    return out
