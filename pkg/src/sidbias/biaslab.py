"""Measurements of how likelihood training treats tail items.

* ``finite_diff_check``: central-difference oracle for analytic gradients.
* ``measure_starvation``: cumulative update projections ``<-dL/de_c, X>`` per
  token over a training trace, grouped into head-exclusive and
  tail-exclusive tokens.
* ``estimate_gamma``: model vs. data head/tail odds at trie branching nodes.
* ``suppression_curve``: per-item log-probability deficit against the number
  of branching steps ``z`` on the item's path.
* ``verify_rescue``: effect of the unlikelihood term on the embedding of a
  desired token, checked against the closed forms.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .model import _kernels as K
from .skt import branching_census

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# gradient check

@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    probes: int
    max_rel_error: dict              # block -> max relative error
    worst: dict                      # block -> (flat index, analytic, numeric)
    passed: bool
    failures: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _as_blocks(params) -> dict:
    if isinstance(params, M.ModelParams):
        return {k: getattr(params, k) for k in M.ModelParams.BLOCKS}
    return dict(params)


def finite_diff_check(loss, params, grad, probes: int = 20, step: float = 1e-5, tolerance: float = 1e-4,
                      seed: int = 0, floor: float = 1e-8) -> GradCheckReport:
    """Compare ``grad`` with central differences of ``loss`` on random coordinates.

    ``params`` and ``grad`` are :class:`ModelParams` or dicts of arrays;
    ``loss`` is called with ``params`` after each in-place perturbation.
    ``probes`` coordinates are drawn per block (all of them when the block is
    smaller).  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    rng = np.random.default_rng(seed)
    blocks = _as_blocks(params)
    grads = _as_blocks(grad)
    max_err, worst, failures = {}, {}, []
    for name, x in blocks.items():
        g = np.asarray(grads[name])
        flat = x.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= probes else np.sort(rng.choice(n, size=probes, replace=False))
        err_max, arg = 0.0, None
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            fp = loss(params)
            flat[i] = old - step
            fm = loss(params)
            flat[i] = old
            num = (fp - fm) / (2 * step)
            ana = float(g.reshape(-1)[i])
            if not (np.isfinite(num) and np.isfinite(ana)):
                failures.append(f"{name}[{int(i)}]: non-finite (analytic={ana}, numeric={num})")
                err_max = np.inf
                arg = (int(i), ana, num)
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > tolerance:
                failures.append(f"{name}[{int(i)}]: analytic={ana:.10g} numeric={num:.10g} rel={err:.3g}")
            if arg is None or err > err_max:
                err_max, arg = err, (int(i), ana, num)
        max_err[name] = float(err_max)
        worst[name] = arg
    passed = not failures
    return GradCheckReport(step, tolerance, probes, max_err, worst, passed, failures)


def check_model_gradient(params, examples, packed, alpha: float, probes: int = 20, step: float = 1e-5,
                         tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Finite-difference check of the backpropagated gradient of the batch-mean total loss."""
    grad = M.grad_analytic(params, examples, packed, alpha)
    return finite_diff_check(lambda p: M.loss_value(p, examples, packed, alpha), params, grad,
                             probes, step, tolerance, seed)


# --------------------------------------------------------------------------
# starvation

def token_classes(table) -> tuple[set, set]:
    """``(head_exclusive, tail_exclusive)`` tokens of the SID table."""
    head_tok, tail_tok = set(), set()
    for s in table.sids.values():
        (head_tok if s.kind == "head" else tail_tok).update(s.tokens)
    return head_tok - tail_tok, tail_tok - head_tok


@dataclass
class StarvationReport:
    projection: np.ndarray          # (V,) cumulative <-dL_nll/de_c, X>
    target_count: np.ndarray        # (V,) times each token was a target step
    head_exclusive: list
    tail_exclusive: list
    mean_head: float
    mean_tail: float
    sign_violations: int            # never-target tokens with positive batch projection
    batches_checked: int

    def to_json(self) -> dict:
        return {
            "mean_head_exclusive": self.mean_head,
            "mean_tail_exclusive": self.mean_tail,
            "head_exclusive_tokens": len(self.head_exclusive),
            "tail_exclusive_tokens": len(self.tail_exclusive),
            "head_quartiles": _quartiles(self.projection[self.head_exclusive]),
            "tail_quartiles": _quartiles(self.projection[self.tail_exclusive]),
            "sign_violations": self.sign_violations,
            "batches_checked": self.batches_checked,
        }


def _quartiles(x) -> list:
    x = np.asarray(x, dtype=float)
    return [float(v) for v in np.percentile(x, [25, 50, 75])] if x.size else []


def measure_starvation(trace, split, table, examples=None, batch_size: int = 64, check_batches: int = 20,
                       max_hist: int | None = 20) -> StarvationReport:
    """Sum of per-example update projections over every parameter snapshot in ``trace``.

    For a step with context ``X`` and target ``t`` the descent direction of
    ``e_c`` projects onto ``X`` as ``(1{c=t} - P_c) |X|^2``.  The sign check
    evaluates consecutive batches of ``examples`` and counts tokens that are
    never a target in the batch yet receive a positive projection (there
    should be none).
    """
    examples = split.train if examples is None else examples
    packed = M.pack_table(table, None, split.num_items)
    ex_ptr, ex_hist, ex_target = M.pack_examples(examples, max_hist)
    V = table.layout.vocab_size
    proj = np.zeros(V)
    tcount = np.zeros(V, dtype=np.int64)
    idx = np.arange(len(examples), dtype=np.int64)
    for params in trace:
        K.nll_projections(*params.blocks(), idx, ex_ptr, ex_hist, ex_target, packed.sid_ptr, packed.sid_tok,
                          packed.eos, packed.allowed, packed.allowed_cnt, proj, tcount)
    violations = 0
    checked = 0
    if trace:
        last = trace[-1]
        for start in range(0, min(len(examples), check_batches * batch_size), batch_size):
            bidx = idx[start:start + batch_size]
            bp = np.zeros(V)
            bc = np.zeros(V, dtype=np.int64)
            K.nll_projections(*last.blocks(), bidx, ex_ptr, ex_hist, ex_target, packed.sid_ptr, packed.sid_tok,
                              packed.eos, packed.allowed, packed.allowed_cnt, bp, bc)
            violations += int(np.sum((bc == 0) & (bp > 0)))
            checked += 1
    head_ex, tail_ex = token_classes(table)
    head_ex, tail_ex = sorted(head_ex), sorted(tail_ex)
    mean_h = float(proj[head_ex].mean()) if head_ex else float("nan")
    mean_t = float(proj[tail_ex].mean()) if tail_ex else float("nan")
    return StarvationReport(proj, tcount, head_ex, tail_ex, mean_h, mean_t, violations, checked)


# --------------------------------------------------------------------------
# empirical next-token distribution

class BucketCounts:
    """Add-one smoothed next-token frequencies per (user cluster, trie node)."""

    def __init__(self, trie, examples, user_cluster):
        self.trie = trie
        self.user_cluster = user_cluster
        self.counts: dict = defaultdict(lambda: defaultdict(int))
        for ex in examples:
            cl = self.cluster(ex.user)
            node = 0
            for tok in trie.table.with_eos(ex.target):
                toks, nodes = trie.children(node)
                j = int(np.searchsorted(toks, tok))
                self.counts[(cl, node)][j] += 1
                node = int(nodes[j])

    def cluster(self, user) -> int:
        return int(self.user_cluster[user]) if self.user_cluster is not None else 0

    def observations(self, cl, node) -> int:
        return sum(self.counts[(cl, node)].values()) if (cl, node) in self.counts else 0

    def probs(self, cl, node) -> np.ndarray:
        n_child = int(self.trie.child_ptr[node + 1] - self.trie.child_ptr[node])
        c = np.ones(n_child)
        for j, v in self.counts.get((cl, node), {}).items():
            c[j] += v
        return c / c.sum()


def head_tail_children(trie, node) -> tuple[np.ndarray, np.ndarray]:
    """Masks over ``node``'s children: subtree holds a head item / holds only tail items."""
    _, nodes = trie.children(node)
    heads = trie.subtree_heads[nodes] > 0
    tails = (trie.subtree_heads[nodes] == 0) & (trie.subtree_items[nodes] > 0)
    return heads, tails


def is_branching(trie, node) -> bool:
    h, t = head_tail_children(trie, node)
    return bool(h.any() and t.any())


# --------------------------------------------------------------------------
# amplification factor

@dataclass
class GammaEstimate:
    user: int
    node: int
    position: int
    model_ratio: float
    data_ratio: float
    gamma: float
    bucket_size: int


@dataclass
class GammaSummary:
    estimates: list
    skipped: int

    @property
    def gammas(self) -> np.ndarray:
        return np.asarray([g.gamma for g in self.estimates])

    def to_json(self) -> dict:
        g = self.gammas
        q = np.percentile(g, [25, 50, 75]) if g.size else [float("nan")] * 3
        return {
            "contexts": int(g.size),
            "skipped": self.skipped,
            "median": float(q[1]),
            "q25": float(q[0]),
            "q75": float(q[2]),
            "share_above_one": float(np.mean(g > 1)) if g.size else float("nan"),
            "by_position": {str(p): float(np.median([e.gamma for e in self.estimates if e.position == p]))
                            for p in sorted({e.position for e in self.estimates})},
        }


def branching_contexts(trie, examples, tail_only: bool = True):
    """``(example, prefix, node)`` for every branching node on each target path."""
    out = []
    for ex in examples:
        if tail_only and ex.target in trie.heads:
            continue
        path = trie.table.with_eos(ex.target)
        node = 0
        for i, tok in enumerate(path):
            if is_branching(trie, node):
                out.append((ex, tuple(path[:i]), node))
            toks, nodes = trie.children(node)
            node = int(nodes[np.searchsorted(toks, tok)])
    return out


def estimate_gamma(params, split, trie, contexts=None, counts: BucketCounts | None = None,
                   sample: int | None = 2000, seed: int = 0, min_bucket: int = 1,
                   max_hist: int | None = 20) -> GammaSummary:
    """``gamma = [P_model(head side) / P_model(tail side)] / [P_data(head side) / P_data(tail side)]``.

    Head side is the set of children whose subtree contains a head item, tail
    side the children leading only to tail items.  Contexts default to the
    branching nodes on the paths of tail-target test examples; buckets with
    fewer than ``min_bucket`` training observations are skipped.
    """
    if counts is None:
        counts = BucketCounts(trie, split.train, split.user_cluster)
    if contexts is None:
        contexts = branching_contexts(trie, split.test)
    if sample is not None and len(contexts) > sample:
        pick = np.sort(np.random.default_rng(seed).choice(len(contexts), size=sample, replace=False))
        contexts = [contexts[i] for i in pick]
    est, skipped = [], 0
    for ex, prefix, node in contexts:
        cl = counts.cluster(ex.user)
        n_obs = counts.observations(cl, node)
        if n_obs < min_bucket:
            skipped += 1
            continue
        hmask, tmask = head_tail_children(trie, node)
        toks, _ = trie.children(node)
        hist = list(ex.history)[-max_hist:] if max_hist else list(ex.history)
        X = M.encode_context(params, hist, prefix, trie.table)
        p_model = M.token_logits(params, X, toks)
        p_data = counts.probs(cl, node)
        mr = p_model[hmask].sum() / p_model[tmask].sum()
        dr = p_data[hmask].sum() / p_data[tmask].sum()
        if not (mr > 0 and dr > 0 and np.isfinite(mr) and np.isfinite(dr)):
            skipped += 1
            continue
        est.append(GammaEstimate(int(ex.user), int(node), len(prefix), float(mr), float(dr), float(mr / dr), n_obs))
    return GammaSummary(est, skipped)


# --------------------------------------------------------------------------
# suppression deficit

@dataclass
class SuppressionCurve:
    tokenizer: str
    rows: list                    # (z, mean deficit, count)
    z: np.ndarray = field(repr=False)        # per item, retained buckets only
    deficit: np.ndarray = field(repr=False)
    slope: float = float("nan")

    def to_rows(self):
        return [(self.tokenizer, z, d, n) for z, d, n in self.rows]


def suppression_curve(params, trie, tokenizer: str, examples, split, counts: BucketCounts | None = None,
                      min_count: int = 5, max_hist: int | None = 20) -> SuppressionCurve:
    """Mean ``log P_data(path) - log P_model(path)`` of tail targets grouped by ``z``.

    ``z`` is the number of steps on the item's path where a head-item
    subtree competes; both probabilities are taken under the trie
    constraint, the data side from smoothed bucket frequencies.
    """
    if counts is None:
        counts = BucketCounts(trie, split.train, split.user_cluster)
    tail_ex = [ex for ex in examples if ex.target not in trie.heads]
    census = branching_census(trie, sorted({ex.target for ex in tail_ex}), trie.heads)
    zs, defs = [], []
    for ex in tail_ex:
        hist = list(ex.history)[-max_hist:] if max_hist else list(ex.history)
        lp_model = M.path_log_probs(params, hist, ex.target, trie).sum()
        cl = counts.cluster(ex.user)
        node, lp_data = 0, 0.0
        for tok in trie.table.with_eos(ex.target):
            toks, nodes = trie.children(node)
            j = int(np.searchsorted(toks, tok))
            lp_data += np.log(counts.probs(cl, node)[j])
            node = int(nodes[j])
        zs.append(len(census[ex.target]))
        defs.append(lp_data - lp_model)
    zs = np.asarray(zs, dtype=np.int64)
    defs = np.asarray(defs, dtype=float)
    rows = []
    keep = np.zeros(len(zs), dtype=bool)
    for z in sorted(set(zs.tolist())):
        m = zs == z
        if m.sum() < min_count:
            continue
        keep |= m
        rows.append((int(z), float(defs[m].mean()), int(m.sum())))
    slope = deficit_slope(zs[keep], defs[keep])
    return SuppressionCurve(tokenizer, rows, zs[keep], defs[keep], slope)


def deficit_slope(z, deficit) -> float:
    """Least-squares slope of deficit on ``z`` (NaN with fewer than two distinct ``z``)."""
    z = np.asarray(z, dtype=float)
    if len(np.unique(z)) < 2:
        return float("nan")
    return float(np.polyfit(z, np.asarray(deficit, dtype=float), 1)[0])


def write_suppression_csv(curves, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tokenizer", "z", "deficit", "count"])
        for c in curves:
            for tk, z, d, n in c.to_rows():
                w.writerow([tk, z, repr(d), n])


# --------------------------------------------------------------------------
# rescue

@dataclass
class RescueRecord:
    token: int
    proj_nll: float
    proj_total: float
    increment: float
    expected_increment: float
    member_max_error: float
    closed_form_max_error: float
    holds: bool
    skipped: str = ""


def verify_rescue(params, example, undesired_items, alpha: float, table, packed_allowed=None,
                  eps: float = M.EPS, num_items: int | None = None) -> RescueRecord:
    """Compare ``<Delta e_c, X>`` for the target's first token with and without the unlikelihood term.

    All undesired SIDs and the target share the empty-prefix context ``X``,
    so the first-position tokens see exactly the per-step closed forms.
    """
    n = num_items if num_items is not None else max(table.sids) + 1
    und = {example.target: tuple(undesired_items)}
    packed = M.pack_table(table, und, n)
    allowed = (packed.allowed, packed.allowed_cnt)
    X = M.encode_context(params, example.history, [], table)
    cand = M.allowed_at(allowed, 0)
    P = M.token_logits(params, X, cand)
    pos = {int(c): a for a, c in enumerate(cand)}
    c_t = table.tokens(example.target)[0]
    members = [pos[table.tokens(h)[0]] for h in undesired_items]
    if pos[c_t] in members:
        return RescueRecord(c_t, 0, 0, 0, 0, 0, 0, False, "target token is itself undesired at the first step")
    if np.any(P <= eps) or np.any(P >= 1 - eps):
        return RescueRecord(c_t, 0, 0, 0, 0, 0, 0, False, "degenerate probabilities")
    g0 = M.grad_analytic(params, [example], packed, 0.0, eps).E
    g1 = M.grad_analytic(params, [example], packed, alpha, eps).E
    xx = float(X @ X)
    proj0 = -float(g0[c_t] @ X)
    proj1 = -float(g1[c_t] @ X)
    expected = alpha * sum(P[j] * P[pos[c_t]] / (1 - P[j]) for j in members) * xx
    # members: backprop vs targeted repulsion + cross-penalization offset
    mem_err = 0.0
    for k in set(members):
        mult = members.count(k)
        cf = M.undesired_member_update(P, k, members, alpha, X) - alpha * (mult - 1) * P[k] * X
        mem_err = max(mem_err, float(np.max(np.abs(-g1[cand[k]] - cf))))
    cf_all = M.closed_form_output_grad(params, example.history, example.target, undesired_items, table,
                                       allowed, alpha)
    cf_err = float(np.max(np.abs(cf_all - g1)))
    holds = proj1 > proj0 if members else proj1 == proj0
    return RescueRecord(int(c_t), proj0, proj1, proj1 - proj0, float(expected), mem_err, cf_err, bool(holds))


def save_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
