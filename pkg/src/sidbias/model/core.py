"""Parameters, reference forward pass, losses and gradients of the SID recommender.

The functions here are straightforward step-by-step numpy implementations.
Training and decoding use the flat-array kernels in ``_kernels``; the tests
check both against each other and against finite differences.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..skt import lcp
from . import _kernels as K

log = logging.getLogger(__name__)

EPS = 1e-6
DEFAULT_ALPHA = 0.1
DEFAULT_KA = 200
DEFAULT_KB = 5
INIT_RANGE = 0.05


# --------------------------------------------------------------------------
# parameters

@dataclass
class ModelParams:
    A: np.ndarray   # (V, dm) input embeddings
    E: np.ndarray   # (V, dm) output embeddings
    Wp: np.ndarray  # (P, dm, dm) prefix-position matrices
    Wh: np.ndarray  # (dm, dm) history matrix
    b: np.ndarray   # (dm,)

    BLOCKS = ("A", "E", "Wp", "Wh", "b")

    @property
    def dm(self) -> int:
        return self.A.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.A.shape[0]

    @property
    def positions(self) -> int:
        return self.Wp.shape[0]

    def blocks(self):
        return [getattr(self, k) for k in self.BLOCKS]

    def copy(self) -> "ModelParams":
        return ModelParams(*[x.copy() for x in self.blocks()])

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*[np.zeros_like(x) for x in self.blocks()])

    def flatten(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self.blocks()])

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        out, k = [], 0
        for x in self.blocks():
            out.append(np.asarray(vec[k:k + x.size], dtype=np.float64).reshape(x.shape).copy())
            k += x.size
        return ModelParams(*out)

    def check(self) -> None:
        V, dm = self.A.shape
        if self.E.shape != (V, dm) or self.Wp.shape[1:] != (dm, dm) or self.Wh.shape != (dm, dm) \
                or self.b.shape != (dm,):
            raise ValueError("inconsistent parameter shapes")
        if self.A is self.E:
            raise ValueError("input and output embeddings must be separate arrays")
        for name, x in zip(self.BLOCKS, self.blocks()):
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite entries in {name}")

    def to_json(self) -> dict:
        return {
            "dims": {"vocab_size": self.vocab_size, "dm": self.dm, "positions": self.positions},
            "blocks": {k: getattr(self, k).tolist() for k in self.BLOCKS},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelParams":
        p = cls(*[np.asarray(doc["blocks"][k], dtype=np.float64) for k in cls.BLOCKS])
        dims = doc.get("dims")
        if dims and (p.vocab_size, p.dm, p.positions) != (dims["vocab_size"], dims["dm"], dims["positions"]):
            raise ValueError("checkpoint header does not match parameter blocks")
        p.check()
        return p


def scaled_orthogonal(rng: np.random.Generator, n: int, gain: float = 1.0) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return gain * q * np.sign(np.diag(r))


def init_params(vocab_size: int, dm: int, positions: int, seed: int = 0, gain: float = 1.0) -> ModelParams:
    rng = np.random.default_rng(seed)
    A = rng.uniform(-INIT_RANGE, INIT_RANGE, (vocab_size, dm))
    E = rng.uniform(-INIT_RANGE, INIT_RANGE, (vocab_size, dm))
    Wp = np.stack([scaled_orthogonal(rng, dm, gain) for _ in range(positions)])
    Wh = scaled_orthogonal(rng, dm, gain)
    return ModelParams(A, E, Wp, Wh, np.zeros(dm))


def save_checkpoint(params: ModelParams, path, config: dict | None = None, seed: int | None = None,
                    extra: dict | None = None) -> None:
    doc = {"format": "sidbias-params-1", **params.to_json(), "config": config or {}, "seed": seed}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ModelParams.from_json(doc), doc


# --------------------------------------------------------------------------
# packed tables for the kernels

@dataclass
class Packed:
    """SID table, training candidate sets and undesired lists as flat arrays."""
    sid_ptr: np.ndarray
    sid_tok: np.ndarray
    eos: int
    allowed: np.ndarray
    allowed_cnt: np.ndarray
    und_ptr: np.ndarray
    und_items: np.ndarray

    @property
    def num_items(self) -> int:
        return len(self.sid_ptr) - 1

    @property
    def positions(self) -> int:
        return self.allowed.shape[0]


def pack_undesired(undesired: dict | None, num_items: int) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(num_items + 1, dtype=np.int64)
    flat = []
    for i in range(num_items):
        members = list(undesired.get(i, ())) if undesired else []
        flat.extend(members)
        ptr[i + 1] = ptr[i] + len(members)
    return ptr, np.asarray(flat, dtype=np.int64)


def pack_table(table, undesired: dict | None = None, num_items: int | None = None) -> Packed:
    n = num_items if num_items is not None else max(table.sids) + 1
    sid_ptr, sid_tok = table.flat(n)
    allowed, cnt = table.training_allowed()
    und_ptr, und_items = pack_undesired(undesired, n)
    return Packed(sid_ptr, sid_tok, table.layout.eos, allowed, cnt, und_ptr, und_items)


def pack_examples(examples, max_hist: int | None = None):
    """``(ex_ptr, ex_hist, ex_target)`` for a list of :class:`~sidbias.corpus.Example`."""
    ptr = np.zeros(len(examples) + 1, dtype=np.int64)
    hist = []
    for k, ex in enumerate(examples):
        h = list(ex.history)
        if max_hist:
            h = h[-max_hist:]
        hist.extend(h)
        ptr[k + 1] = ptr[k] + len(h)
    target = np.asarray([ex.target for ex in examples], dtype=np.int64)
    return ptr, np.asarray(hist, dtype=np.int64), target


# --------------------------------------------------------------------------
# reference forward pass

def history_tokens(history, table) -> list[int]:
    toks = []
    for item in history:
        if item not in table.sids:
            raise KeyError(f"unknown item {item}")
        toks.extend(table.tokens(item))
    return toks


def encode_context(params: ModelParams, history, prefix, table) -> np.ndarray:
    """``tanh(Wh @ mean(history token embeddings) + sum_j Wp[j] @ A[prefix_j] + b)``."""
    prefix = list(prefix)
    if len(prefix) >= params.positions:
        raise ValueError(f"prefix length {len(prefix)} exceeds the model's {params.positions - 1} positions")
    toks = history_tokens(history, table)
    hbar = params.A[toks].mean(axis=0) if toks else np.zeros(params.dm)
    s = params.Wh @ hbar + params.b
    for j, tok in enumerate(prefix):
        s = s + params.Wp[j] @ params.A[tok]
    return np.tanh(s)


def token_logits(params: ModelParams, X: np.ndarray, allowed) -> np.ndarray:
    """Softmax of ``<e_c, X>`` over ``allowed`` (in the given order)."""
    allowed = np.asarray(allowed, dtype=np.int64)
    if allowed.size == 0:
        raise ValueError("empty allowed set")
    z = params.E[allowed] @ X
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def allowed_at(packed_or_allowed, position: int) -> np.ndarray:
    if isinstance(packed_or_allowed, Packed):
        allowed, cnt = packed_or_allowed.allowed, packed_or_allowed.allowed_cnt
    else:
        allowed, cnt = packed_or_allowed
    return allowed[position, :cnt[position]]


def _path(table, target) -> list[int]:
    if isinstance(target, (int, np.integer)):
        return list(table.with_eos(int(target)))
    return list(target)


def step_probabilities(params, history, path, table, allowed):
    """``(X_i, allowed_i, P_i, index of path[i])`` for every step of ``path``."""
    out = []
    for i, tok in enumerate(path):
        X = encode_context(params, history, path[:i], table)
        cand = allowed_at(allowed, i)
        P = token_logits(params, X, cand)
        hit = np.flatnonzero(cand == tok)
        if hit.size != 1:
            raise ValueError(f"token {tok} not allowed at position {i}")
        out.append((X, cand, P, int(hit[0])))
    return out


def nll_loss(params, history, target, table, allowed, eps: float = EPS) -> float:
    """``-sum_i log P(c_i | h, c_<i)`` along the EOS-terminated target SID."""
    loss = 0.0
    for _, _, P, ti in step_probabilities(params, history, _path(table, target), table, allowed):
        loss -= np.log(max(P[ti], eps))
    return float(loss)


def auo_loss(params, history, undesired, table, allowed, eps: float = EPS) -> float:
    """``-sum_{undesired SID} sum_i log(1 - P(c_i | h, c_<i))`` on each SID's own prefix."""
    loss = 0.0
    for target in undesired:
        for _, _, P, ti in step_probabilities(params, history, _path(table, target), table, allowed):
            loss -= np.log(1.0 - min(P[ti], 1.0 - eps))
    return float(loss)


def total_loss(params, batch, undesired: dict, alpha: float, table, allowed, eps: float = EPS) -> float:
    """Batch mean of ``nll + alpha * auo``; the AUO term only exists for tail targets."""
    if not batch:
        return 0.0
    tot = 0.0
    for ex in batch:
        tot += nll_loss(params, ex.history, ex.target, table, allowed, eps)
        und = undesired.get(ex.target, ()) if undesired else ()
        if und and alpha:
            tot += alpha * auo_loss(params, ex.history, und, table, allowed, eps)
    return tot / len(batch)


# --------------------------------------------------------------------------
# kernel-backed losses and gradients

def _pk(packed: Packed):
    return (packed.sid_ptr, packed.sid_tok, packed.eos, packed.allowed, packed.allowed_cnt,
            packed.und_ptr, packed.und_items)


def batch_losses(params: ModelParams, examples, packed: Packed, alpha: float = DEFAULT_ALPHA,
                 eps: float = EPS, max_hist: int | None = None, grad: bool = False):
    """Per-example ``(nll, auo)`` arrays, plus the gradient of the batch-mean total when ``grad``."""
    ex_ptr, ex_hist, ex_target = pack_examples(examples, max_hist)
    n = len(examples)
    g = params.zeros_like()
    nll = np.zeros(n)
    auo = np.zeros(n)
    sid_ptr, sid_tok, eos, allowed, cnt, und_ptr, und_items = _pk(packed)
    K.batch_loss_grad(*params.blocks(), np.arange(n, dtype=np.int64), ex_ptr, ex_hist, ex_target,
                      sid_ptr, sid_tok, eos, allowed, cnt, und_ptr, und_items, float(alpha), float(eps),
                      bool(grad), *g.blocks(), nll, auo)
    return (nll, auo, g) if grad else (nll, auo)


def grad_analytic(params: ModelParams, examples, packed: Packed, alpha: float = DEFAULT_ALPHA,
                  eps: float = EPS) -> ModelParams:
    """Backpropagated gradient of the batch-mean ``nll + alpha * auo``."""
    if not isinstance(examples, (list, tuple)):
        examples = [examples]
    return batch_losses(params, examples, packed, alpha, eps, grad=True)[2]


def loss_value(params: ModelParams, examples, packed: Packed, alpha: float = DEFAULT_ALPHA,
               eps: float = EPS) -> float:
    if not isinstance(examples, (list, tuple)):
        examples = [examples]
    nll, auo = batch_losses(params, examples, packed, alpha, eps)
    return float(np.mean(nll + alpha * auo))


# --------------------------------------------------------------------------
# closed-form output-embedding gradients

def nll_output_grad(P: np.ndarray, target: int, X: np.ndarray) -> np.ndarray:
    """Rows ``(P_c - 1{c=target}) X`` for every candidate ``c`` (one step)."""
    coef = P.copy()
    coef[target] -= 1.0
    return coef[:, None] * X[None, :]


def undesired_member_update(P: np.ndarray, k: int, members, alpha: float, X: np.ndarray) -> np.ndarray:
    """Descent direction for the embedding of undesired, non-target token ``k``.

    ``-(1 + alpha) P_k X + alpha sum_{j != k} P_j P_k / (1 - P_j) X``: the
    targeted repulsion, offset by the cross-penalization from the other
    undesired tokens of the same step.
    """
    cross = sum(P[j] * P[k] / (1.0 - P[j]) for j in members if j != k)
    return (-(1.0 + alpha) * P[k] + alpha * cross) * X


def rescue_update(P: np.ndarray, c: int, members, alpha: float, X: np.ndarray, target: bool = False) -> np.ndarray:
    """Descent direction for a token outside the undesired set.

    ``(1{target} - P_c) X + alpha sum_j P_j P_c / (1 - P_j) X``; the second
    term is the rescue push the AUO objective adds to every non-member.
    """
    rescue = sum(P[j] * P[c] / (1.0 - P[j]) for j in members)
    return ((1.0 if target else 0.0) - P[c] + alpha * rescue) * X


def closed_form_output_grad(params: ModelParams, history, target, undesired, table, allowed,
                            alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """``dL/dE`` of ``nll + alpha * auo`` for one example, assembled step by step from the
    per-step closed forms (no chain rule through the encoder is needed for ``E``).

    Steps of different paths that share a prefix share the context ``X``; at
    such a step the undesired tokens form the member set of the closed forms.
    """
    gE = np.zeros_like(params.E)
    contexts: dict[tuple, dict] = {}
    tpath = _path(table, target)
    for i, tok in enumerate(tpath):
        contexts.setdefault(tuple(tpath[:i]), {"target": None, "members": []})["target"] = tok
    for u in undesired:
        upath = _path(table, u)
        for i, tok in enumerate(upath):
            contexts.setdefault(tuple(upath[:i]), {"target": None, "members": []})["members"].append(tok)
    for prefix, ctx in contexts.items():
        X = encode_context(params, history, prefix, table)
        cand = allowed_at(allowed, len(prefix))
        P = token_logits(params, X, cand)
        pos = {int(c): a for a, c in enumerate(cand)}
        members = [pos[t] for t in ctx["members"]]
        t_idx = pos[ctx["target"]] if ctx["target"] is not None else None
        for a, c in enumerate(cand):
            if a in members:
                # member tokens: repulsion with cross offset (plus the NLL term when it is also the target)
                delta = undesired_member_update(P, a, members, alpha, X)
                delta = delta + (alpha * (members.count(a) - 1) * -P[a]) * X  # repeated members
                if t_idx is None:
                    delta = delta + P[a] * X  # no NLL step at this context
                elif a == t_idx:
                    delta = delta + X
            else:
                if t_idx is None:
                    delta = rescue_update(P, a, members, alpha, X) + P[a] * X
                else:
                    delta = rescue_update(P, a, members, alpha, X, target=(a == t_idx))
            gE[c] -= delta
    return gE


# --------------------------------------------------------------------------
# undesired collections

def build_undesired_items(tail_item: int, reps: np.ndarray, heads, table, K_a: int = DEFAULT_KA,
                          K_b: int = DEFAULT_KB) -> list[int]:
    """Two-stage selection: ``K_a`` most cosine-similar heads, then the ``K_b`` of
    those with the shortest common SID prefix.  Ties go to the lower item ID."""
    if not K_a >= K_b >= 1:
        raise ValueError("need K_a >= K_b >= 1")
    heads = np.asarray(sorted(heads), dtype=np.int64)
    if len(heads) < K_b:
        log.warning("only %d head items available for K_b=%d", len(heads), K_b)
    x = reps[tail_item]
    H = reps[heads]
    cos = (H @ x) / (np.linalg.norm(H, axis=1) * np.linalg.norm(x))
    rough = heads[np.lexsort((heads, -cos))[:K_a]]
    tail_sid = table.tokens(tail_item)
    lcps = np.asarray([lcp(table.tokens(int(h)), tail_sid) for h in rough])
    return [int(h) for h in rough[np.lexsort((rough, lcps))[:K_b]]]


def build_undesired(tail_item: int, reps: np.ndarray, heads, table, K_a: int = DEFAULT_KA,
                    K_b: int = DEFAULT_KB) -> list:
    return [table.sids[h] for h in build_undesired_items(tail_item, reps, heads, table, K_a, K_b)]


def undesired_table(reps: np.ndarray, split, table, K_a: int = DEFAULT_KA, K_b: int = DEFAULT_KB) -> dict:
    """Precomputed ``tail item -> tuple of head items`` for every tail item."""
    heads = split.head_sorted
    if len(heads) < K_b:
        log.warning("only %d head items available for K_b=%d", len(heads), K_b)
    unit = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    heads_arr = np.asarray(heads, dtype=np.int64)
    out = {}
    for t in split.tail_sorted:
        cos = unit[heads_arr] @ unit[t]
        rough = heads_arr[np.lexsort((heads_arr, -cos))[:K_a]]
        sid = table.tokens(t)
        lcps = np.asarray([lcp(table.tokens(int(h)), sid) for h in rough])
        out[t] = tuple(int(h) for h in rough[np.lexsort((rough, lcps))[:K_b]])
    return out
