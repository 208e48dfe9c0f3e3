"""Accuracy, popularity-bias and fairness metrics over top-K recommendation lists.

A recommendation list set (``RecList``) is a mapping ``user -> ordered items``;
``truth`` maps each evaluated user to the single held-out item.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CUTOFFS = (5, 10)
CNS_COMPONENTS = ("hr_all", "hr_tail", "ndcg_all", "ndcg_tail", "mgu", "arp")
LOWER_BETTER = ("mgu", "arp")


class EmptyGroupError(ValueError):
    pass


def reclist(users, items) -> dict[int, list[int]]:
    """``RecList`` from parallel user IDs and a padded ``(n, K)`` item array (``-1`` = empty slot)."""
    out = {}
    for u, row in zip(users, np.asarray(items)):
        lst = [int(i) for i in row if i >= 0]
        if len(set(lst)) != len(lst):
            raise ValueError(f"duplicate items in the list of user {u}")
        out[int(u)] = lst
    return out


def _users(truth, restrict):
    users = sorted(truth)
    if restrict is not None:
        users = [u for u in users if truth[u] in restrict]
    if not users:
        raise EmptyGroupError("no users to evaluate")
    return users


def hit_rate(recs, truth, K: int, restrict=None) -> float:
    users = _users(truth, restrict)
    hits = sum(1 for u in users if truth[u] in recs.get(u, [])[:K])
    return hits / len(users)


def ndcg(recs, truth, K: int, restrict=None) -> float:
    users = _users(truth, restrict)
    total = 0.0
    for u in users:
        lst = recs.get(u, [])[:K]
        if truth[u] in lst:
            total += 1.0 / math.log2(lst.index(truth[u]) + 2)
    return total / len(users)


def group_shares(recs, train_sequences, split, K: int):
    """``(GR_head, GR_tail, GH_head, GH_tail)``: recommended-slot and training-interaction shares."""
    slots = [i for lst in recs.values() for i in lst[:K]]
    if not slots:
        raise EmptyGroupError("empty recommendation lists")
    gr_head = sum(1 for i in slots if i in split.head) / len(slots)
    inter = [i for seq in train_sequences for i in seq]
    if not inter:
        raise EmptyGroupError("no training interactions")
    gh_head = sum(1 for i in inter if i in split.head) / len(inter)
    return gr_head, 1.0 - gr_head, gh_head, 1.0 - gh_head


def mgu(recs, train_sequences, split, K: int) -> float:
    """Mean absolute group unfairness ``(|GR_head - GH_head| + |GR_tail - GH_tail|) / 2``."""
    gr_h, gr_t, gh_h, gh_t = group_shares(recs, train_sequences, split, K)
    return (abs(gr_h - gh_h) + abs(gr_t - gh_t)) / 2


def arp(recs, popularity, K: int) -> float:
    """User mean of each list's mean training popularity."""
    pop = np.asarray(popularity)
    means = []
    for u in sorted(recs):
        lst = recs[u][:K]
        if not lst:
            continue
        for i in lst:
            if not 0 <= i < len(pop):
                raise KeyError(f"unknown item {i}")
        means.append(float(np.mean([pop[i] for i in lst])))
    if not means:
        raise EmptyGroupError("empty recommendation lists")
    return float(np.mean(means))


def exposure_counts(recs, split, K: int | None = None) -> tuple[int, int]:
    head = tail = 0
    for lst in recs.values():
        for i in (lst if K is None else lst[:K]):
            if i in split.head:
                head += 1
            else:
                tail += 1
    return head, tail


def popularity_groups(popularity, n_groups: int = 5) -> list[list[int]]:
    """Items sorted by popularity (ties: lower ID first) cut into equal-size groups."""
    pop = np.asarray(popularity)
    if len(pop) < n_groups:
        raise ValueError(f"need at least {n_groups} items")
    order = np.lexsort((np.arange(len(pop)), -pop))
    return [[int(i) for i in g] for g in np.array_split(order, n_groups)]


def quintile_report(recs, truth, popularity, K: int) -> list[dict]:
    """HR@K / NDCG@K restricted to each popularity quintile; ``None`` where a group has no truth users."""
    rows = []
    for g, items in enumerate(popularity_groups(popularity, 5)):
        members = set(items)
        n = sum(1 for u in truth if truth[u] in members)
        if n == 0:
            rows.append({"group": g, "items": len(items), "users": 0, "hr": None, "ndcg": None})
            continue
        rows.append({"group": g, "items": len(items), "users": n,
                     "hr": hit_rate(recs, truth, K, members), "ndcg": ndcg(recs, truth, K, members)})
    return rows


# --------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    name: str
    hr: dict = field(default_factory=dict)          # "all@5", "tail@10", ...
    ndcg: dict = field(default_factory=dict)
    mgu: dict = field(default_factory=dict)         # "@5", "@10"
    arp: dict = field(default_factory=dict)
    exposure: dict = field(default_factory=dict)    # {"head": n, "tail": n} at the largest cutoff
    quintiles: dict = field(default_factory=dict)   # cutoff -> rows

    def component(self, key: str, K: int = 10) -> float:
        if key.startswith(("hr_", "ndcg_")):
            metric, group = key.split("_")
            return getattr(self, metric)[f"{group}@{K}"]
        return getattr(self, key)[f"@{K}"]

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(name: str, recs, truth, split, train_sequences, popularity, cutoffs=CUTOFFS) -> MetricsReport:
    rep = MetricsReport(name)
    tail = split.tail
    for K in cutoffs:
        rep.hr[f"all@{K}"] = hit_rate(recs, truth, K)
        rep.ndcg[f"all@{K}"] = ndcg(recs, truth, K)
        try:
            rep.hr[f"tail@{K}"] = hit_rate(recs, truth, K, tail)
            rep.ndcg[f"tail@{K}"] = ndcg(recs, truth, K, tail)
        except EmptyGroupError:
            rep.hr[f"tail@{K}"] = rep.ndcg[f"tail@{K}"] = None
        rep.mgu[f"@{K}"] = mgu(recs, train_sequences, split, K)
        rep.arp[f"@{K}"] = arp(recs, popularity, K)
        rep.quintiles[str(K)] = quintile_report(recs, truth, popularity, K)
    head, tail_n = exposure_counts(recs, split, max(cutoffs))
    rep.exposure = {"head": head, "tail": tail_n}
    return rep


def save_report(rep: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True), encoding="utf-8")


def load_report(path) -> MetricsReport:
    return MetricsReport(**json.loads(Path(path).read_text(encoding="utf-8")))


def plot_rows(rep: MetricsReport) -> list[tuple]:
    """``(metric, cutoff, group, value)`` rows for external plotting."""
    rows = []
    for metric in ("hr", "ndcg"):
        for key, v in sorted(getattr(rep, metric).items()):
            group, K = key.split("@")
            rows.append((metric, int(K), group, v))
    for metric in ("mgu", "arp"):
        for key, v in sorted(getattr(rep, metric).items()):
            rows.append((metric, int(key[1:]), "all", v))
    for K, qrows in sorted(rep.quintiles.items()):
        for r in qrows:
            rows.append(("hr", int(K), f"q{r['group']}", r["hr"]))
            rows.append(("ndcg", int(K), f"q{r['group']}", r["ndcg"]))
    return rows


def write_plot_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metric", "cutoff", "group", "value"])
        for rep in reports:
            for metric, K, group, v in plot_rows(rep):
                w.writerow([rep.name, metric, K, group, "" if v is None else repr(float(v))])


@dataclass
class CnsRow:
    model: str
    components: dict
    cns: float


def cns(reports, K: int = 10) -> list[CnsRow]:
    """Mean of the six min-max normalized components (lower-better ones inverted).

    A component whose values are all equal scores 1 for every model.
    """
    if len(reports) < 2:
        raise ValueError("CNS needs at least two models")
    raw = {key: np.asarray([_value(r, key, K) for r in reports], dtype=float) for key in CNS_COMPONENTS}
    norm = {}
    for key, x in raw.items():
        lo, hi = x.min(), x.max()
        if hi == lo:
            norm[key] = np.ones_like(x)
        elif key in LOWER_BETTER:
            norm[key] = (hi - x) / (hi - lo)
        else:
            norm[key] = (x - lo) / (hi - lo)
    rows = []
    for m, rep in enumerate(reports):
        comps = {key: float(norm[key][m]) for key in CNS_COMPONENTS}
        name = rep.name if isinstance(rep, MetricsReport) else rep.get("name", f"model{m}")
        rows.append(CnsRow(name, comps, float(np.mean(list(comps.values())))))
    return rows


def _value(rep, key, K):
    v = rep.component(key, K) if isinstance(rep, MetricsReport) else rep[key]
    if v is None:
        raise EmptyGroupError(f"{key} undefined for {getattr(rep, 'name', rep)}")
    return v


def write_cns_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", *CNS_COMPONENTS, "cns"])
        for r in rows:
            w.writerow([r.model, *[repr(r.components[k]) for k in CNS_COMPONENTS], repr(r.cns)])
