"""Acceptance suite on the default desk-scale synthetic corpus (about 2,000 users, 500 items).

Every test records one PASS/FAIL line that is repeated in the terminal
summary.  The trained arms are cached per seed, so the full module takes
roughly ten minutes on one CPU.
"""
import functools
import math
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from sidbias import biaslab, corpus, evalx, model as M, pipeline, quantize, skt
from sidbias.corpus import Dataset
from sidbias.pipeline import RunConfig

SEEDS = (0, 1, 2)


@functools.lru_cache(maxsize=None)
def data_for(seed):
    return pipeline.build_data(RunConfig(seed=seed))


@functools.lru_cache(maxsize=None)
def arm(seed, name):
    """Train one arm on the seed's corpus.  ``rqk-split`` and ``rqk4-mle`` keep their epoch snapshots."""
    base = RunConfig(seed=seed)
    if name == "rqk-split":
        cfg = replace(base, tokenizer="rqk-split", alpha=0.0)
    else:
        cfg = pipeline.arm_config(base, name)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return pipeline.run_arm(cfg, data_for(seed), name, keep_snapshots=name in ("rqk-split",))


def _probe_params(table, positions, seed, dm=8):
    rng = np.random.default_rng(seed)
    p = M.init_params(table.layout.vocab_size, dm, positions, seed)
    p.A = rng.uniform(-0.5, 0.5, p.A.shape)
    p.E = rng.uniform(-0.5, 0.5, p.E.shape)
    p.Wp = rng.normal(0, 0.5, p.Wp.shape)
    p.Wh = rng.normal(0, 0.5, p.Wh.shape)
    p.b = rng.normal(0, 0.2, p.b.shape)
    return p


@functools.lru_cache(maxsize=None)
def skt_setup(seed=0):
    cfg = RunConfig(seed=seed)
    data = data_for(seed)
    tok = pipeline.build_tokenization(cfg, data)
    und = pipeline.build_undesired(cfg, data, tok.table)
    packed = M.pack_table(tok.table, und, data.split.num_items)
    return data, tok.table, und, packed


def test_c01_gradient_fidelity(criterion):
    data, table, und, packed = skt_setup()
    groups = data.groups
    tails = [e for e in data.split.train if e.target in groups.tail][:3]
    heads = [e for e in data.split.train if e.target in groups.head][:2]
    worst = {}
    ok = True
    for k, alpha in enumerate((0.0, 0.1)):
        p = _probe_params(table, packed.positions, seed=10 + k)
        rep = biaslab.check_model_gradient(p, tails + heads, packed, alpha, probes=20, step=1e-5, tolerance=1e-4,
                                           seed=k)
        worst[alpha] = max(rep.max_rel_error.values())
        ok &= rep.passed and worst[alpha] < 1e-4
    criterion(1, ok, f"max rel err NLL {worst[0.0]:.2e}, NLL+0.1*AUO {worst[0.1]:.2e} (< 1e-4, 20 probes/block)")
    assert ok


def test_c02_closed_forms(criterion):
    data, table, und, packed = skt_setup()
    allowed = (packed.allowed, packed.allowed_cnt)
    t0 = time.perf_counter()
    p = _probe_params(table, packed.positions, seed=3)
    tails = [e for e in data.split.train if e.target in data.groups.tail and und[e.target]][:10]
    heads = [e for e in data.split.train if e.target in data.groups.head][:5]
    max_err, rescue_ok, rescued = 0.0, True, 0
    for e in tails + heads:
        members = und.get(e.target, ())
        g = M.grad_analytic(p, [e], packed, 0.1).E
        cf = M.closed_form_output_grad(p, e.history, e.target, members, table, allowed, 0.1)
        max_err = max(max_err, float(np.max(np.abs(g - cf))))
    for e in tails:
        rec = biaslab.verify_rescue(p, e, und[e.target], 0.1, table, num_items=data.split.num_items)
        if rec.skipped:
            continue
        rescued += 1
        max_err = max(max_err, rec.member_max_error, rec.closed_form_max_error)
        rescue_ok &= rec.holds and rec.increment > 0
    elapsed = time.perf_counter() - t0
    ok = max_err < 1e-10 and rescue_ok and rescued > 0 and elapsed < 5.0
    criterion(2, ok, f"max |backprop - closed form| {max_err:.1e}; rescue holds on {rescued}/{rescued} probes; "
                     f"{elapsed:.2f}s")
    assert ok


def test_c03_gradient_starvation(criterion):
    rows, ok = [], True
    for s in SEEDS:
        a = arm(s, "rqk-split")
        d = data_for(s)
        st = biaslab.measure_starvation(a.train.snapshots, d.split, a.tokenization.table)
        good = st.mean_tail < 0 and st.mean_tail < st.mean_head and st.sign_violations == 0
        ok &= good
        rows.append(f"seed {s}: head {st.mean_head:+.1f} tail {st.mean_tail:+.1f}")
    criterion(3, ok, "rqk-split MLE, 30 epochs; " + "; ".join(rows))
    assert ok


@functools.lru_cache(maxsize=None)
def _baseline_diagnostics(seed):
    a = arm(seed, "rqk4-mle")
    d = data_for(seed)
    counts = biaslab.BucketCounts(a.trie, d.split.train, d.split.user_cluster)
    curve = biaslab.suppression_curve(a.train.params, a.trie, "rqk-4", d.split.test, d.split, counts)
    gamma = biaslab.estimate_gamma(a.train.params, d.split, a.trie, counts=counts, sample=2000, seed=seed)
    census = skt.branching_census(a.trie, d.groups.tail_sorted, d.groups.head_sorted)
    return curve, gamma, max(len(v) for v in census.values())


def test_c04_structural_branching(criterion):
    rows, ok = [], True
    for s in SEEDS:
        d = data_for(s)
        table = skt_setup(s)[1]
        trie = skt.build_trie(table, d.groups.head)
        census = skt.branching_census(trie, d.groups.tail_sorted, d.groups.head_sorted)
        share = np.mean([len(v) == 1 for v in census.values()])
        curve, _, max_z = _baseline_diagnostics(s)
        good = share == 1.0 and max_z > 1 and curve.slope > 0
        ok &= good
        rows.append(f"seed {s}: SKT z=1 {share:.0%}, rqk-4 max z {max_z}, slope {curve.slope:+.3f}")
    criterion(4, ok, "; ".join(rows))
    assert ok


def test_c05_amplification(criterion):
    rows, ok = [], True
    for s in SEEDS:
        _, gamma, _ = _baseline_diagnostics(s)
        med = gamma.to_json()["median"]
        ok &= med > 1
        rows.append(f"seed {s}: median gamma {med:.2f} ({len(gamma.estimates)} contexts)")
    criterion(5, ok, "rqk-4 MLE; " + "; ".join(rows))
    assert ok


def _arm_metrics(seed):
    return {name: arm(seed, name).report for name in ("rqk4-mle", "skt-mle", "skt-auo")}


def test_c06_debiasing_direction(criterion):
    rows, wins = [], 0
    for s in SEEDS:
        r = _arm_metrics(s)
        base, full = r["rqk4-mle"], r["skt-auo"]
        tail_up = full.hr["tail@10"] > base.hr["tail@10"]
        arp_down = full.arp["@10"] < base.arp["@10"]
        expo_up = full.exposure["tail"] > base.exposure["tail"]
        drop = 1 - full.hr["all@10"] / base.hr["all@10"]
        good = tail_up and arp_down and expo_up and drop <= 0.15
        wins += good
        rows.append(f"seed {s} {'ok' if good else 'no'}: tail HR {base.hr['tail@10']:.4f}->{full.hr['tail@10']:.4f}, "
                    f"ARP {base.arp['@10']:.1f}->{full.arp['@10']:.1f}, "
                    f"tail exposure {base.exposure['tail']}->{full.exposure['tail']}, HR drop {drop:+.1%}")
    ok = wins >= 2
    criterion(6, ok, f"{wins}/3 seeds; " + "; ".join(rows))
    assert ok


def test_c07_metric_oracles(criterion):
    err = 0.0
    split = corpus.HeadTailSplit(frozenset({0, 1}), frozenset(range(2, 10)), np.arange(10) < 2)
    err = max(err, abs(evalx.ndcg({0: [7, 4]}, {0: 4}, 5) - 1 / math.log2(3)))
    err = max(err, abs(evalx.ndcg({0: [4]}, {0: 4}, 5) - 1.0))
    err = max(err, abs(evalx.hit_rate({0: [1, 2], 1: [3]}, {0: 2, 1: 9}, 10) - 0.5))
    pop = np.array([10, 20, 30, 40, 7, 0, 0, 0, 0, 0])
    # user mean of list means (10 and 30), not the pooled mean 70/3
    err = max(err, abs(evalx.arp({0: [0], 1: [1, 3]}, pop, 10) - 20.0))
    err = max(err, abs(evalx.mgu({0: [0, 1]}, [[0] * 8 + [5] * 2], split, 10) - 0.2))
    # randomized fixtures against a rank-array brute force
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        truth = {u: int(rng.integers(10)) for u in range(n)}
        recs = {u: [int(i) for i in rng.permutation(10)[: rng.integers(0, 10)]] for u in range(n)}
        K = int(rng.integers(1, 10))
        ranks = np.array([(recs[u][:K].index(truth[u]) + 1) if truth[u] in recs[u][:K] else 0 for u in range(n)])
        err = max(err, abs(evalx.hit_rate(recs, truth, K) - np.mean(ranks > 0)))
        gains = np.where(ranks > 0, 1 / np.log2(np.where(ranks > 0, ranks, 1) + 1), 0)
        err = max(err, abs(evalx.ndcg(recs, truth, K) - gains.mean()))
        hist = [list(rng.integers(0, 10, 5))]
        slots = np.array([i for u in recs for i in recs[u][:K]])
        if slots.size:
            gr = np.mean(slots < 2)
            gh = np.mean(np.array(hist[0]) < 2)
            err = max(err, abs(evalx.mgu(recs, hist, split, K) - abs(gr - gh)))
            lists = [recs[u][:K] for u in recs if recs[u][:K]]
            err = max(err, abs(evalx.arp(recs, pop, K) - np.mean([pop[l].mean() for l in lists])))
    reps = [{"name": str(k), **dict(zip(evalx.CNS_COMPONENTS, rng.uniform(size=6)))} for k in range(3)]
    table = np.array([[r[c] for c in evalx.CNS_COMPONENTS] for r in reps])
    lo, hi = table.min(0), table.max(0)
    norm = (table - lo) / (hi - lo)
    norm[:, 4:] = 1 - norm[:, 4:]
    err = max(err, float(np.max(np.abs([r.cns for r in evalx.cns(reps)] - norm.mean(1)))))
    ok = err <= 1e-12
    criterion(7, ok, f"max deviation from oracles {err:.1e} (<= 1e-12)")
    assert ok


def test_c08_transform_equilibrium(criterion):
    rng = np.random.default_rng(0)
    # 100 items, 20 head items hold exactly 80% of the interactions
    seqs = []
    for _ in range(1000):
        seq = list(rng.choice(20, 8, replace=False)) + list(rng.choice(np.arange(20, 100), 2, replace=False))
        seqs.append([int(i) for i in rng.permutation(seq)])
    ds = Dataset(list(range(1000)), list(range(100)), seqs, corpus.count_popularity(seqs, 100))
    split = corpus.split_head_tail(ds)
    assert split.head == frozenset(range(20))
    share = corpus.head_share(ds)
    p = corpus.equilibrium_probability(share)
    reps = quantize.synthesize_reps(ds, split, d=16, seed=0)
    sims = quantize.most_similar_tail(reps, split)
    out = corpus.transform_sequences(ds, split, sims, p, "augment", seed=0)
    h, t = corpus.head_tail_counts(out.sequences, split)
    ratio = h / t
    target = 13 / 7
    ok = abs(ratio / target - 1) <= 0.05 and abs(p - 0.375) < 1e-12
    criterion(8, ok, f"head share {share:.3f}, p {p:.3f}, head:tail {ratio:.4f} vs 13:7 = {target:.4f} "
                     f"({ratio / target - 1:+.2%})")
    assert ok


def test_c09_determinism(criterion, tmp_path):
    from sidbias import cli
    cfg = RunConfig(epochs=3, seed=1)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    out = tmp_path / "run"
    snaps = []
    for _ in range(2):
        for cmd in ("gen-data", "tokenize", "train", "eval", "biaslab"):
            assert cli.main([cmd, "--config", str(path), "--out", str(out)]) in (0, 3)
        snaps.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.is_file()})
    differ = [k for k in snaps[0] if snaps[0][k] != snaps[1].get(k)]
    ok = not differ and set(snaps[0]) == set(snaps[1])
    criterion(9, ok, f"{len(snaps[0])} artifacts over 5 stages, default corpus (3 epochs); differing: {differ or 'none'}")
    assert ok


def test_c10_ablation_structure(criterion):
    rows, wins = [], 0
    for s in SEEDS:
        r = _arm_metrics(s)
        b, m, f = (r[k].hr["tail@10"] for k in ("rqk4-mle", "skt-mle", "skt-auo"))
        good = b <= m <= f
        wins += good
        rows.append(f"seed {s} {'ok' if good else 'no'}: {b:.4f} / {m:.4f} / {f:.4f}")
    ok = wins >= 2
    criterion(10, ok, f"{wins}/3 seeds (tail HR@10 rqk-4 / skt / skt+auo); " + "; ".join(rows))
    assert ok
