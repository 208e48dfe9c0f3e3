import numpy as np
import pytest

from sidbias import biaslab, model as M, skt
from sidbias.corpus import Example
from sidbias.skt import SemanticId, SidTable, VocabLayout

from conftest import random_params


def test_quadratic_gradcheck():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(6, 6))
    Q = B @ B.T
    params = {"x": rng.normal(size=6), "y": rng.normal(size=(2, 3))}

    def loss(p):
        return 0.5 * p["x"] @ Q @ p["x"] + 0.5 * np.sum(p["y"] ** 2)

    grad = {"x": Q @ params["x"], "y": params["y"].copy()}
    # central differences are exact on a quadratic; a larger step keeps round-off small
    rep = biaslab.finite_diff_check(loss, params, grad, probes=20, step=1e-3)
    assert rep.passed and max(rep.max_rel_error.values()) < 1e-10


def test_gradcheck_catches_corruption(small_world):
    table = small_world["skt"].table
    groups = small_world["groups"]
    und = M.undesired_table(small_world["reps"], groups, table, K_a=10, K_b=3)
    packed = M.pack_table(table, und, small_world["split"].num_items)
    p = random_params(table, dm=5, seed=3)
    batch = [e for e in small_world["split"].train if e.target in groups.tail][:2]
    grad = M.grad_analytic(p, batch, packed, 0.1)
    rep = biaslab.finite_diff_check(lambda q: M.loss_value(q, batch, packed, 0.1), p, grad, probes=20)
    assert rep.passed
    # corrupt the largest bias coordinate; every bias coordinate is probed (dm < probes)
    k = int(np.argmax(np.abs(grad.b)))
    grad.b[k] *= 2
    rep = biaslab.finite_diff_check(lambda q: M.loss_value(q, batch, packed, 0.1), p, grad, probes=20)
    assert not rep.passed
    assert any(f.startswith(f"b[{k}]") for f in rep.failures)


def _three_token_world(P):
    """Heads 0 -> (t0,), 2 -> (t2,); tail 1 -> (t1, s).  The first-step softmax equals ``P``."""
    lay = VocabLayout([3, 1], 2, "skt", 1)
    table = SidTable(lay, {0: SemanticId((0,), "head"), 1: SemanticId((1, 3), "tail"),
                           2: SemanticId((2,), "head")})
    params = M.init_params(lay.vocab_size, 2, 3, 0)
    params.b[:] = [1.0, 0.0]
    params.Wh[:] = 0
    x0 = np.tanh(1.0)
    params.E[:3] = np.stack([np.log(P) / x0, np.zeros(3)], axis=1)
    return table, params


def test_rescue_hand_value():
    table, params = _three_token_world(np.array([0.5, 0.1, 0.4]))
    ex = Example(0, [], 1)
    X = M.encode_context(params, [], [], table)
    assert np.allclose(M.token_logits(params, X, [0, 1, 2]), [0.5, 0.1, 0.4], atol=1e-14)
    rec = biaslab.verify_rescue(params, ex, [0], 0.1, table)
    assert rec.holds and not rec.skipped
    assert rec.increment == pytest.approx(0.01 * X @ X, rel=1e-9)
    assert rec.expected_increment == pytest.approx(0.01 * X @ X, rel=1e-12)
    # closed form, without any model
    P = np.array([0.5, 0.1, 0.4])
    d = M.rescue_update(P, 1, [0], 0.1, X, target=True) - M.rescue_update(P, 1, [0], 0.0, X, target=True)
    assert d @ X == pytest.approx(0.01 * X @ X, rel=1e-12)
    zero = biaslab.verify_rescue(params, ex, [0], 0.0, table)
    assert zero.increment == 0.0
    incs = [biaslab.verify_rescue(params, ex, [0], a, table).increment for a in (0.05, 0.1, 0.5, 1.0)]
    assert all(a < b for a, b in zip(incs, incs[1:]))


def test_gamma_quotient():
    table, params = _three_token_world(np.array([0.8, 0.2, 1e-300]))
    # single branching root: child 0 leads to a head, child 1 only to a tail
    table = SidTable(table.layout, {0: table.sids[0], 1: table.sids[1]})
    trie = skt.build_trie(table)
    assert biaslab.is_branching(trie, 0)
    train = [Example(0, [], 0)] * 3 + [Example(0, [], 1)]
    counts = biaslab.BucketCounts(trie, train, None)
    # smoothed data odds (3 + 1) / (1 + 1) = 2, model odds 4
    assert np.allclose(counts.probs(0, 0), [4 / 6, 2 / 6])
    ctx = [(Example(0, [], 1), (), 0)]
    g = biaslab.estimate_gamma(params, None, trie, contexts=ctx, counts=counts)
    assert g.estimates[0].gamma == pytest.approx(2.0, rel=1e-9)
    assert g.estimates[0].model_ratio == pytest.approx(4.0, rel=1e-9)
    flat = params.copy()
    flat.E[:] = 0
    g = biaslab.estimate_gamma(flat, None, trie, contexts=ctx, counts=counts)
    assert g.estimates[0].gamma == pytest.approx(0.5, rel=1e-12)
    assert g.to_json()["median"] == pytest.approx(0.5)


def test_gamma_skips_thin_buckets(small_world):
    table = small_world["rqk"].table
    trie = skt.build_trie(table)
    p = random_params(table, dm=6)
    summary = biaslab.estimate_gamma(p, small_world["split"], trie, sample=50, min_bucket=10 ** 6)
    assert summary.estimates == [] and summary.skipped > 0


def test_starvation_signs(small_world):
    sp = small_world["split"]
    tok = skt.baseline_rqk_split(small_world["reps"], small_world["groups"], 3, 5, N=6, seed=0)
    table = tok.table
    head_ex, tail_ex = biaslab.token_classes(table)
    assert head_ex and tail_ex and not head_ex & tail_ex
    trace = [random_params(table, dm=6, seed=s) for s in range(2)]
    rep = biaslab.measure_starvation(trace, sp, table, check_batches=5)
    assert rep.sign_violations == 0 and rep.batches_checked == 5
    # tokens never used as a target accumulate non-positive projections
    assert np.all(rep.projection[rep.target_count == 0] <= 0)
    # per-example oracle for one example and one snapshot
    ex = sp.train[0]
    one = biaslab.measure_starvation(trace[:1], sp, table, examples=[ex], check_batches=0)
    allowed = table.training_allowed()
    want = np.zeros(table.layout.vocab_size)
    hist = list(ex.history)[-20:]
    for X, cand, P, ti in M.step_probabilities(trace[0], hist, table.with_eos(ex.target), table, allowed):
        coef = -P.copy()
        coef[ti] += 1
        want[cand] += coef * (X @ X)
    assert np.allclose(one.projection, want, atol=1e-12)
    assert want[table.tokens(ex.target)[0]] > 0


def test_suppression_curves(small_world):
    sp = small_world["split"]
    groups = small_world["groups"]
    for key in ("skt", "rqk"):
        table = small_world[key].table
        trie = skt.build_trie(table, groups.head)
        p = random_params(table, dm=6)
        curve = biaslab.suppression_curve(p, trie, key, sp.test, sp, min_count=1)
        assert curve.rows and sum(n for _, _, n in curve.rows) == len(curve.z)
        if key == "skt":
            assert {z for z, _, _ in curve.rows} == {1}
            assert np.isnan(curve.slope)
        else:
            assert max(z for z, _, _ in curve.rows) > 1


def test_deficit_slope():
    assert biaslab.deficit_slope([1, 2, 3], [1.0, 3.0, 5.0]) == pytest.approx(2.0)
    assert np.isnan(biaslab.deficit_slope([2, 2], [1.0, 3.0]))
