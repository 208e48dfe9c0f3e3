"""The numba kernels and their pure-Python fallback must agree."""
import json
import os
import subprocess
import sys

import numpy as np

from sidbias import backend

SCRIPT = r"""
import json, sys
import numpy as np
from sidbias import backend, corpus, model as M, quantize, skt

ds = corpus.generate_synthetic(60, 30, 6, 1.2, seed=1)
sp = corpus.leave_one_out(ds)
groups = corpus.split_head_tail(sp)
reps = quantize.synthesize_reps(ds, groups, d=6, seed=1)
tok = skt.tokenize_skt(reps, groups, sp.popularity, Lh=2, Lt=1, N=4, iters=5, seed=1)
table = tok.table
und = M.undesired_table(reps, groups, table, K_a=6, K_b=2)
packed = M.pack_table(table, und, sp.num_items)
rng = np.random.default_rng(0)
p = M.init_params(table.layout.vocab_size, 5, packed.positions, 0)
p.A = rng.uniform(-0.5, 0.5, p.A.shape)
p.E = rng.uniform(-0.5, 0.5, p.E.shape)
batch = sp.train[:12]
nll, auo, g = M.batch_losses(p, batch, packed, 0.1, grad=True)
trie = skt.build_trie(table)
items, scores, _ = M.recommend(p, sp.test[:8], trie, 6, 4)
cfg = M.TrainConfig(alpha=0.1, lr=0.1, epochs=1, dm=5, seed=0, beam_width=10)
res = M.train(sp, table, und, cfg)
json.dump({"backend": backend(), "nll": nll.tolist(), "auo": auo.tolist(), "grad": g.flatten().tolist(),
           "items": items.tolist(), "scores": scores.tolist(), "trained": res.params.flatten().tolist(),
           "codes": [c.centroids.tolist() for c in tok.codebooks["head"]]}, sys.stdout)
"""


def _run(disable: bool) -> dict:
    env = dict(os.environ)
    env.pop("SIDBIAS_DISABLE_NUMBA", None)
    if disable:
        env["SIDBIAS_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def test_fallback_matches_numba():
    fast, slow = _run(False), _run(True)
    assert slow["backend"] == "numpy"
    assert fast["backend"] == backend()
    assert fast["items"] == slow["items"]
    for key in ("nll", "auo", "grad", "scores", "trained"):
        a, b = np.asarray(fast[key]), np.asarray(slow[key])
        assert np.allclose(a, b, rtol=1e-9, atol=1e-12), key
    for a, b in zip(fast["codes"], slow["codes"]):
        assert np.allclose(a, b, atol=1e-12)
