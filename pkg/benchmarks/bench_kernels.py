"""Time the hot kernels under numba and under the pure-Python fallback.

Each backend runs in its own interpreter (the switch is read at import time).
Numba timings exclude compilation: every kernel is called once before timing.

    python benchmarks/bench_kernels.py [--users 300] [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from sidbias import backend, corpus, model as M, quantize, skt
from sidbias.model import _kernels as K

users, repeat = int(sys.argv[1]), int(sys.argv[2])
ds = corpus.generate_synthetic(users, max(50, users // 4), 8, 1.5, seed=0)
sp = corpus.leave_one_out(ds)
groups = corpus.split_head_tail(sp)
reps = quantize.synthesize_reps(ds, groups, seed=0)
tok = skt.tokenize_skt(reps, groups, sp.popularity, N=16, seed=0)
table = tok.table
und = M.undesired_table(reps, groups, table, K_a=20, K_b=5)
packed = M.pack_table(table, und, sp.num_items)
trie = skt.build_trie(table)
cfg = M.TrainConfig(alpha=0.1, lr=0.1, dm=32, seed=0)
params = M.init_params(table.layout.vocab_size, cfg.dm, packed.positions, 0)
ex_ptr, ex_hist, ex_target = M.pack_examples(sp.train, cfg.max_hist)
X = np.random.default_rng(0).normal(size=(4000, 32))
C = X[:256].copy()

def epoch():
    p, v = params.copy(), params.zeros_like()
    order = M.epoch_order(len(ex_target), 0, 1)
    K.train_epoch(*p.blocks(), *v.blocks(), order, 64, 0.1, 0.9, ex_ptr, ex_hist, ex_target, packed.sid_ptr,
                  packed.sid_tok, packed.eos, packed.allowed, packed.allowed_cnt, packed.und_ptr,
                  packed.und_items, 0.1, 1e-6)

def beam():
    M.recommend(params, sp.test[:200], trie, 20, 10, 20, True)

def assign():
    quantize.assign_nearest(X, C)

out = {"backend": backend(), "train_examples": len(ex_target)}
for name, fn in (("train_epoch", epoch), ("beam_search_200", beam), ("assign_4000x256", assign)):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    out[name] = best
json.dump(out, sys.stdout)
"""


def run(disable: bool, users: int, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("SIDBIAS_DISABLE_NUMBA", None)
    if disable:
        env["SIDBIAS_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(users), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--users", type=int, default=300)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    fast = run(False, args.users, args.repeat)
    slow = run(True, args.users, args.repeat)
    print(f"{args.users} users, {fast['train_examples']} training examples; best of {args.repeat}")
    print(f"{'kernel':<18}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for key in ("train_epoch", "beam_search_200", "assign_4000x256"):
        print(f"{key:<18}{fast[key]:>12.4f}{slow[key]:>12.4f}{slow[key] / fast[key]:>9.1f}x")


if __name__ == "__main__":
    main()
