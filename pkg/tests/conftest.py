import numpy as np
import pytest

from sidbias import corpus, model as M, quantize, skt


@pytest.fixture(scope="session")
def small_world():
    """A 300-user corpus with SKT and baseline tokenizations (fast enough for unit tests)."""
    ds = corpus.generate_synthetic(300, 120, 7, 1.5, seed=3)
    sp = corpus.leave_one_out(ds)
    groups = corpus.split_head_tail(sp)
    reps = quantize.synthesize_reps(ds, groups, d=8, seed=3)
    tok = skt.tokenize_skt(reps, groups, sp.popularity, Lh=3, Lt=2, N=6, seed=3)
    base = skt.baseline_rqk(reps, 3, 6, sp.popularity, seed=3, split=groups)
    return {"ds": ds, "split": sp, "groups": groups, "reps": reps, "skt": tok, "rqk": base}


def random_params(table, dm=6, seed=0, scale=0.5):
    """Parameters well away from the tiny initialization so every gradient term is visible."""
    rng = np.random.default_rng(seed)
    positions = table.max_len + 1
    p = M.init_params(table.layout.vocab_size, dm, positions, seed)
    p.A = rng.uniform(-scale, scale, p.A.shape)
    p.E = rng.uniform(-scale, scale, p.E.shape)
    p.Wp = rng.normal(0, 0.4, p.Wp.shape)
    p.Wh = rng.normal(0, 0.4, p.Wh.shape)
    p.b = rng.normal(0, 0.1, p.b.shape)
    return p


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
