"""Run configuration and the pipeline stages shared by the CLI and the tests.

Every stage reads its inputs from and writes its artifacts to one run
directory, so stages can be rerun independently.  Artifacts are plain
UTF-8 JSON/JSONL/CSV written with deterministic ordering.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import biaslab, corpus, evalx, quantize, skt
from . import model as M

log = logging.getLogger(__name__)

TOKENIZER_RE = re.compile(r"^(skt|rqk-split|rqk-(\d+))$")


@dataclass
class RunConfig:
    # corpus
    num_users: int = 2000
    num_items: int = 500
    avg_len: float = 8.0
    exponent: float = 1.5
    num_clusters: int = 20
    in_cluster: float = 0.8
    data_path: str | None = None
    min_count: int = 5
    # representations
    rep_dim: int = 32
    rep_noise: float = 0.35
    reps_path: str | None = None
    # tokenizer
    tokenizer: str = "skt"
    Lh: int = 4
    Lt: int = 2
    L_tail_total: int = 6
    N: int = 16
    kmeans_iters: int = 25
    dedup_size: int = 32
    # undesired collections
    K_a: int = 20
    K_b: int = 5
    # training
    alpha: float = 0.1
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    dm: int = 32
    momentum: float = 0.9
    eps: float = 1e-6
    init_gain: float = 1.0
    max_hist: int = 20
    beam_width: int = 20
    exclude_history: bool = True
    # evaluation / diagnostics
    cutoffs: list = field(default_factory=lambda: [5, 10])
    gradcheck_probes: int = 20
    gamma_sample: int = 2000
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not TOKENIZER_RE.match(self.tokenizer):
            raise ValueError(f"tokenizer must be skt, rqk-L or rqk-split, got {self.tokenizer!r}")
        checks = [
            (self.num_users >= 10 and self.num_items >= 10, "num_users and num_items must be >= 10"),
            (self.avg_len >= 5, "avg_len must be >= 5"),
            (self.exponent > 0, "exponent must be > 0"),
            (0 <= self.in_cluster <= 1, "in_cluster must lie in [0, 1]"),
            (self.rep_dim >= 2, "rep_dim must be >= 2"),
            (self.rep_noise >= 0, "rep_noise must be >= 0"),
            (self.Lh >= 1 and self.Lt >= 1, "Lh and Lt must be >= 1"),
            (self.N >= 2, "N must be >= 2"),
            (self.K_a >= self.K_b >= 1, "need K_a >= K_b >= 1"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (0 < self.eps < 0.5, "eps must lie in (0, 0.5)"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.beam_width >= max(self.cutoffs), "beam_width must be >= the largest cutoff"),
        ]
        if self.tokenizer == "rqk-split":
            checks.append((self.L_tail_total > self.Lh, "L_tail_total must exceed Lh"))
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def rqk_levels(self) -> int | None:
        m = TOKENIZER_RE.match(self.tokenizer)
        return int(m.group(2)) if m and m.group(2) else None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {unknown}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_json()), encoding="utf-8")

    def hash(self) -> str:
        doc = self.to_json()
        doc.pop("out_dir")
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()

    def train_config(self) -> M.TrainConfig:
        return M.TrainConfig(alpha=self.alpha, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                             seed=self.seed, eps=self.eps, momentum=self.momentum, dm=self.dm,
                             init_gain=self.init_gain, max_hist=self.max_hist, beam_width=self.beam_width,
                             valid_k=10, exclude_history=self.exclude_history)


ARMS = {
    "rqk4-mle": {"tokenizer": "rqk-4", "alpha": 0.0},
    "skt-mle": {"tokenizer": "skt", "alpha": 0.0},
    "skt-auo": {"tokenizer": "skt", "alpha": 0.1},
}


def arm_config(base: RunConfig, arm: str) -> RunConfig:
    return replace(base, **ARMS[arm])


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(doc, path) -> None:
    Path(path).write_text(canonical_json(doc), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def update_manifest(out: Path, stage: str, cfg: RunConfig, artifacts: list[str], info: dict | None = None) -> dict:
    """Record config hash, seed and artifact checksums of ``stage`` in ``manifest.json``."""
    path = out / "manifest.json"
    doc = read_json(path) if path.exists() else {"stages": {}}
    doc["stages"][stage] = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "artifacts": {name: sha256_file(out / name) for name in sorted(artifacts)},
        "info": info or {},
    }
    write_json(doc, path)
    return doc["stages"][stage]


# --------------------------------------------------------------------------
# in-memory stages

@dataclass
class Data:
    dataset: corpus.Dataset
    split: corpus.SplitDataset
    groups: corpus.HeadTailSplit
    reps: np.ndarray


def build_data(cfg: RunConfig) -> Data:
    if cfg.data_path:
        ds = corpus.load_interactions(cfg.data_path, cfg.min_count)
    else:
        ds = corpus.generate_synthetic(cfg.num_users, cfg.num_items, cfg.avg_len, cfg.exponent, cfg.seed,
                                       cfg.num_clusters, cfg.in_cluster)
    sp = corpus.leave_one_out(ds)
    groups = corpus.split_head_tail(sp)
    if cfg.reps_path:
        reps, _ = quantize.load_reps(cfg.reps_path, [ds.item_label(i) for i in ds.items], cfg.rep_dim)
    else:
        reps = quantize.synthesize_reps(ds, groups, cfg.rep_dim, None, cfg.rep_noise, cfg.seed)
    return Data(ds, sp, groups, reps)


def build_tokenization(cfg: RunConfig, data: Data) -> skt.Tokenization:
    pop = data.split.popularity
    if cfg.tokenizer == "skt":
        return skt.tokenize_skt(data.reps, data.groups, pop, cfg.Lh, cfg.Lt, cfg.N, cfg.kmeans_iters, cfg.seed,
                                cfg.dedup_size)
    if cfg.tokenizer == "rqk-split":
        return skt.baseline_rqk_split(data.reps, data.groups, cfg.Lh, cfg.L_tail_total, cfg.N, pop,
                                      cfg.kmeans_iters, cfg.seed, cfg.dedup_size)
    return skt.baseline_rqk(data.reps, cfg.rqk_levels, cfg.N, pop, cfg.kmeans_iters, cfg.seed, data.groups,
                            cfg.dedup_size)


def build_undesired(cfg: RunConfig, data: Data, table) -> dict:
    return M.undesired_table(data.reps, data.groups, table, cfg.K_a, cfg.K_b)


def tokenizer_stats(table, trie, groups) -> dict:
    census = skt.branching_census(trie, groups.tail_sorted, groups.head_sorted)
    lengths = {}
    for s in table.sids.values():
        lengths[len(s)] = lengths.get(len(s), 0) + 1
    z = [len(v) for v in census.values()]
    return {
        "tokenizer": table.layout.kind,
        "vocab_size": table.layout.vocab_size,
        "level_sizes": list(table.layout.level_sizes),
        "collisions": table.collisions,
        "bijective": table.is_bijective(),
        "sid_lengths": {str(k): v for k, v in sorted(lengths.items())},
        "trie_nodes": trie.num_nodes,
        "tail_branching_depths": {str(k): v for k, v in skt.depth_histogram(census).items()},
        "tail_z": {str(k): int(v) for k, v in sorted(_counts(z).items())},
        "max_z": max(z) if z else 0,
    }


def _counts(xs) -> dict:
    out: dict = {}
    for x in xs:
        out[x] = out.get(x, 0) + 1
    return out


@dataclass
class ArmResult:
    name: str
    cfg: RunConfig
    tokenization: skt.Tokenization
    trie: skt.Trie
    undesired: dict
    train: M.TrainResult
    report: evalx.MetricsReport
    recs: dict


def recommend_lists(cfg: RunConfig, params, trie, examples) -> dict:
    items, _, _ = M.recommend(params, examples, trie, cfg.beam_width, max(cfg.cutoffs), cfg.max_hist,
                              cfg.exclude_history)
    return evalx.reclist([ex.user for ex in examples], items)


def evaluate_lists(name: str, cfg: RunConfig, data: Data, recs: dict) -> evalx.MetricsReport:
    truth = {ex.user: ex.target for ex in data.split.test}
    return evalx.evaluate(name, recs, truth, data.groups, data.split.train_sequences, data.split.popularity,
                          tuple(cfg.cutoffs))


def run_arm(cfg: RunConfig, data: Data, name: str | None = None, keep_snapshots: bool = False) -> ArmResult:
    """Tokenize, train and evaluate one configuration in memory."""
    tok = build_tokenization(cfg, data)
    trie = skt.build_trie(tok.table, data.groups.head)
    und = build_undesired(cfg, data, tok.table) if cfg.alpha > 0 else {}
    res = M.train(data.split, tok.table, und, cfg.train_config(), trie, keep_snapshots=keep_snapshots)
    recs = recommend_lists(cfg, res.params, trie, data.split.test)
    rep = evaluate_lists(name or cfg.tokenizer, cfg, data, recs)
    return ArmResult(name or cfg.tokenizer, cfg, tok, trie, und, res, rep, recs)


# --------------------------------------------------------------------------
# on-disk stages

def stage_gen_data(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_data(cfg)
    ds, sp, groups = data.dataset, data.split, data.groups
    corpus.save_dataset(ds, out / "dataset.jsonl")
    write_json({
        "head": groups.head_sorted,
        "tail": groups.tail_sorted,
        "train": [[ex.user, ex.history, ex.target] for ex in sp.train],
        "valid": [[ex.user, ex.history, ex.target] for ex in sp.valid],
        "test": [[ex.user, ex.history, ex.target] for ex in sp.test],
        "train_sequences": sp.train_sequences,
        "skipped_users": sp.skipped_users,
        "num_items": sp.num_items,
        "item_labels": ds.item_labels,
        "user_cluster": None if sp.user_cluster is None else [int(x) for x in sp.user_cluster],
        "item_cluster": None if sp.item_cluster is None else [int(x) for x in sp.item_cluster],
    }, out / "split.json")
    write_json({"popularity": [int(x) for x in sp.popularity],
                "all_interactions": [int(x) for x in ds.popularity]}, out / "popularity.json")
    quantize.save_reps(data.reps, out / "reps.jsonl", ds.item_labels)
    info = {
        "users": len(ds.users), "items": ds.num_items, "interactions": ds.num_interactions,
        "train_examples": len(sp.train), "skipped_users": sp.skipped_users,
        "head_items": len(groups.head), "tail_items": len(groups.tail),
        "head_share": corpus.head_share(ds), "gini": corpus.gini(ds.popularity),
    }
    cfg.save(out / "config.json")
    return update_manifest(out, "gen-data", cfg,
                           ["config.json", "dataset.jsonl", "split.json", "popularity.json", "reps.jsonl"], info)


def load_data(cfg: RunConfig) -> Data:
    out = Path(cfg.out_dir)
    doc = read_json(out / "split.json")
    labels = doc["item_labels"] if doc["item_labels"] is not None else list(range(doc["num_items"]))
    ds = corpus.read_dataset(out / "dataset.jsonl", labels)
    ex = lambda rows: [corpus.Example(u, h, t) for u, h, t in rows]  # noqa: E731
    uc = None if doc["user_cluster"] is None else np.asarray(doc["user_cluster"], dtype=np.int64)
    ic = None if doc["item_cluster"] is None else np.asarray(doc["item_cluster"], dtype=np.int64)
    pop = np.asarray(read_json(out / "popularity.json")["popularity"], dtype=np.int64)
    sp = corpus.SplitDataset(ex(doc["train"]), ex(doc["valid"]), ex(doc["test"]), doc["train_sequences"], pop,
                             doc["num_items"], uc, ic, doc["skipped_users"])
    ds.user_cluster, ds.item_cluster = uc, ic
    n = doc["num_items"]
    is_head = np.zeros(n, dtype=bool)
    is_head[doc["head"]] = True
    groups = corpus.HeadTailSplit(frozenset(doc["head"]), frozenset(doc["tail"]), is_head)
    reps, _ = quantize.load_reps(out / "reps.jsonl", labels, cfg.rep_dim)
    return Data(ds, sp, groups, reps)


def stage_tokenize(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    data = load_data(cfg)
    tok = build_tokenization(cfg, data)
    table = tok.table
    trie = skt.build_trie(table, data.groups.head)
    table.to_jsonl(out / "sids.jsonl")
    skt.save_layout(table.layout, out / "layout.json")
    write_json({name: [b.centroids.tolist() for b in books] for name, books in tok.codebooks.items()},
               out / "codebooks.json")
    stats = tokenizer_stats(table, trie, data.groups)
    write_json(stats, out / "tokenizer_stats.json")
    und = build_undesired(cfg, data, table)
    write_json({str(k): list(v) for k, v in sorted(und.items())}, out / "undesired.json")
    return update_manifest(out, "tokenize", cfg,
                           ["sids.jsonl", "layout.json", "codebooks.json", "tokenizer_stats.json",
                            "undesired.json"], {"collisions": table.collisions, "max_z": stats["max_z"]})


def load_table(cfg: RunConfig):
    out = Path(cfg.out_dir)
    layout = skt.load_layout(out / "layout.json")
    table = skt.SidTable.from_jsonl(out / "sids.jsonl", layout)
    und = {int(k): tuple(v) for k, v in read_json(out / "undesired.json").items()}
    return table, und


def stage_train(cfg: RunConfig, resume: str | None = None, stop_after: int | None = None) -> dict:
    out = Path(cfg.out_dir)
    data = load_data(cfg)
    table, und = load_table(cfg)
    trie = skt.build_trie(table, data.groups.head)
    state_path = out / "train_state.json"
    res = M.train(data.split, table, und if cfg.alpha > 0 else {}, cfg.train_config(), trie,
                  checkpoint=state_path, resume=resume, stop_after=stop_after)
    echo = cfg.to_json()
    echo.pop("out_dir")
    M.save_checkpoint(res.params, out / "checkpoint.json", echo, cfg.seed,
                      {"best_epoch": res.best_epoch, "best_valid_hr": res.best_hr})
    M.write_log(res.log[1:], out / "train_log.csv")
    arts = ["checkpoint.json", "train_log.csv"] + (["train_state.json"] if state_path.exists() else [])
    return update_manifest(out, "train", cfg, arts, {"best_epoch": res.best_epoch, "best_valid_hr": res.best_hr,
                                                     "epochs_run": len(res.log) - 1})


def stage_eval(cfg: RunConfig, checkpoint: str | None = None, name: str | None = None) -> dict:
    out = Path(cfg.out_dir)
    data = load_data(cfg)
    table, _ = load_table(cfg)
    trie = skt.build_trie(table, data.groups.head)
    params, _ = M.load_checkpoint(checkpoint or out / "checkpoint.json")
    recs = recommend_lists(cfg, params, trie, data.split.test)
    rep = evaluate_lists(name or Path(cfg.out_dir).name, cfg, data, recs)
    evalx.save_report(rep, out / "metrics.json")
    evalx.write_plot_csv([rep], out / "plot.csv")
    with open(out / "recs.jsonl", "w", encoding="utf-8") as fh:
        for u in sorted(recs):
            fh.write(json.dumps({"user": u, "items": recs[u]}) + "\n")
    pop_recs = evalx.reclist([ex.user for ex in data.split.test],
                             M.recommend_popular(data.split.popularity, data.split.test, max(cfg.cutoffs),
                                                 cfg.exclude_history))
    pop_rep = evaluate_lists("popularity", cfg, data, pop_recs)
    evalx.save_report(pop_rep, out / "metrics_popularity.json")
    return update_manifest(out, "eval", cfg, ["metrics.json", "plot.csv", "recs.jsonl", "metrics_popularity.json"],
                           {"hr_all@10": rep.hr.get("all@10"), "hr_tail@10": rep.hr.get("tail@10"),
                            "exposure": rep.exposure})


def stage_biaslab(cfg: RunConfig, checkpoint: str | None = None) -> tuple[dict, bool]:
    """Theory diagnostics; returns the manifest entry and whether every check passed."""
    out = Path(cfg.out_dir)
    data = load_data(cfg)
    table, und = load_table(cfg)
    trie = skt.build_trie(table, data.groups.head)
    params, _ = M.load_checkpoint(checkpoint or out / "checkpoint.json")
    packed = M.pack_table(table, und, data.split.num_items)

    # gradient check at a random point with larger weights than the init
    rng = np.random.default_rng(cfg.seed)
    probe = M.init_params(table.layout.vocab_size, 8, packed.positions, cfg.seed)
    probe.A = rng.uniform(-0.5, 0.5, probe.A.shape)
    probe.E = rng.uniform(-0.5, 0.5, probe.E.shape)
    tails = [ex for ex in data.split.train if ex.target in data.groups.tail and und.get(ex.target)]
    heads = [ex for ex in data.split.train if ex.target in data.groups.head]
    batch = tails[:3] + heads[:2]
    gc = {}
    for alpha in (0.0, 0.1):
        rep = biaslab.check_model_gradient(probe, batch, packed, alpha, cfg.gradcheck_probes, seed=cfg.seed)
        gc[str(alpha)] = rep.to_json()
    grad_ok = all(v["passed"] for v in gc.values())
    biaslab.save_json(gc, out / "gradcheck.json")

    # rescue on tail examples with a non-empty undesired set
    records = []
    for ex in tails[:20]:
        records.append(biaslab.verify_rescue(params, ex, und[ex.target], 0.1, table,
                                             num_items=data.split.num_items).__dict__)
    rescue_ok = all(r["holds"] for r in records if not r["skipped"])
    biaslab.save_json(records, out / "rescue.json")

    # gamma and suppression under the trained model
    counts = biaslab.BucketCounts(trie, data.split.train, data.split.user_cluster)
    gamma = biaslab.estimate_gamma(params, data.split, trie, counts=counts, sample=cfg.gamma_sample, seed=cfg.seed)
    biaslab.save_json(gamma.to_json(), out / "gamma.json")
    curve = biaslab.suppression_curve(params, trie, cfg.tokenizer, data.split.test, data.split, counts)
    biaslab.write_suppression_csv([curve], out / "suppression.csv")

    # starvation needs a likelihood-only trace
    mle = replace(cfg, alpha=0.0)
    res = M.train(data.split, table, {}, mle.train_config(), trie, keep_snapshots=True)
    st = biaslab.measure_starvation(res.snapshots, data.split, table)
    biaslab.save_json(st.to_json(), out / "starvation.json")
    sign_ok = st.sign_violations == 0
    ok = grad_ok and rescue_ok and sign_ok
    entry = update_manifest(out, "biaslab", cfg,
                            ["gradcheck.json", "rescue.json", "gamma.json", "suppression.csv", "starvation.json"],
                            {"gradcheck_passed": grad_ok, "rescue_holds": rescue_ok, "sign_property": sign_ok,
                             "gamma_median": gamma.to_json()["median"], "suppression_slope": curve.slope})
    return entry, ok


def stage_report(run_dirs, out_dir) -> list:
    """CNS table and combined plot data across the runs' ``metrics.json`` files."""
    reports = []
    for d in run_dirs:
        rep = evalx.load_report(Path(d) / "metrics.json")
        rep.name = Path(d).name if rep.name in {r.name for r in reports} else rep.name
        reports.append(rep)
    rows = evalx.cns(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evalx.write_cns_csv(rows, out / "cns.csv")
    evalx.write_plot_csv(reports, out / "plot.csv")
    return rows
