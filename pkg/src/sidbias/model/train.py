"""Mini-batch SGD with momentum on ``nll + alpha * auo``."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .core import DEFAULT_ALPHA, EPS, ModelParams, init_params, pack_examples, pack_table
from .decode import recommend

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = DEFAULT_ALPHA
    lr: float = 0.5
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    eps: float = EPS
    momentum: float = 0.9
    dm: int = 32
    init_gain: float = 1.0
    max_hist: int = 20
    beam_width: int = 20
    valid_k: int = 10
    exclude_history: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""
    params: ModelParams
    velocity: ModelParams
    epoch: int = 0
    best_params: ModelParams | None = None
    best_hr: float = -1.0
    best_epoch: int = 0
    log: list = field(default_factory=list)

    def save(self, path, config: TrainConfig) -> None:
        doc = {
            "format": "sidbias-train-state-1",
            "config": asdict(config),
            "seed": config.seed,
            "epoch": self.epoch,
            "best_hr": self.best_hr,
            "best_epoch": self.best_epoch,
            "log": self.log,
            "params": self.params.to_json(),
            "velocity": self.velocity.to_json(),
            "best_params": self.best_params.to_json() if self.best_params is not None else None,
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path) -> tuple["TrainState", dict]:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        best = ModelParams.from_json(doc["best_params"]) if doc["best_params"] else None
        state = cls(ModelParams.from_json(doc["params"]), ModelParams.from_json(doc["velocity"]),
                    doc["epoch"], best, doc["best_hr"], doc["best_epoch"], doc["log"])
        return state, doc["config"]


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_hr: float
    log: list
    snapshots: list = field(default_factory=list)  # params after each epoch, when requested


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n).astype(np.int64)


def hit_rate_at(items: np.ndarray, targets) -> float:
    targets = np.asarray(targets)
    if len(targets) == 0:
        return 0.0
    return float(np.mean((items == targets[:, None]).any(axis=1)))


def validation_hr(params, valid, trie, config: TrainConfig) -> float:
    if not valid:
        return 0.0
    items, _, _ = recommend(params, valid, trie, config.beam_width, config.valid_k, config.max_hist,
                            config.exclude_history)
    return hit_rate_at(items, [ex.target for ex in valid])


def train(split, table, undesired: dict | None, config: TrainConfig, trie=None, *,
          keep_snapshots: bool = False, checkpoint=None, resume=None, stop_after: int | None = None,
          init: ModelParams | None = None) -> TrainResult:
    """Train on ``split.train`` and keep the parameters of the best validation HR@K epoch.

    ``checkpoint`` is a path rewritten after every epoch; ``resume`` loads one
    and continues.  ``stop_after`` ends the run after that many epochs in total
    (used to simulate an interruption).  Epoch 0 is the initialization.
    """
    from ..skt import build_trie
    if trie is None:
        trie = build_trie(table)
    n_items = split.num_items
    packed = pack_table(table, undesired, n_items)
    ex_ptr, ex_hist, ex_target = pack_examples(split.train, config.max_hist)
    if resume is not None:
        state, _ = TrainState.load(resume)
    else:
        params = init if init is not None else init_params(table.layout.vocab_size, config.dm,
                                                           packed.positions, config.seed, config.init_gain)
        params = params.copy()
        state = TrainState(params, params.zeros_like())
        hr = validation_hr(params, split.valid, trie, config) if config.epochs else 0.0
        state.best_params, state.best_hr, state.best_epoch = params.copy(), hr, 0
        state.log.append({"epoch": 0, "nll": float("nan"), "auo": float("nan"), "total": float("nan"),
                          "valid_hr": hr})
    snapshots = []
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    n = len(ex_target)
    while state.epoch < last:
        e = state.epoch + 1
        order = epoch_order(n, config.seed, e)
        p, v = state.params, state.velocity
        nll, auo = K.train_epoch(*p.blocks(), *v.blocks(), order, int(config.batch_size), float(config.lr),
                                 float(config.momentum), ex_ptr, ex_hist, ex_target, packed.sid_ptr,
                                 packed.sid_tok, packed.eos, packed.allowed, packed.allowed_cnt,
                                 packed.und_ptr, packed.und_items, float(config.alpha), float(config.eps))
        if not (np.isfinite(nll) and all(np.all(np.isfinite(x)) for x in p.blocks())):
            raise TrainingDiverged(f"loss became non-finite in epoch {e} (lr={config.lr}); lower the learning rate")
        nll /= max(n, 1)
        auo /= max(n, 1)
        hr = validation_hr(p, split.valid, trie, config)
        state.log.append({"epoch": e, "nll": nll, "auo": auo, "total": nll + config.alpha * auo, "valid_hr": hr})
        log.info("epoch %d nll=%.4f auo=%.4f valid HR@%d=%.4f", e, nll, auo, config.valid_k, hr)
        if hr > state.best_hr:
            state.best_params, state.best_hr, state.best_epoch = p.copy(), hr, e
        state.epoch = e
        if keep_snapshots:
            snapshots.append(p.copy())
        if checkpoint is not None:
            state.save(checkpoint, config)
    return TrainResult(state.best_params, state.best_epoch, state.best_hr, state.log, snapshots)


def write_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "nll", "auo", "total", "valid_hr@10"])
        for r in rows:
            w.writerow([r["epoch"], repr(float(r["nll"])), repr(float(r["auo"])), repr(float(r["total"])),
                        repr(float(r["valid_hr"]))])
