"""Training loop and segment-level evaluation.

One epoch = a deterministic permutation of batches, each doing
forward (backbone -> route -> dispatch [-> residual]) -> loss -> backward ->
optimizer step. The best-validation checkpoint is kept alongside the final
one, and per-epoch metrics land in a CSV.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import FeatureStore, SegmentIndex, make_batches
from .errors import CmoeError, ConfigError, NumericError
from .moe import CmoeModel
from .optim import SCHEDULES, AdamW, constant_lr, cosine_lr
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-5
    seed: int = 42
    schedule: str = "cosine"
    out_dir: Path = Path("runs")

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs and batch size must be >= 1, lr >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {sorted(SCHEDULES)}")
        self.out_dir = Path(self.out_dir)


@dataclass
class EpochMetrics:
    epoch: int
    ce_loss: float
    balance_loss: float
    val_acc: float
    ef: tuple  # per-expert dispatch fraction over the epoch's train batches
    seconds: float


@dataclass
class AssignmentRecord:
    segment_id: str
    source_id: str
    label: str
    predicted: str
    expert: int


@dataclass
class EvalResult:
    segment_accuracy: float
    per_class: dict
    confusion: np.ndarray  # counts, rows = actual class, columns = predicted
    assignments: list

    @property
    def n_segments(self) -> int:
        return int(self.confusion.sum())


@dataclass
class TrainResult:
    model: CmoeModel
    metrics: list
    best_path: Path
    final_path: Path
    best_val_acc: float
    best_epoch: int


def write_metrics(path, metrics: list, num_experts: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "ce_loss", "balance_loss", "val_acc"]
                   + [f"ef_{j}" for j in range(num_experts)] + ["seconds"])
        for m in metrics:
            w.writerow([m.epoch, repr(m.ce_loss), repr(m.balance_loss), repr(m.val_acc)]
                       + [repr(f) for f in m.ef] + [repr(m.seconds)])


def evaluate(model: CmoeModel, index: SegmentIndex, store: FeatureStore,
             class_names: list, batch_size: int = 32) -> EvalResult:
    """Segment-level accuracy, confusion counts, and chosen-expert records.

    Runs in eval mode under no_grad; restores the model's previous mode.
    """
    if len(index) == 0:
        raise CmoeError("cannot evaluate an empty segment index")
    label_to_index = {name: i for i, name in enumerate(class_names)}
    c = len(class_names)
    confusion = np.zeros((c, c), dtype=np.int64)
    assignments = []
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for batch in make_batches(index, store, label_to_index, batch_size, shuffle=False):
                logits, decision = model(Tensor(batch.x))
                pred = np.argmax(logits.data, axis=1)
                for k, sid in enumerate(batch.segment_ids):
                    actual = int(batch.y[k])
                    confusion[actual, pred[k]] += 1
                    assignments.append(AssignmentRecord(
                        segment_id=sid,
                        source_id=sid.rsplit("_", 1)[0],
                        label=class_names[actual],
                        predicted=class_names[int(pred[k])],
                        expert=int(decision.chosen[k]),
                    ))
    finally:
        if was_training:
            model.train()
    correct = int(np.trace(confusion))
    total = int(confusion.sum())
    per_class = {}
    for i, name in enumerate(class_names):
        row = confusion[i].sum()
        per_class[name] = float(confusion[i, i] / row) if row else 0.0
    return EvalResult(correct / total, per_class, confusion, assignments)


def train(model: CmoeModel, cfg: TrainConfig, train_index: SegmentIndex,
          val_index: SegmentIndex, store: FeatureStore, class_names: list) -> TrainResult:
    if len(train_index) == 0:
        raise CmoeError("empty training index")
    label_to_index = {name: i for i, name in enumerate(class_names)}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = cosine_lr if cfg.schedule == "cosine" else constant_lr
    m = model.head.num_experts
    best_path = cfg.out_dir / "best.ckpt"
    final_path = cfg.out_dir / "final.ckpt"
    metrics_path = cfg.out_dir / "metrics.csv"
    metrics: list[EpochMetrics] = []
    best_val, best_epoch = -1.0, -1
    n_train = len(train_index)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = sched(cfg.lr, epoch, cfg.epochs)
        model.train()
        ce_sum = bal_sum = 0.0
        seen = 0
        counts = np.zeros(m, dtype=np.int64)
        for batch in make_batches(train_index, store, label_to_index,
                                  cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch):
            logits, decision = model(Tensor(batch.x))
            total, ce_v, bal_v = model.loss(logits, batch.y, decision)
            if not np.isfinite(total.data):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch segments "
                    f"{list(batch.segment_ids)}")
            opt.zero_grad()
            total.backward()
            opt.step()
            nb = len(batch.y)
            ce_sum += ce_v * nb
            bal_sum += bal_v * nb
            seen += nb
            np.add.at(counts, decision.chosen, 1)
        val_acc = evaluate(model, val_index, store, class_names,
                           cfg.batch_size).segment_accuracy if len(val_index) else 0.0
        em = EpochMetrics(
            epoch=epoch,
            ce_loss=ce_sum / seen,
            balance_loss=bal_sum / seen,
            val_acc=val_acc,
            ef=tuple((counts / n_train).tolist()),
            seconds=time.perf_counter() - t0,
        )
        metrics.append(em)
        write_metrics(metrics_path, metrics, m)  # rewritten per epoch: crash-safe
        if len(val_index) and val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            save_checkpoint(best_path, model)
        logger.info("epoch %d: ce %.4f bal %.4f val %.4f (%.1fs)",
                    epoch, em.ce_loss, em.balance_loss, val_acc, em.seconds)
    save_checkpoint(final_path, model, opt)
    if not best_path.exists():  # no validation set: fall back to the final weights
        save_checkpoint(best_path, model)
    return TrainResult(model, metrics, best_path, final_path, best_val, best_epoch)
