"""Training loop, early stopping, evaluation and history export."""
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .classifier import DuoClassifier
from .data import ClassificationData, ParallelData, make_batches
from .errors import ContractError, NonFiniteError, TrainingDiverged
from .metrics import accuracy, bleu, perplexity, token_accuracy
from .optim import Adam, lr_schedule
from .rng import SplitMix64

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_metric", "seconds")


@dataclass
class SeedStreams:
    init: SplitMix64
    shuffle: SplitMix64
    dropout: SplitMix64


def seed_streams(seed: int) -> SeedStreams:
    root = SplitMix64(seed)
    return SeedStreams(root.spawn(), root.spawn(), root.spawn())


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    warmup: int = 200
    lr_scale: float = 1.0
    smoothing: float = 0.0
    seed: int = 0
    eval_bleu: bool = True
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    seconds: float
    extra: dict = field(default_factory=dict)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    steps: int = 0

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ContractError("epoch indices must increase")
        self.records.append(rec)

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]

    def to_csv(self, timing=True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.records:
            w.writerow([r.epoch, fmt6(r.train_loss), fmt6(r.val_loss), fmt6(r.val_metric),
                        fmt6(r.seconds if timing else 0.0)])
        return buf.getvalue()


def fmt6(x) -> str:
    return f"{x:.6g}"


def early_stop_check(val_losses, patience=10):
    """Return ``(stop, best_epoch)`` for a 1-based validation-loss history.

    The best epoch is the earliest minimum. Training stops once ``patience``
    epochs have passed since it without a strictly lower loss.
    """
    if not val_losses:
        raise ContractError("early stopping needs at least one epoch")
    best = min(range(len(val_losses)), key=lambda i: (val_losses[i], i)) + 1
    return len(val_losses) - best >= patience, best


# --------------------------------------------------------------------------
# evaluation


def _mean_nll(model, data, batch_size):
    total = 0.0
    weight = 0
    with ad.no_grad():
        for batch in make_batches(data, batch_size, shuffle=False):
            loss = float(model.loss(batch).data)
            if isinstance(data, ParallelData):
                n = int((batch.tgt_out != 0).sum())
            else:
                n = batch.size
            total += loss * n
            weight += n
    return total / weight


def evaluate(model, data, batch_size=64, with_bleu=True) -> dict:
    """Accuracy for classifiers; BLEU, token accuracy and perplexity for translators."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on empty data")
    nll = _mean_nll(model, data, batch_size)
    if isinstance(data, ClassificationData):
        preds = []
        for batch in make_batches(data, batch_size, shuffle=False):
            preds.extend(model.predict(batch.ids).tolist())
        acc = accuracy(preds, data.labels)
        return {"loss": nll, "accuracy": acc, "metric": acc}
    out = {"loss": nll, "perplexity": perplexity(nll)}
    if with_bleu:
        hyps = []
        for start in range(0, len(data), batch_size):
            hyps.extend(model.greedy_decode(data.sources[start:start + batch_size]))
        out["bleu"] = bleu(hyps, data.targets)
        out["token_accuracy"] = token_accuracy(hyps, data.targets)
        out["metric"] = out["bleu"]
    else:
        out["metric"] = float("nan")
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: TrainHistory
    best_state: dict


def train_loop(model, train, val, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Adam with the warmup schedule, per-epoch validation and early stopping.

    The model ends up holding the parameters of the best validation epoch.
    """
    if val is None or len(val) == 0:
        raise ContractError("train_loop needs a validation split")
    streams = seed_streams(cfg.seed)
    opt = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.eps,
               frozen_rows=model.frozen_rows())
    history = TrainHistory()
    best_state = {n: p.data.copy() for n, p in model.named_parameters().items()}
    best_loss = math.inf
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        nb = 0
        for batch in make_batches(train, cfg.batch_size, streams.shuffle, shuffle=True):
            step += 1
            opt.zero_grad()
            try:
                loss = model.loss(batch, training=True, rng=streams.dropout, smoothing=cfg.smoothing)
                ad.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch} step {step}: loss is {value}")
            opt.step(cfg.lr_scale * lr_schedule(step, model.model_dim, cfg.warmup))
            total += value
            nb += 1
        metrics = evaluate(model, val, with_bleu=cfg.eval_bleu or isinstance(val, ClassificationData))
        rec = EpochRecord(epoch, total / nb, metrics["loss"], metrics["metric"],
                          time.perf_counter() - t0,
                          {k: v for k, v in metrics.items() if k not in ("loss", "metric")})
        history.append(rec)
        if rec.val_loss < best_loss:
            best_loss = rec.val_loss
            best_state = {n: p.data.copy() for n, p in model.named_parameters().items()}
        logger.info("epoch %d  train %.4f  val %.4f  metric %.4f", epoch, rec.train_loss,
                    rec.val_loss, rec.val_metric)
        if on_epoch is not None:
            on_epoch(rec)
        stop, best_epoch = early_stop_check(history.val_losses, cfg.patience)
        history.best_epoch = best_epoch
        if stop:
            history.stopped_early = True
            break
    history.steps = step
    model.load_state_dict(best_state)
    return TrainResult(history, best_state)


def train_steps(model, batch, n_steps, cfg: TrainConfig, rng=None):
    """Repeat optimizer steps on one batch; returns the loss per step."""
    opt = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.eps,
               frozen_rows=model.frozen_rows())
    rng = rng or seed_streams(cfg.seed).dropout
    losses = []
    for step in range(1, n_steps + 1):
        opt.zero_grad()
        loss = model.loss(batch, training=True, rng=rng, smoothing=cfg.smoothing)
        ad.backward(loss)
        opt.step(cfg.lr_scale * lr_schedule(step, model.model_dim, cfg.warmup))
        losses.append(float(loss.data))
    return losses
