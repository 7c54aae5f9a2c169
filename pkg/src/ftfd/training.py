"""Loss, Adam, and the train/evaluate loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import Batch, ClipTooShort, DataError, VideoEntry, collate, load_clip, choose_start
from .model import FTFDModel
from .rng import stream
from .tensor import Tape, Tensor, _result, backward, stable_sigmoid

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A non-finite loss or gradient appeared during training."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    bn_refresh_batches: int = 30

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.bn_refresh_batches < 0:
            raise ValueError(f"bn_refresh_batches must be >= 0, got {self.bn_refresh_batches}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Training settings paired with ``ModelConfig.desk``: batch 32 halves
        the batch-norm noise that the narrow comparison head is sensitive to."""
        return cls(**{"batch_size": 32, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.

    Evaluated as ``max(z, 0) - z*y + log1p(exp(-|z|))`` so extreme logits
    neither overflow nor hit log(0).
    """
    z = logits.data
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    if z.size == 0:
        raise ValueError("bce_with_logits on an empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be exactly 0 or 1")
    n = z.size
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.array([per.sum() / n])
    return _result(loss, (logits,), lambda g: (g[0] * (stable_sigmoid(z) - y) / n,))


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, state: Adam) -> None:
    """Apply one update using the gradients stored on ``params``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("optimizer state was built for a different parameter list")
    state.step()


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    count: int


@dataclass
class EvalReport:
    accuracy: float
    bce: float
    count: int
    scheme: str
    n: Optional[int] = None
    skipped: list = field(default_factory=list)

    def lines(self) -> list[str]:
        head = f"scheme={self.scheme}" + (f" n={self.n}" if self.scheme == "definite" else "")
        out = [f"{head}\tclips={self.count}\taccuracy={self.accuracy:.6f}\tbce={self.bce:.6f}"]
        out += [f"skipped\t{vid}\t{reason}" for vid, reason in self.skipped]
        return out


def _clips(model: FTFDModel, entries, starts):
    cfg = model.config
    return [load_clip(e, s, cfg.T, cfg.crop, cfg.audio_steps) for e, s in zip(entries, starts)]


def _batch_loss(model: FTFDModel, batch: Batch, train: bool, rng=None):
    res = model.forward(batch.visual, batch.mels, batch.resized, train=train, rng=rng)
    return res.logit, bce_with_logits(res.logit, batch.labels)


def train_epoch(model: FTFDModel, entries: Sequence[VideoEntry], cfg: TrainConfig, epoch: int = 0,
                optimizer: Optional[Adam] = None, frozen: bool = False, scheme: str = "random",
                n: int = 10) -> EpochMetrics:
    """One pass over shuffled mini-batches.

    Randomness (shuffle, clip starts, dropout) derives from ``(cfg.seed, epoch)``.
    With ``frozen=True`` no parameter or statistics is touched and losses
    are computed in eval mode.
    """
    if not entries:
        raise DataError("cannot train on an empty dataset")
    if optimizer is None and not frozen:
        raise ValueError("train_epoch needs an optimizer unless frozen")
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(entries)) if not frozen else np.arange(len(entries))
    T = model.config.T
    total_loss = 0.0
    correct = 0
    seen = 0
    for lo in range(0, len(order), cfg.batch_size):
        chunk = [entries[i] for i in order[lo:lo + cfg.batch_size]]
        starts = [choose_start(e, T, scheme, n, rng) for e in chunk]
        batch = collate(_clips(model, chunk, starts))
        if frozen:
            logit, loss = _batch_loss(model, batch, train=False)
        else:
            model.zero_grad()
            with Tape():
                logit, loss = _batch_loss(model, batch, train=True, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss {value} at epoch {epoch}, batch {lo // cfg.batch_size}")
            backward(loss)
            optimizer.step()
        k = len(chunk)
        total_loss += loss.item() * k
        pred = logit.data[:k, 0] >= 0.0
        correct += int(np.sum(pred == (batch.labels[:k, 0] == 1)))
        seen += k
    return EpochMetrics(total_loss / seen, correct / seen, seen)


def refresh_bn_statistics(model: FTFDModel, entries: Sequence[VideoEntry], cfg: TrainConfig, epoch: int) -> int:
    """Re-estimate batch-norm running statistics at the current weights.

    Runs up to ``cfg.bn_refresh_batches`` train-mode forward passes without a
    tape, so only the running statistics move. With momentum 0.1 the
    estimates otherwise trail the weights by about ten Adam steps, and a
    stale mean shifts every eval-mode logit of the comparison head at once.
    Returns the number of batches used.
    """
    if cfg.bn_refresh_batches == 0 or not entries:
        return 0
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    order = rng.permutation(len(entries))
    T = model.config.T
    used = 0
    for lo in range(0, len(order), cfg.batch_size):
        if used == cfg.bn_refresh_batches:
            break
        chunk = [entries[i] for i in order[lo:lo + cfg.batch_size]]
        if len(chunk) < 2:
            break
        batch = collate(_clips(model, chunk, [choose_start(e, T, "random", rng=rng) for e in chunk]))
        model.forward(batch.visual, batch.mels, batch.resized, train=True, rng=rng)
        used += 1
    return used


def evaluate(model: FTFDModel, entries: Sequence[VideoEntry], scheme: str = "random", n: int = 10,
             seed: int = 0, batch_size: int = 32) -> EvalReport:
    """One clip per video; accuracy at the 0.5 threshold and mean BCE.

    Videos too short for the scheme are skipped and listed in the report.
    """
    rng = stream(seed, "eval")
    T = model.config.T
    usable, starts, skipped = [], [], []
    for e in entries:
        try:
            starts.append(choose_start(e, T, scheme, n, rng))
            usable.append(e)
        except ClipTooShort as exc:
            skipped.append((e.id, str(exc)))
    if not usable:
        raise DataError(f"no video usable for scheme {scheme} (T={T}); {len(skipped)} skipped")
    total, correct = 0.0, 0
    for lo in range(0, len(usable), batch_size):
        batch = collate(_clips(model, usable[lo:lo + batch_size], starts[lo:lo + batch_size]))
        logit, loss = _batch_loss(model, batch, train=False)
        k = len(batch.clips)
        total += loss.item() * k
        correct += int(np.sum((logit.data[:, 0] >= 0.0) == (batch.labels[:, 0] == 1)))
    return EvalReport(correct / len(usable), total / len(usable), len(usable), scheme,
                      n if scheme == "definite" else None, skipped)


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_val_bce: float
    seconds: float


def fit(model: FTFDModel, train: Sequence[VideoEntry], val: Sequence[VideoEntry], cfg: TrainConfig,
        metrics_log: Optional[Path] = None, checkpoint: Optional[Path] = None) -> FitResult:
    """Train with Adam and early stopping on validation BCE.

    The model ends up holding the best-validation parameters. When given,
    ``metrics_log`` receives ``epoch\\tsplit\\tloss\\taccuracy`` lines and
    ``checkpoint`` is rewritten at every validation improvement.
    """
    t0 = time.perf_counter()
    opt = Adam.from_config(model.parameters(), cfg)
    best = (math.inf, -1, None)
    history = []
    log_fh = open(metrics_log, "w") if metrics_log else None
    try:
        if log_fh:
            log_fh.write("epoch\tsplit\tloss\taccuracy\n")
        for epoch in range(1, cfg.max_epochs + 1):
            tr = train_epoch(model, train, cfg, epoch, opt)
            refresh_bn_statistics(model, train, cfg, epoch)
            va = evaluate(model, val, "random", seed=cfg.seed)
            if not math.isfinite(va.bce):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            history.append({"epoch": epoch, "train_loss": tr.loss, "train_acc": tr.accuracy,
                            "val_loss": va.bce, "val_acc": va.accuracy})
            log.info("epoch %d train %.4f/%.3f val %.4f/%.3f", epoch, tr.loss, tr.accuracy, va.bce, va.accuracy)
            if log_fh:
                log_fh.write(f"{epoch}\ttrain\t{tr.loss:.6f}\t{tr.accuracy:.6f}\n")
                log_fh.write(f"{epoch}\tval\t{va.bce:.6f}\t{va.accuracy:.6f}\n")
                log_fh.flush()
            if va.bce < best[0]:
                best = (va.bce, epoch, {k: v.copy() for k, v in model.state_arrays().items()})
                if checkpoint:
                    model.save(checkpoint)
            elif epoch - best[1] >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state(best[2])
    return FitResult(history, best[1], best[0], time.perf_counter() - t0)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
