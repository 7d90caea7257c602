"""Adam optimizer, step-decay schedule, seeded training loop.

Seed derivation: every random stream is a numpy generator seeded with
``derive_seed(root, stream_id)``, the first 8 bytes (little-endian) of
``sha256(b"liifseg:<root>:<stream_id>")``. Streams in use: ``"init"`` for
parameter initialization, ``"shuffle.<epoch>"`` and ``"augment.<epoch>"`` per
epoch. The derivation is platform independent.
"""

import dataclasses
import hashlib
import json
import time

import numpy as np

from . import data as dat
from . import loss as lo
from . import model as mo
from . import numerics as nx
from .errors import ConfigError, GraphError, TrainingDiverged
from .metrics import confusion, f1_scores


def derive_seed(root, stream_id):
    digest = hashlib.sha256(f"liifseg:{root}:{stream_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root, stream_id):
    return np.random.default_rng(derive_seed(root, stream_id))


class SeedBundle:
    """All random streams for one run, derived from a single root seed."""

    def __init__(self, root):
        self.root = root

    def seed(self, stream_id):
        return derive_seed(self.root, stream_id)

    def rng(self, stream_id):
        return substream(self.root, stream_id)


def seed_all(root):
    return SeedBundle(root)


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 16
    initial_lr: float = 5e-4
    decay_factor: float = 0.1
    decay_every: int = 20
    min_lr: float = 1e-7
    loss: lo.LossConfig = dataclasses.field(default_factory=lo.LossConfig)
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    augment: dat.AugmentPolicy | None = None  # None disables augmentation

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be > 0, got {self.initial_lr}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.min_lr <= 0:
            raise ConfigError(f"min_lr must be > 0, got {self.min_lr}")
        self.loss.validate()


def lr_at(epoch, cfg):
    """Step decay: initial_lr * decay_factor^(epoch // decay_every), clamped at min_lr."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return max(cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_every), cfg.min_lr)


class OptimState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state, lr):
    """One bias-corrected Adam update, in place; reads each parameter's grad."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p._grad is None:
            raise GraphError(f"adam_step: parameter {name!r} has no gradient")
        g = p._grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mean_f1: float
    wall_seconds: float

    def to_json(self):
        return json.dumps(dataclasses.asdict(self))


@dataclasses.dataclass
class FitResult:
    log: list
    best_epoch: int
    best_val_f1: float
    best_params: dict  # name -> ndarray snapshot


def evaluate_mean_f1(model, samples, out_res=None):
    """Mean F1 (background ignored) of argmax predictions on ``samples``."""
    res = out_res or model.config.input_resolution
    cm = None
    with nx.no_grad():
        for s in samples:
            s = dat.resize_sample(s, res) if s.labels.shape != (res, res) else s
            img = nx.tensor(s.image[None])
            logits = mo.forward(model, img, res, res)
            pred = logits.data[0].argmax(axis=0)
            c = confusion(pred, s.labels, s.num_classes)
            cm = c if cm is None else cm + c
    _, mean_f1 = f1_scores(cm)
    return mean_f1


def fit(model, train_set, val_set, cfg, out_dir=None, log_fn=None):
    """Train ``model`` in place; returns the per-epoch log and best snapshot.

    Per epoch: seeded shuffle, optional augmentation, forward at the model's
    input resolution, total loss, backward, Adam step; then mean F1 on the
    validation set. Checkpoints (when ``out_dir`` is set): ``last.ckpt`` every
    ``checkpoint_every`` epochs and ``best.ckpt`` for the best validation F1.
    Aborts with :class:`TrainingDiverged` on a non-finite loss.
    """
    cfg.validate()
    if not train_set:
        raise ConfigError("fit: empty training set")
    res = model.config.input_resolution
    bundle = seed_all(cfg.seed)
    log = []
    best = FitResult(log=log, best_epoch=-1, best_val_f1=-1.0, best_params={})

    def emit(record):
        log.append(record)
        line = record.to_json()
        if log_fn:
            log_fn(line)
        if out_dir is not None:
            with open(f"{out_dir}/train_log.jsonl", "a", encoding="utf-8") as f:
                f.write(line + "\n")

    prepared = [
        dat.resize_sample(s, res) if s.labels.shape != (res, res) else s for s in train_set
    ]
    state = OptimState(model.params)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        aug_rng = bundle.rng(f"augment.{epoch}")
        epoch_samples = prepared
        if cfg.augment is not None:
            epoch_samples = []
            for s in prepared:
                a = dat.augment(s, cfg.augment, aug_rng)
                if a.labels.shape != (res, res):
                    a = dat.resize_sample(a, res)
                epoch_samples.append(a)
        losses = []
        for bi, (images, labels) in enumerate(
            dat.batches(epoch_samples, cfg.batch_size, bundle.seed(f"shuffle.{epoch}"))
        ):
            logits = mo.forward(model, nx.tensor(images), res, res)
            loss_t = lo.total_loss(logits, labels, cfg.loss)
            loss_val = float(loss_t.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, bi, f"loss={loss_val}")
            nx.backward(loss_t)
            adam_step(model.params, state, lr)
            model.zero_grad()
            losses.append(loss_val)
        val_f1 = evaluate_mean_f1(model, val_set) if val_set else float("nan")
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)),
            val_mean_f1=val_f1,
            wall_seconds=time.perf_counter() - t0,
        )
        emit(record)
        if val_set and val_f1 > best.best_val_f1:
            best.best_val_f1 = val_f1
            best.best_epoch = epoch
            best.best_params = {n: p.data.copy() for n, p in model.named_parameters()}
            if out_dir is not None:
                mo.save_checkpoint(model, f"{out_dir}/best.ckpt")
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            mo.save_checkpoint(model, f"{out_dir}/last.ckpt")
    if out_dir is not None:
        mo.save_checkpoint(model, f"{out_dir}/last.ckpt")
        if not val_set:
            mo.save_checkpoint(model, f"{out_dir}/best.ckpt")
    if not val_set:
        best.best_params = {n: p.data.copy() for n, p in model.named_parameters()}
        best.best_epoch = cfg.epochs - 1
    return best
