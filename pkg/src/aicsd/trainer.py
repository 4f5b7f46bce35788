"""Teacher-student training loop, loss assembly per method, and evaluation.

Methods:

``none``   plain cross entropy (no teacher needed)
``kd``     ``ce + kd_weight * kd``
``icsd``   ``ce + lam * ics``
``aicsd``  ``alpha * (ce + lam * ics) + (1 - alpha) * kd`` with ``alpha`` from the
           ALW schedule, updated once per epoch before its first batch
"""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from aicsd import losses
from aicsd.data import AugmentConfig, augment
from aicsd.errors import ConfigurationError, NonFiniteLossError, ScheduleError
from aicsd.metrics import ConfusionMatrix, argmax_predict, compute_report
from aicsd.models import freeze, save_checkpoint
from aicsd.schedules import ALWConfig, alpha as alw_alpha

logger = logging.getLogger(__name__)

METHODS = ("none", "kd", "icsd", "aicsd")
CSV_FIELDS = (
    "epoch", "lr", "alpha", "loss_total", "loss_ce", "loss_ics", "loss_kd",
    "val_miou", "val_pixacc", "wall_time", "active_components",
)


@dataclass
class TrainConfig:
    method: str = "aicsd"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 9500.0
    temperature: float = 1.0
    kd_weight: float = 1.0
    lambda_in_aicsd: bool = True
    epsilon: float = losses.DEFAULT_EPSILON
    ignore_index: int = losses.DEFAULT_IGNORE_INDEX
    alw: ALWConfig = field(default_factory=ALWConfig)
    augment: AugmentConfig = None
    seed: int = 0
    eval_every: int = 1
    output_dir: str = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method '{self.method}', expected one of {METHODS}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.alw.total_epochs != self.epochs:
            self.alw = replace(self.alw, total_epochs=self.epochs)
        # validates temperature, lambda and epsilon
        self.loss_config()

    def loss_config(self):
        return losses.LossConfig(
            temperature=self.temperature,
            lam=self.lam,
            epsilon=self.epsilon,
            ignore_index=self.ignore_index,
            lambda_in_aicsd=self.lambda_in_aicsd,
        )

    def to_dict(self):
        d = asdict(self)
        d["alw"] = asdict(self.alw)
        d["augment"] = None if self.augment is None else asdict(self.augment)
        return d


def cosine_lr(base_lr, epoch, total_epochs):
    """Cosine-annealed learning rate for a 1-based ``epoch``."""
    if total_epochs < 1 or not 1 <= epoch <= total_epochs:
        raise ScheduleError(f"epoch {epoch} outside 1..{total_epochs}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / total_epochs))


def method_alpha(config, epoch):
    """Weight on ``ce + icsd`` logged for ``epoch``; only ``aicsd`` varies it."""
    return alw_alpha(config.alw, epoch) if config.method == "aicsd" else 1.0


def combine(method, ce, ics, kd, alpha, config):
    """Apply ``method``'s combination rule to already-computed components."""
    if method == "none":
        return ce
    if method == "kd":
        return ce + config.kd_weight * kd
    if method == "icsd":
        return ce + config.lam * ics
    icsd = config.lam * ics if config.lambda_in_aicsd else ics
    return losses.aicsd_loss(ce, icsd, kd, alpha)


ACTIVE = {"none": ("ce",), "kd": ("ce", "kd"), "icsd": ("ce", "ics"), "aicsd": ("ce", "ics", "kd")}


def assemble_loss(method, teacher_logits, student_logits, labels, config, epoch):
    """Compute every loss component and the total for ``method``.

    Components that the method does not use are still computed (without a
    graph) when teacher logits are available, otherwise recorded as 0.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method '{method}'")
    if method != "none" and teacher_logits is None:
        raise ConfigurationError(f"method '{method}' needs teacher logits")
    active = ACTIVE[method]
    ce = losses.cross_entropy_loss(student_logits, labels, config.ignore_index)
    zero = ce.new_zeros(())
    kd = ics = zero
    if teacher_logits is not None:
        with torch.set_grad_enabled(torch.is_grad_enabled() and "kd" in active):
            kd = losses.pixelwise_kd_loss(teacher_logits, student_logits, config.temperature)
        with torch.set_grad_enabled(torch.is_grad_enabled() and "ics" in active):
            ics = losses.inter_class_similarity_loss(teacher_logits, student_logits, config.epsilon)
    alpha = method_alpha(config, epoch)
    total = combine(method, ce, ics, kd, alpha, config)
    return losses.LossBreakdown(
        ce=ce, ics=ics, icsd=config.lam * ics, kd=kd, alpha=alpha, total=total, active=active
    )


class RunLog:
    """Per-epoch training records, serialisable to the metrics CSV."""

    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, record):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch numbers must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        return [r[name] for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})

    @classmethod
    def from_csv(cls, path):
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {k: float(v) for k, v in row.items() if k not in ("epoch", "active_components")}
                rec["epoch"] = int(row["epoch"])
                rec["active_components"] = row["active_components"]
                records.append(rec)
        return cls(records)


def _collate(samples):
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    masks = torch.from_numpy(np.stack([s.mask for s in samples]))
    return images, masks


def _batches(samples, batch_size):
    """Group consecutive equal-size samples into batches."""
    batch = []
    for s in samples:
        if batch and (len(batch) == batch_size or batch[0].mask.shape != s.mask.shape):
            yield batch
            batch = []
        batch.append(s)
    if batch:
        yield batch


@torch.no_grad()
def predict_logits(net, samples, batch_size=8):
    was_training = net.training
    net.eval()
    try:
        return [net(_collate(b)[0]) for b in _batches(samples, batch_size)]
    finally:
        net.train(was_training)


@torch.no_grad()
def evaluate(net, dataset, ignore_index=losses.DEFAULT_IGNORE_INDEX, batch_size=8):
    """Single-scale evaluation at native resolution; leaves ``net`` untouched."""
    if len(dataset) == 0:
        raise ConfigurationError("evaluation dataset is empty")
    conf = ConfusionMatrix(net.num_classes)
    was_training = net.training
    net.eval()
    try:
        for batch in _batches(dataset, batch_size):
            images, masks = _collate(batch)
            conf.update(argmax_predict(net(images)), masks.numpy(), ignore_index)
    finally:
        net.train(was_training)
    return compute_report(conf)


def _check_finite(breakdown, epoch, step):
    for name in ("ce", "kd", "ics", "total"):
        value = getattr(breakdown, name)
        if torch.is_tensor(value) and not torch.isfinite(value).all():
            raise NonFiniteLossError(name, epoch, step)


def train(config, teacher, student, train_set, val_set=None, progress=None):
    """Optimise ``student`` with SGD under ``config``.

    The teacher is frozen on entry and never updated.  When ``config.output_dir``
    is set, the run writes ``metrics.csv`` (rewritten after every epoch),
    ``last.ckpt``, ``best.ckpt`` and ``run.json`` there.

    Returns:
        ``(student, RunLog)``
    """
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    needs_teacher = config.method != "none"
    if needs_teacher and teacher is None:
        raise ConfigurationError(f"method '{config.method}' requires a teacher network")
    if teacher is not None:
        freeze(teacher)
        if teacher.num_classes != student.num_classes:
            raise ConfigurationError("teacher and student class counts differ")
    use_teacher = teacher is not None and needs_teacher
    out = Path(config.output_dir) if config.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    params = [p for p in student.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)

    # without augmentation the teacher sees the same inputs every epoch
    cached_teacher = None
    if use_teacher and config.augment is None:
        cached_teacher = torch.cat(predict_logits(teacher, train_set, config.batch_size))

    log = RunLog()
    best = {"miou": -1.0}
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        lr = cosine_lr(config.lr, epoch, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        alpha = method_alpha(config, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        sums = {"total": 0.0, "ce": 0.0, "ics": 0.0, "kd": 0.0}
        n_steps = 0
        student.train()
        for step, start_idx in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start_idx : start_idx + config.batch_size]
            if config.augment is not None:
                batch = [augment(train_set[i], config.augment, int(i), epoch) for i in idx]
            else:
                batch = [train_set[i] for i in idx]
            images, masks = _collate(batch)
            teacher_logits = None
            if cached_teacher is not None:
                teacher_logits = cached_teacher[torch.from_numpy(idx)]
            elif use_teacher:
                with torch.no_grad():
                    teacher_logits = teacher(images)
            breakdown = assemble_loss(config.method, teacher_logits, student(images), masks, config, epoch)
            _check_finite(breakdown, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            for k, v in breakdown.as_floats().items():
                if k in sums:
                    sums[k] += v
            n_steps += 1

        record = {
            "epoch": epoch,
            "lr": lr,
            "alpha": alpha,
            "loss_total": sums["total"] / n_steps,
            "loss_ce": sums["ce"] / n_steps,
            "loss_ics": sums["ics"] / n_steps,
            "loss_kd": sums["kd"] / n_steps,
            "val_miou": math.nan,
            "val_pixacc": math.nan,
            "active_components": "+".join(ACTIVE[config.method]),
        }
        report = None
        if val_set and (epoch % config.eval_every == 0 or epoch == config.epochs):
            report = evaluate(student, val_set, config.ignore_index, config.batch_size)
            record["val_miou"], record["val_pixacc"] = report.miou, report.pixel_accuracy
        record["wall_time"] = time.perf_counter() - start
        log.append(record)
        logger.info(
            "epoch %d/%d lr=%.5f alpha=%.4f loss=%.4f ce=%.4f ics=%.3g kd=%.4f miou=%.4f",
            epoch, config.epochs, lr, alpha, record["loss_total"], record["loss_ce"],
            record["loss_ics"], record["loss_kd"], record["val_miou"],
        )
        if progress is not None:
            progress(record)

        if out is not None:
            log.to_csv(out / "metrics.csv")
            if report is not None and report.miou > best["miou"]:
                best = {"miou": report.miou, "epoch": epoch, "report": report.to_dict()}
                save_checkpoint(student, out / "best.ckpt", meta={"epoch": epoch, "method": config.method})
    if out is not None:
        save_checkpoint(student, out / "last.ckpt", meta={"epoch": config.epochs, "method": config.method})
        if not (out / "best.ckpt").exists():
            # no validation set: the final weights are the best we know of
            save_checkpoint(student, out / "best.ckpt", meta={"epoch": config.epochs, "method": config.method})
        summary = {
            "method": config.method,
            "seed": config.seed,
            "config": config.to_dict(),
            "student": asdict(student.config),
            "best": best if best["miou"] >= 0 else None,
        }
        (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    return student, log
