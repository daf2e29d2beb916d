"""First-order alternating search over weights and architecture logits.

Each iteration takes one momentum-SGD step on the weights using a training
batch, then one Adam step on the logits using a validation batch. Noise is
drawn afresh for each of the two forward passes.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import DatasetSplit
from .network import Context, DiscreteNet, Supernet, predict_logits
from .noise import NoiseInjector, NoisePolicy, NoiseStream, scheduled_sigma
from .optim import SGD, Adam, clip_grad_norm
from .searchspace import Genotype, SearchSpace, derive_genotype
from .tensor import Tensor, backward
import noisydarts.functional as F

__all__ = [
    "SearchConfig", "RetrainConfig", "EpochRecord", "SearchRunRecord", "NonFiniteLossError",
    "RetrainResult", "search", "retrain", "batch_order", "weight_step", "alpha_step",
    "params_checksum",
]


@dataclass
class SearchConfig:
    epochs: int = 25
    batch_size: int = 64
    w_lr: float = 0.025
    w_lr_min: float = 0.0
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_beta1: float = 0.5
    alpha_beta2: float = 0.999
    alpha_weight_decay: float = 1e-3
    grad_clip: float | None = 5.0
    channels: int = 8
    layers: int = 5
    stages: Sequence[int] | None = None
    alpha_jitter: float = 1e-3
    noise_op_sigma: float = 1.0

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "SearchConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class RetrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float | None = 5.0
    channels: int = 8
    layers: int = 5
    stages: Sequence[int] | None = None

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "RetrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown retrain option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    sigma: float
    alpha: dict[str, np.ndarray]
    wall_time: float = 0.0


@dataclass
class SearchRunRecord:
    space: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    initial_alpha: dict[str, np.ndarray] = field(default_factory=dict)
    genotype: Genotype | None = None
    aborted: tuple[int, int] | None = None

    def csv_header(self, space: SearchSpace) -> list[str]:
        cols = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "sigma"]
        for key in sorted(self.initial_alpha):
            kind, pair = key.split(".")
            src, dst = pair.split("-")
            for op in space.ops_of(kind, int(src), int(dst)):
                cols.append(f"{key}/{op}")
        return cols

    def to_csv(self, space: SearchSpace) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header(space))
        for r in self.epochs:
            row = [r.epoch] + [repr(float(v)) for v in (r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.sigma)]
            for key in sorted(r.alpha):
                row.extend(repr(float(v)) for v in r.alpha[key])
            w.writerow(row)
        return buf.getvalue()

    def final_alpha(self) -> dict[str, np.ndarray]:
        return self.epochs[-1].alpha if self.epochs else self.initial_alpha


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, phase: str, record: SearchRunRecord | None = None):
        super().__init__(f"non-finite {phase} loss at epoch {epoch}, step {step}")
        self.epoch, self.step, self.phase, self.record = epoch, step, phase, record


def params_checksum(params: Mapping[str, Tensor]) -> str:
    import hashlib
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def batch_order(n: int, batch_size: int, seed: int, epoch: int, stream: int) -> list[np.ndarray]:
    """Shuffled full batches for one epoch; ``stream`` separates train from val."""
    perm = np.random.default_rng([seed, 2, stream, epoch]).permutation(n)
    bs = min(batch_size, n)
    return [perm[i:i + bs] for i in range(0, n - bs + 1, bs)]


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _set_requires_grad(params: Mapping[str, Tensor], flag: bool) -> None:
    for t in params.values():
        t.requires_grad = flag


def weight_step(net: Supernet, opt: SGD, x: np.ndarray, y: np.ndarray, ctx: Context, epoch: int,
                grad_clip: float | None) -> tuple[float, float]:
    """One SGD step on the supernet weights with the logits held fixed."""
    frozen = {k: Tensor(v.data) for k, v in net.alpha.items()}
    logits = net.forward(x, ctx, alpha=frozen)
    loss = F.cross_entropy(logits, y)
    if not math.isfinite(loss.item()):
        return loss.item(), float("nan")
    backward(loss)
    grads = {k: p.grad for k, p in net.params.items() if p.grad is not None}
    opt.step(clip_grad_norm(grads, grad_clip), epoch)
    for p in net.params.values():
        p.grad = None
    return loss.item(), _accuracy(logits.data, y)


def alpha_step(net: Supernet, opt: Adam, x: np.ndarray, y: np.ndarray, ctx: Context) -> tuple[float, float]:
    """One Adam step on the logits; weights are constants (first-order)."""
    _set_requires_grad(net.params, False)
    try:
        logits = net.forward(x, ctx)
        loss = F.cross_entropy(logits, y)
        if not math.isfinite(loss.item()):
            return loss.item(), float("nan")
        backward(loss)
    finally:
        _set_requires_grad(net.params, True)
    grads = {k: a.grad for k, a in net.alpha.items()}
    opt.step(grads)
    for a in net.alpha.values():
        a.grad = None
    return loss.item(), _accuracy(logits.data, y)


def build_supernet(space: SearchSpace, data: DatasetSplit, hyper: SearchConfig, seed: int) -> Supernet:
    return Supernet(space, c=hyper.channels, num_classes=data.num_classes, layers=hyper.layers,
                    stages=hyper.stages, in_channels=data.channels, seed=seed,
                    alpha_jitter=hyper.alpha_jitter)


def search(space: SearchSpace, policy: NoisePolicy, data: DatasetSplit, hyper: SearchConfig | None = None,
           seed: int = 0, on_epoch_end: Callable[[int, Supernet, SearchRunRecord], None] | None = None,
           net: Supernet | None = None) -> SearchRunRecord:
    """Run the alternating search and return its per-epoch record.

    ``on_epoch_end(epoch, net, record)`` is called after each epoch is
    recorded (used by the Hessian tracker). Raises :class:`NonFiniteLossError`
    carrying the partial record if a loss becomes non-finite.
    """
    hyper = hyper or SearchConfig()
    if len(data.train_y) == 0 or len(data.val_y) == 0:
        raise ValueError("search needs nonempty train and val splits")
    if np.intersect1d(data.train_ids, data.val_ids).size:
        raise ValueError("train and val splits overlap")
    net = net or build_supernet(space, data, hyper, seed)
    record = SearchRunRecord(space.name, seed, initial_alpha=net.alpha_numpy())

    w_opt = SGD(net.params, hyper.w_lr, hyper.w_momentum, hyper.w_weight_decay,
                hyper.w_lr_min, hyper.epochs)
    a_opt = Adam(net.alpha, hyper.alpha_lr, (hyper.alpha_beta1, hyper.alpha_beta2),
                 weight_decay=hyper.alpha_weight_decay)
    noise_stream = NoiseStream(seed * 2 + 1000003)
    op_stream = NoiseStream(seed * 2 + 1000004)
    tx, ty = data.part("train")
    vx, vy = data.part("val")

    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        sigma = scheduled_sigma(policy, epoch, hyper.epochs)
        injector = NoiseInjector(policy, noise_stream, sigma) if policy.placement != "none" else None
        ctx = Context(training=True, update_stats=True, perturb=injector,
                      noise_stream=op_stream, noise_op_sigma=hyper.noise_op_sigma)
        t_batches = batch_order(len(ty), hyper.batch_size, seed, epoch, 0)
        v_batches = batch_order(len(vy), hyper.batch_size, seed, epoch, 1)
        stats = np.zeros(4)
        steps = min(len(t_batches), len(v_batches))
        for step in range(steps):
            tb, vb = t_batches[step], v_batches[step]
            tl, ta = weight_step(net, w_opt, tx[tb], ty[tb], ctx, epoch, hyper.grad_clip)
            if not math.isfinite(tl):
                record.aborted = (epoch, step)
                raise NonFiniteLossError(epoch, step, "train", record)
            vl, va = alpha_step(net, a_opt, vx[vb], vy[vb], ctx)
            if not math.isfinite(vl):
                record.aborted = (epoch, step)
                raise NonFiniteLossError(epoch, step, "val", record)
            stats += (tl, ta, vl, va)
        stats /= max(steps, 1)
        alpha = net.alpha_numpy()
        if not all(np.all(np.isfinite(a)) for a in alpha.values()):
            record.aborted = (epoch, steps)
            raise NonFiniteLossError(epoch, steps, "alpha", record)
        record.epochs.append(EpochRecord(epoch, *map(float, stats), sigma=float(sigma), alpha=alpha,
                                         wall_time=time.perf_counter() - t0))
        if on_epoch_end is not None:
            on_epoch_end(epoch, net, record)

    record.genotype = derive_genotype(record.final_alpha(), space)
    return record


@dataclass
class RetrainResult:
    accuracy: float
    net: DiscreteNet
    train_loss: list[float]


def retrain(genotype: Genotype, space: SearchSpace, data: DatasetSplit, hyper: RetrainConfig | None = None,
            seed: int = 0) -> RetrainResult:
    """Train the discrete network on train+val and report test accuracy."""
    hyper = hyper or RetrainConfig()
    net = DiscreteNet(genotype, space, c=hyper.channels, num_classes=data.num_classes, layers=hyper.layers,
                      stages=hyper.stages, in_channels=data.channels, seed=seed)
    x = np.concatenate([data.part("train")[0], data.part("val")[0]])
    y = np.concatenate([data.train_y, data.val_y])
    opt = SGD(net.params, hyper.lr, hyper.momentum, hyper.weight_decay, hyper.lr_min, hyper.epochs)
    ctx = Context(training=True, update_stats=True)
    losses = []
    for epoch in range(hyper.epochs):
        total, steps = 0.0, 0
        for idx in batch_order(len(y), hyper.batch_size, seed, epoch, 2):
            loss = net.loss(x[idx], y[idx], ctx)
            if not math.isfinite(loss.item()):
                raise NonFiniteLossError(epoch, steps, "retrain")
            if loss.requires_grad:
                backward(loss)
                grads = {k: p.grad for k, p in net.params.items() if p.grad is not None}
                opt.step(clip_grad_norm(grads, hyper.grad_clip), epoch)
                for p in net.params.values():
                    p.grad = None
            total += loss.item()
            steps += 1
        losses.append(total / max(steps, 1))
    tx, tyy = data.part("test")
    acc = _accuracy(predict_logits(net, tx), tyy) if len(tyy) else float("nan")
    return RetrainResult(acc, net, losses)
