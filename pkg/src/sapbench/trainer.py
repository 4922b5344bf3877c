"""Minibatch SGD for dense, dropout and adversarially trained models."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import PIXELS, AttackSpec, craft
from .autodiff import Tensor
from .defenses import DropoutConfig, DropoutPolicy
from .errors import InputError, NumericError, TrainingError
from .model import forward


@dataclass(frozen=True)
class AdvConfig:
    mix_fraction: float = 0.2
    lam: float = 2.0
    attack: str = "fgsm"
    step: float = 1.0

    def __post_init__(self):
        if not 0 <= self.mix_fraction <= 1:
            raise InputError(f"mix_fraction must lie in [0, 1], got {self.mix_fraction}")
        if self.lam < 0:
            raise InputError("adversarial lambda must be non-negative")
        if self.attack not in ("fgsm", "iterative"):
            raise InputError(f"adversarial training attack must be fgsm or iterative, got {self.attack!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr_schedule: tuple = ((0, 0.05),)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dropout_rate: float = None
    adv: AdvConfig = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be non-negative and batch_size positive")
        if not self.lr_schedule:
            raise InputError("lr_schedule is empty")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise InputError("learning rates must be positive")
        if self.dropout_rate is not None:
            DropoutConfig(self.dropout_rate)

    def lr_at(self, epoch):
        lr = None
        for start, rate in sorted(self.lr_schedule):
            if epoch >= start:
                lr = rate
        return lr if lr is not None else sorted(self.lr_schedule)[0][1]


@dataclass
class TrainState:
    """Everything besides the parameters needed to resume a run exactly."""

    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def sgd_step(params, grads, lr, momentum, weight_decay, velocity):
    """``v <- momentum * v + g + weight_decay * W``; ``W <- W - lr * v``.

    Updates ``params`` (name -> Tensor) and ``velocity`` (name -> array) in place.
    """
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if g.shape != p.shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        dt = p.dtype.type
        v = g if weight_decay == 0 else g + dt(weight_decay) * p.data
        if name in velocity:
            v = dt(momentum) * velocity[name] + v
        velocity[name] = v
        p.data = p.data - dt(lr) * v
    return params


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _inject_adversarial(snapshot, adv, x, y):
    m = int(round(adv.mix_fraction * len(y)))
    if m == 0 or adv.lam == 0:
        return x
    spec = AttackSpec(kind=adv.attack, lam=adv.lam, step=min(adv.step, adv.lam), gradient_source="dense")
    x = x.copy()
    # dense-source attacks draw no randomness
    x[:m] = craft(snapshot, None, spec, x[:m], y[:m], None, PIXELS)
    return x


def train(model, dataset, config, rng, state=None, on_epoch=None):
    """Train ``model`` in place; return ``(model, history)``.

    Runs epochs ``state.epoch .. config.epochs - 1`` so a run can resume from
    a checkpoint. When ``config.adv`` is set, each minibatch has its leading
    ``mix_fraction`` replaced by attacks crafted on a frozen copy of the
    parameters from the end of the previous epoch.
    """
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    state = state or TrainState()
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.intp)
    dropout = DropoutPolicy(DropoutConfig(config.dropout_rate)) if config.dropout_rate else None
    params = model.params

    for epoch in range(state.epoch, config.epochs):
        lr = config.lr_at(epoch)
        snapshot = model.copy() if config.adv is not None else None
        loss_sum, correct = 0.0, 0
        try:
            for idx in _batches(len(labels), config.batch_size, rng):
                xb, yb = images[idx], labels[idx]
                if snapshot is not None:
                    xb = _inject_adversarial(snapshot, config.adv, xb, yb)
                for p in params.values():
                    p.zero_grad()
                inst = dropout.sample(rng) if dropout is not None else None
                logits = forward(model, Tensor(xb), transform=inst.transform if inst else None)
                loss = ad.softmax_cross_entropy(logits, yb)
                ad.backward(loss)
                sgd_step(params, {k: p.grad for k, p in params.items()}, lr, config.momentum,
                         config.weight_decay, state.velocity)
                loss_sum += float(loss.item()) * len(idx)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
        except NumericError as exc:
            raise TrainingError(str(exc), epoch=epoch) from None
        mean_loss = loss_sum / len(labels)
        if not np.isfinite(mean_loss):
            raise TrainingError("loss diverged", epoch=epoch)
        for name, p in params.items():
            if not np.all(np.isfinite(p.data)):
                raise TrainingError(f"parameter {name} diverged", epoch=epoch)
        row = {"epoch": epoch, "split": "train", "loss": mean_loss, "accuracy": correct / len(labels)}
        state.history.append(row)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(model, state)
    return model, state.history


def adversarial_train(model, dataset, config, rng, state=None, on_epoch=None):
    if config.adv is None:
        raise InputError("adversarial_train needs config.adv")
    return train(model, dataset, config, rng, state=state, on_epoch=on_epoch)
