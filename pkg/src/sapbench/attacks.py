"""L-infinity attacks in raw pixel units."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .defenses import IdentityPolicy
from .errors import InputError
from .model import forward

ATTACK_KINDS = ("none", "random", "fgsm", "iterative")


@dataclass(frozen=True)
class PixelBox:
    low: float = 0.0
    high: float = 255.0

    def __post_init__(self):
        if not self.low < self.high:
            raise InputError(f"empty pixel box [{self.low}, {self.high}]")

    def clip(self, x):
        return np.clip(x, self.low, self.high)


PIXELS = PixelBox()


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "fgsm"
    lam: float = 0.0
    step: float = 1.0
    mc_samples: int = 100
    mc_per_step: int = 10
    gradient_source: str = "dense"
    sign_then_average: bool = False
    integer_pixels: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InputError(f"unknown attack kind {self.kind!r}")
        if self.lam < 0:
            raise InputError(f"lambda must be non-negative, got {self.lam}")
        if self.kind == "iterative" and not self.step > 0:
            raise InputError(f"iterative step must be positive, got {self.step}")
        if self.mc_samples < 1 or self.mc_per_step < 1:
            raise InputError("MC sample counts must be positive")
        if self.gradient_source not in ("dense", "defended"):
            raise InputError(f"gradient_source must be 'dense' or 'defended', got {self.gradient_source!r}")

    def label(self, policy=None):
        if self.kind in ("none", "random"):
            return self.kind
        if self.gradient_source == "dense" or policy is None or policy.deterministic:
            return f"{self.kind}-dense"
        return f"{self.kind}-{policy.name}"


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def input_gradient(model, x, y, instance=None):
    """Per-example gradient of the cross-entropy loss with respect to ``x``.

    The batch loss is a mean, so its gradient is rescaled by the batch size
    to give each example the gradient of its own loss.
    """
    xt = Tensor(_values(x), requires_grad=True)
    if instance is None:
        logits = forward(model, xt)
    else:
        logits = forward(model, xt, transform=instance.transform, params=instance.weights(model))
    ad.backward(ad.softmax_cross_entropy(logits, y))
    return xt.grad * xt.dtype.type(xt.shape[0])


def mc_gradient(model, policy, x, y, n, rng, sign_then_average=False):
    """Monte Carlo estimate of the expected input gradient under ``policy``.

    Each of the ``n`` samples differentiates through a freshly drawn instance
    whose masks stay fixed during differentiation. Deterministic policies
    are differentiated once.
    """
    if n < 1:
        raise InputError("n must be positive")
    policy = policy or IdentityPolicy()
    if policy.deterministic:
        g = input_gradient(model, x, y, policy.sample(rng))
        return np.sign(g) if sign_then_average else g
    total = None
    for _ in range(n):
        g = input_gradient(model, x, y, policy.sample(rng)).astype(np.float64)
        if sign_then_average:
            g = np.sign(g)
        total = g if total is None else total + g
    return (total / n).astype(ad.get_dtype())


def _into_ball(x_adv, x, lam):
    # x + lam rounds to the working dtype and can land half an ulp outside the ball
    over = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)) > lam
    return np.where(over, np.nextafter(x_adv, x), x_adv) if over.any() else x_adv


def _round_into(x_adv, x, lam, box):
    # x + lam can round onto the next integer; step back off it when it does
    x64 = x.astype(np.float64)
    lo, hi = np.ceil(x64 - lam), np.floor(x64 + lam)
    lo = np.maximum(np.where(x64 - lo > lam, lo + 1, lo), box.low)
    hi = np.minimum(np.where(hi - x64 > lam, hi - 1, hi), box.high)
    return np.clip(np.rint(x_adv.astype(np.float64)), lo, hi).astype(x_adv.dtype)


def fgsm(x, grad, lam, box=PIXELS, integer_pixels=False):
    """``clip_box(x + lam * sign(grad))`` with ``sign(0) = 0``."""
    if lam < 0:
        raise InputError(f"lambda must be non-negative, got {lam}")
    xv, g = _values(x), _values(grad)
    if xv.shape != g.shape:
        raise InputError(f"gradient shape {g.shape} != input shape {xv.shape}")
    out = _into_ball(box.clip(xv + xv.dtype.type(lam) * np.sign(g).astype(xv.dtype)), xv, lam)
    if integer_pixels:
        out = _round_into(out, xv, lam, box)
    return out


def n_steps(lam, k):
    return 0 if lam == 0 else math.ceil(lam / k - 1e-9)


def iterative_attack(model, policy, x, y, lam, k, mc_per_step, box, rng, integer_pixels=False,
                     sign_then_average=False):
    """Repeated sign-gradient steps of size ``k``, projected into the ``lam``-ball and the pixel box."""
    if not k > 0:
        raise InputError(f"step size must be positive, got {k}")
    if lam < 0:
        raise InputError(f"lambda must be non-negative, got {lam}")
    xv = _values(x)
    if lam == 0:
        return xv.copy()
    if k > lam:
        raise InputError(f"step size {k} exceeds lambda {lam}")
    dt = xv.dtype.type
    lo, hi = xv - dt(lam), xv + dt(lam)
    cur = xv
    for _ in range(n_steps(lam, k)):
        g = mc_gradient(model, policy, cur, y, mc_per_step, rng, sign_then_average)
        cur = box.clip(np.clip(cur + dt(k) * np.sign(g).astype(xv.dtype), lo, hi))
    cur = _into_ball(cur, xv, lam)
    if integer_pixels:
        cur = _round_into(cur, xv, lam, box)
    return cur


def random_perturbation(x, lam, box, rng, integer_pixels=False):
    """Uniform random corner of the ``lam``-cube, clipped to the box."""
    if lam < 0:
        raise InputError(f"lambda must be non-negative, got {lam}")
    xv = _values(x)
    sigma = rng.integers(0, 2, size=xv.shape).astype(xv.dtype) * 2 - 1
    out = _into_ball(box.clip(xv + xv.dtype.type(lam) * sigma), xv, lam)
    if integer_pixels:
        out = _round_into(out, xv, lam, box)
    return out


def craft(model, policy, spec, x, y, rng, box=PIXELS):
    """Adversarial version of batch ``x`` under ``spec``.

    The attacker differentiates either the dense model or the defended one,
    drawing its own instances from ``rng``.
    """
    xv = _values(x)
    source = policy if spec.gradient_source == "defended" and policy is not None else IdentityPolicy()
    if spec.kind == "none" or spec.lam == 0:
        return xv.copy()
    if spec.kind == "random":
        return random_perturbation(xv, spec.lam, box, rng, spec.integer_pixels)
    if spec.kind == "fgsm":
        g = mc_gradient(model, source, xv, y, spec.mc_samples, rng, spec.sign_then_average)
        return fgsm(xv, g, spec.lam, box, spec.integer_pixels)
    return iterative_attack(model, source, xv, y, spec.lam, min(spec.step, spec.lam), spec.mc_per_step, box, rng,
                            spec.integer_pixels, spec.sign_then_average)
