"""Defender strategies.

A policy is an immutable description; :meth:`DefensePolicy.sample` turns it
into one concrete instance using an explicit random generator. Activation
policies (SAP, dropout, RNA, RSA) act at each hooked activation map, one map
per example. Weight policies (RNW, RSW, DWP, SWP) rewrite every weight
tensor once per forward pass; biases are left untouched.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import rng as rngmod
from .autodiff import Tensor
from .errors import InputError

# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class SapConfig:
    k: float = 100.0
    per_layer: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.k, *self.per_layer.values()):
            if not v > 0:
                raise InputError(f"SAP sample percentage must be positive, got {v}")


@dataclass(frozen=True)
class NoiseConfig:
    kind: str
    std: float

    def __post_init__(self):
        if self.kind not in ("RNW", "RSW", "RNA", "RSA"):
            raise InputError(f"unknown noise kind {self.kind!r}")
        if not self.std >= 0:
            raise InputError(f"noise std must be non-negative, got {self.std}")


@dataclass(frozen=True)
class PruneConfig:
    kind: str
    keep_percent: float

    def __post_init__(self):
        if self.kind not in ("DWP", "SWP"):
            raise InputError(f"unknown pruning kind {self.kind!r}")
        if not self.keep_percent > 0:
            raise InputError(f"keep_percent must be positive, got {self.keep_percent}")
        if self.kind == "DWP" and self.keep_percent > 100:
            raise InputError("DWP keep_percent cannot exceed 100")


@dataclass(frozen=True)
class DropoutConfig:
    rate: float

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise InputError(f"dropout rate must lie in [0, 1), got {self.rate}")


def draws_for(percent, size):
    """``ceil(percent / 100 * size)`` computed exactly."""
    return max(1, math.ceil(Fraction(str(percent)) * size / 100))


# ---------------------------------------------------------------------------
# sampling primitives


def _draw_counts(p, r, rng):
    """How often each entry is hit by ``r`` categorical draws with replacement.

    ``p`` is ``[rows, a]`` with rows on the simplex. The count vector of ``r``
    independent draws is multinomial, so it is sampled directly rather than
    draw by draw.
    """
    try:
        return rng.multinomial(r, p)
    except ValueError:
        # rounding pushed a row's leading entries past 1, which numpy rejects
        head = p[:, :-1].sum(axis=1, keepdims=True)
        return rng.multinomial(r, np.concatenate([p[:, :-1] / np.maximum(head, 1.0), p[:, -1:]], axis=1))


def sap_mask(values, r, rng):
    """Inverse-propensity keep mask for each row of ``values``.

    Entry ``j`` of a row is kept when drawn at least once in ``r`` draws with
    probability ``|v_j| / sum|v|`` and then scaled by ``1 / (1 - (1 - p_j)^r)``.
    Rows that are entirely zero get a mask of ones.
    """
    if r < 1:
        raise InputError(f"number of draws must be positive, got {r}")
    v = np.abs(np.asarray(values, dtype=np.float64))
    if v.ndim == 1:
        v = v[None, :]
    totals = v.sum(axis=1)
    live = totals > 0
    if not live.all():
        mask = np.ones_like(v)
        if live.any():
            mask[live] = sap_mask(v[live], r, rng)
        return mask
    p = v / totals[:, None]
    keep = _draw_counts(p, int(r), rng) > 0
    with np.errstate(divide="ignore", over="ignore"):
        keep_prob = -np.expm1(r * np.log1p(-p))
        # only drawn entries are read, and those have keep_prob > 0
        return np.where(keep, 1.0 / keep_prob, 0.0)


def _rows(t):
    d = t.data
    return d.reshape(d.shape[0], -1) if d.ndim > 1 else d.reshape(1, -1)


def _masked(h, mask):
    return h * Tensor(mask.reshape(h.shape), dtype=h.dtype)


# ---------------------------------------------------------------------------
# transforms on a single activation map or weight tensor


def sap_transform(h, r, rng):
    """SAP on one activation map ``h`` (any shape) with ``r`` draws."""
    return _masked(h, sap_mask(h.data.reshape(1, -1), r, rng))


def dropout_mask(shape, rate, rng):
    if not 0 <= rate < 1:
        raise InputError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout_transform(h, rate, rng):
    return _masked(h, dropout_mask(h.shape, rate, rng))


def _check_std(s):
    if not s >= 0:
        raise InputError(f"noise std must be non-negative, got {s}")


def rnw_transform(w, s, rng):
    _check_std(s)
    return Tensor(w.data + rng.normal(0.0, s, size=w.shape), dtype=w.dtype)


def rsw_transform(w, s, rng):
    _check_std(s)
    return Tensor(w.data * rng.normal(1.0, s, size=w.shape), dtype=w.dtype)


def rna_transform(h, s, rng):
    _check_std(s)
    return h + Tensor(rng.normal(0.0, s, size=h.shape), dtype=h.dtype)


def rsa_transform(h, s, rng):
    _check_std(s)
    return _masked(h, rng.normal(1.0, s, size=h.shape))


def dwp_transform(w, keep_percent):
    """Keep the largest-magnitude ``keep_percent`` of entries; ties go to lower flat index."""
    if not 0 < keep_percent <= 100:
        raise InputError(f"keep_percent must lie in (0, 100], got {keep_percent}")
    flat = w.data.ravel()
    n_keep = min(flat.size, draws_for(keep_percent, flat.size))
    order = np.argsort(-np.abs(flat.astype(np.float64)), kind="stable")
    out = np.zeros_like(flat)
    out[order[:n_keep]] = flat[order[:n_keep]]
    return Tensor(out.reshape(w.shape), dtype=w.dtype)


def swp_transform(w, r, rng):
    """SAP-style sampling over the entries of a weight tensor."""
    mask = sap_mask(w.data.reshape(1, -1), r, rng)
    return Tensor(w.data * mask.reshape(w.shape), dtype=w.dtype)


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class PolicyInstance:
    """One realised defender instance ``p``.

    ``transform`` is applied at hooked activations; ``weight_fn`` maps the
    model's parameter store to the one used for this pass.
    """

    transform: object = None
    weight_fn: object = None

    def weights(self, model):
        return None if self.weight_fn is None else self.weight_fn(model)


class DefensePolicy:
    family = "none"
    deterministic = True

    @property
    def name(self):
        return "dense"

    def sample(self, rng):
        return PolicyInstance()

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"


class IdentityPolicy(DefensePolicy):
    pass


class SapPolicy(DefensePolicy):
    family = "activation"
    deterministic = False

    def __init__(self, config):
        self.config = config

    @property
    def name(self):
        return f"sap-{self.config.k:g}"

    def draws(self, size, position=None):
        k = self.config.per_layer.get(position, self.config.k)
        return draws_for(k, size)

    def sample(self, rng):
        gen = rngmod.child(rng, "sap")

        def transform(h, position):
            rows = _rows(h)
            return _masked(h, sap_mask(rows, self.draws(rows.shape[1], position), gen))

        return PolicyInstance(transform=transform)


class DropoutPolicy(DefensePolicy):
    family = "activation"

    def __init__(self, config):
        self.config = config
        self.deterministic = config.rate == 0

    @property
    def name(self):
        return f"dropout-{self.config.rate:g}"

    def sample(self, rng):
        gen = rngmod.child(rng, "dropout")
        return PolicyInstance(transform=lambda h, position: dropout_transform(h, self.config.rate, gen))


_NOISE_FNS = {"RNA": rna_transform, "RSA": rsa_transform, "RNW": rnw_transform, "RSW": rsw_transform}


class NoisePolicy(DefensePolicy):
    def __init__(self, config):
        self.config = config
        self.family = "activation" if config.kind in ("RNA", "RSA") else "weight"
        self.deterministic = config.std == 0

    @property
    def name(self):
        return f"{self.config.kind.lower()}-{self.config.std:g}"

    def sample(self, rng):
        gen = rngmod.child(rng, self.config.kind)
        fn, s = _NOISE_FNS[self.config.kind], self.config.std
        if self.family == "activation":
            return PolicyInstance(transform=lambda h, position: fn(h, s, gen))
        return PolicyInstance(weight_fn=lambda model: _map_weights(model, lambda w: fn(w, s, gen)))


class PrunePolicy(DefensePolicy):
    family = "weight"

    def __init__(self, config):
        self.config = config
        self.deterministic = config.kind == "DWP"

    @property
    def name(self):
        return f"{self.config.kind.lower()}-{self.config.keep_percent:g}"

    def sample(self, rng):
        k = self.config.keep_percent
        if self.config.kind == "DWP":
            return PolicyInstance(weight_fn=lambda model: _map_weights(model, lambda w: dwp_transform(w, k)))
        gen = rngmod.child(rng, "SWP")
        return PolicyInstance(
            weight_fn=lambda model: _map_weights(model, lambda w: swp_transform(w, draws_for(k, w.size), gen)))


def _map_weights(model, fn):
    return {name: fn(t) if name.startswith("W") else t for name, t in model.params.items()}


def make_policy(config):
    """Build the policy described by ``config`` (``None`` means the dense model)."""
    if config is None:
        return IdentityPolicy()
    if isinstance(config, SapConfig):
        return SapPolicy(config)
    if isinstance(config, DropoutConfig):
        return DropoutPolicy(config)
    if isinstance(config, NoiseConfig):
        return NoisePolicy(config)
    if isinstance(config, PruneConfig):
        return PrunePolicy(config)
    raise InputError(f"not a defense config: {config!r}")
