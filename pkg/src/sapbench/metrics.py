"""Accuracy under attack and confidence calibration."""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass

import numpy as np

from . import rng as rngmod
from .attacks import PIXELS, AttackSpec, craft
from .defenses import IdentityPolicy
from .errors import InputError
from .model import averaged_forward, predict

SWEEP_HEADER = ("defense", "attack", "lambda", "mc_samples", "n_passes", "accuracy", "n", "seed")
CALIBRATION_HEADER = ("bin_lo", "bin_hi", "count", "mean_conf", "accuracy")
PAPER_LAMBDAS = (0, 1, 2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class SweepRow:
    defense: str
    attack: str
    lam: float
    mc_samples: int
    n_passes: int
    accuracy: float
    n: int
    seed: int

    @property
    def key(self):
        return (self.defense, self.attack, self.lam, self.mc_samples, self.n_passes)


@dataclass
class EvalResult:
    row: SweepRow
    predictions: np.ndarray
    confidences: np.ndarray
    correct: np.ndarray


def effective_mc(spec, policy):
    """MC samples the adversary actually averaged over (0 when no estimate is formed)."""
    stochastic = policy is not None and not policy.deterministic and spec.gradient_source == "defended"
    if spec.kind == "fgsm" and stochastic:
        return spec.mc_samples
    if spec.kind == "iterative" and stochastic:
        return spec.mc_per_step
    return 0


def evaluate(model, policy, attack, dataset, n_passes, seed, block_size=64, threads=1, box=PIXELS):
    """Accuracy of ``model`` under ``policy`` against ``attack`` on ``dataset``.

    Examples are processed in fixed blocks; block ``b`` draws the attacker's
    randomness from stream ``(seed, "attack", b)`` and the defender's from
    ``(seed, "defend", b)``, so results do not depend on ``threads``.
    """
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty split")
    policy = policy or IdentityPolicy()
    attack = attack or AttackSpec(kind="none")
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.intp)
    starts = range(0, len(labels), block_size)

    def run(b):
        sl = slice(b * block_size, (b + 1) * block_size)
        xb, yb = images[sl], labels[sl]
        x_adv = craft(model, policy, attack, xb, yb, rngmod.stream(seed, "attack", b), box)
        probs = averaged_forward(model, x_adv, policy, n_passes, rngmod.stream(seed, "defend", b))
        return predict(probs)

    jobs = range(len(starts))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(b) for b in jobs]
    preds = np.concatenate([p for p, _ in parts])
    conf = np.concatenate([c for _, c in parts])
    correct = preds == labels
    n_eff = n_passes if not policy.deterministic else 1
    row = SweepRow(policy.name, attack.label(policy), float(attack.lam), effective_mc(attack, policy), n_eff,
                   float(correct.mean()), len(labels), int(seed))
    return EvalResult(row, preds, conf, correct)


@dataclass
class CalibrationRecord:
    edges: np.ndarray
    counts: np.ndarray
    mean_conf: np.ndarray
    accuracy: np.ndarray
    ece: float

    @property
    def occupied(self):
        return self.counts > 0


def calibrate(confidences, correct, bins=10):
    """Reliability bins ``((b-1)/B, b/B]`` and the expected calibration error.

    Empty bins carry NaN mean confidence and accuracy and contribute nothing.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=bool)
    if conf.shape != hit.shape or conf.ndim != 1:
        raise InputError("confidences and correctness flags must be equal-length vectors")
    if bins < 1:
        raise InputError("bins must be positive")
    if conf.size and (np.any(~(conf > 0)) or np.any(conf > 1)):
        raise InputError("confidences must lie in (0, 1]")
    edges = np.arange(bins + 1) / bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    hit_sum = np.bincount(idx, weights=hit.astype(np.float64), minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / counts, np.nan)
        acc = np.where(counts > 0, hit_sum / counts, np.nan)
    n = conf.size
    occ = counts > 0
    ece = float(np.sum(counts[occ] / n * np.abs(acc[occ] - mean_conf[occ]))) if n else 0.0
    return CalibrationRecord(edges, counts, mean_conf, acc, ece)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def read_sweep_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != SWEEP_HEADER:
        raise InputError(f"unexpected sweep header {header}")
    casts = [str, str, float, int, int, float, int, int]
    return [SweepRow(*(c(v) for c, v in zip(casts, row))) for row in reader]


def calibration_csv(rec):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CALIBRATION_HEADER)
    for b in range(len(rec.counts)):
        occupied = rec.counts[b] > 0
        w.writerow([_fmt(float(rec.edges[b])), _fmt(float(rec.edges[b + 1])), int(rec.counts[b]),
                    _fmt(float(rec.mean_conf[b])) if occupied else "",
                    _fmt(float(rec.accuracy[b])) if occupied else ""])
    w.writerow(["ECE", _fmt(rec.ece), "", "", ""])
    return buf.getvalue()
