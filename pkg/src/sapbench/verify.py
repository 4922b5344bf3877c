"""Invariant checks run against a trained checkpoint (``sapbench verify``)."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .attacks import PIXELS, fgsm, input_gradient, iterative_attack, random_perturbation
from .autodiff import Tensor
from .dataio import decode_tensor, encode_tensor
from .defenses import SapConfig, make_policy, sap_mask
from .model import averaged_forward, forward


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _loss(model, x, y, params=None):
    logits = forward(model, Tensor(x), params=params)
    return float(ad.softmax_cross_entropy(logits, y).item())


def _rel(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(model, x, y, gen, n_coords=12, eps=1e-6):
    """Analytic vs central-difference gradients on sampled coordinates (run in 64-bit)."""
    with ad.precision("float64"):
        params = {k: Tensor(v.data, requires_grad=True) for k, v in model.params.items()}
        # saturated pixels make identical patches and hence max-pool ties; a sub-pixel jitter
        # moves the point off those kinks, and the small step keeps differences from crossing others
        xt = Tensor(x + gen.uniform(-0.25, 0.25, size=np.shape(x)), requires_grad=True)
        ad.backward(ad.softmax_cross_entropy(forward(model, xt, params=params), y))
        worst = 0.0
        targets = [("x", xt.data, xt.grad)] + [(k, p.data, p.grad) for k, p in params.items()]
        for name, data, grad in targets:
            # step the input by the same amount in normalised units as the parameters
            step = eps / abs(model.input_scale or 1.0) if name == "x" else eps
            flat = data.reshape(-1)
            idx = gen.choice(flat.size, size=min(n_coords, flat.size), replace=False)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                up = _loss(model, xt.data, y, params)
                flat[i] = orig - step
                down = _loss(model, xt.data, y, params)
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
            worst = max(worst, _rel(grad.reshape(-1)[idx], numeric))
    return worst


def run_checks(model, images, labels, seed=0, sap_instances=20000):
    gen = rngmod.stream(seed, "verify")
    n = min(8, len(labels))
    x = np.asarray(images[:n], dtype=np.float64)
    y = np.asarray(labels[:n], dtype=np.intp)
    checks = []

    worst = check_gradients(model, x, y, gen)
    checks.append(Check("gradient matches central differences", worst < 1e-5, f"max relative error {worst:.2e}"))

    plain = forward(model, Tensor(x)).data
    ident = forward(model, Tensor(x), transform=lambda h, i: h).data
    checks.append(Check("identity transform is bit-identical", np.array_equal(plain, ident), ""))

    acts = []
    forward(model, Tensor(x[:1]), transform=lambda h, i: (acts.append(h.data.reshape(-1).astype(np.float64)), h)[1])
    if acts:
        h = acts[0]
        r = max(1, h.size)
        kept = np.zeros(h.size)
        for _ in range(sap_instances // 100):
            kept += (sap_mask(np.broadcast_to(h, (100, h.size)), r, gen) != 0).sum(axis=0)
        # unbiasedness holds iff each entry is kept with probability q_j, so test the keep counts;
        # the +3 absorbs the discreteness of entries that are almost never (or almost always) dropped
        n = (sap_instances // 100) * 100
        p = np.abs(h) / max(np.abs(h).sum(), 1e-300)
        q = -np.expm1(r * np.log1p(-p))
        # an all-zero row passes through with a mask of ones
        expected = np.full(h.size, float(n)) if not h.any() else n * q
        within = np.abs(kept - expected) <= 5 * np.sqrt(n * q * (1 - q)) + 3
        checks.append(Check("SAP keep frequencies match inverse propensities", bool(within.all()),
                            f"{int((~within).sum())} of {h.size} entries outside"))
        sample = sap_mask(h[None, :], r, gen)[0] * h
        checks.append(Check("SAP keeps signs and zeros", bool(np.all(sample * h >= 0) and np.all(sample[h == 0] == 0)),
                            ""))

    probs = averaged_forward(model, x, make_policy(SapConfig(100)), 5, gen)
    dev = float(np.abs(probs.sum(axis=1) - 1).max())
    checks.append(Check("averaged probabilities sum to one", dev <= 1e-5, f"max deviation {dev:.1e}"))

    worst = 0.0
    for lam in (0.0, 1.0, 2.5, 8.0):
        g = input_gradient(model, x, y)
        outs = [fgsm(x, g, lam), random_perturbation(x, lam, PIXELS, gen)]
        if lam > 0:
            outs.append(iterative_attack(model, None, x, y, lam, min(1.0, lam), 1, PIXELS, gen))
        for o in outs:
            if np.any(o < PIXELS.low) or np.any(o > PIXELS.high):
                worst = np.inf
            worst = max(worst, float(np.abs(o - x).max()) - lam)
    checks.append(Check("attacks stay in the lambda-ball and pixel box", worst <= 1e-6, f"max excess {worst:.1e}"))

    g = input_gradient(model, x, y)
    same = np.array_equal(fgsm(x, g, 4.0), iterative_attack(model, None, x, y, 4.0, 4.0, 1, PIXELS, gen))
    checks.append(Check("one-step iterative attack equals FGSM", same, ""))

    bad = [k for k, p in model.params.items() if encode_tensor(decode_tensor(encode_tensor(p))) != encode_tensor(p)]
    checks.append(Check("parameters round-trip through SAPT", not bad, ", ".join(bad)))
    return checks
