"""Experiment orchestration behind the CLI subcommands."""

import hashlib
import json
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import rng as rngmod
from .attacks import PIXELS, AttackSpec, craft
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import atomic_write_text, load_dataset, read_tensor, synth_dataset, write_tensor
from .errors import CompatibilityError
from .metrics import calibrate, calibration_csv, effective_mc, evaluate, sweep_csv
from .trainer import TrainState, train


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def build_datasets(cfg, base="."):
    """``(train, eval)`` datasets named by the config's data section."""
    d = cfg.data
    if d.synth is not None:
        s = d.synth
        seed = cfg.seed if s.seed is None else s.seed
        kw = dict(classes=s.classes, image_size=s.image_size, noise_std=s.noise_std, seed=seed,
                  channels=s.channels, contrast=s.contrast, phase_jitter=s.phase_jitter)
        return (synth_dataset(s.n_per_class, split="train", **kw),
                synth_dataset(d.eval_n_per_class, split="val", **kw))
    return load_dataset(_resolve(base, d.train_path)), load_dataset(_resolve(base, d.eval_path))


def eval_dataset(cfg, base="."):
    d = cfg.data
    if d.synth is not None:
        return build_datasets(cfg, base)[1]
    return load_dataset(_resolve(base, d.eval_path))


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, cfg, command, started, extra=None):
    """Atomically write ``manifest.json`` listing every file under ``out`` with its hash."""
    out = Path(out)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "versions": {"sapbench": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {str(p.relative_to(out)): sha256(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def history_csv(history):
    lines = ["epoch,split,loss,accuracy"]
    for r in history:
        lines.append(f"{r['epoch']},{r['split']},{r['loss']!r},{r['accuracy']!r}")
    return "\n".join(lines) + "\n"


def run_train(cfg, out, base="."):
    started = _now()
    ad.set_precision(cfg.precision)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _ = build_datasets(cfg, base)
    model = cfg.model.build(train_ds.image_shape, train_ds.num_classes)
    model.init_params(rngmod.stream(cfg.seed, "init"))
    gen = rngmod.stream(cfg.seed, "train")
    state = TrainState()
    _, history = train(model, train_ds, cfg.train.build(), gen, state=state)
    save_checkpoint(out / "checkpoint", model, state, seed=cfg.seed, rng=gen,
                    metadata={"train": cfg.train.model_dump(mode="json"), "num_classes": train_ds.num_classes})
    (out / "history.csv").write_text(history_csv(history))
    write_manifest(out, cfg, "train", started)
    return model, history


def load_model(cfg, ckpt):
    ad.set_precision(cfg.precision)
    model, _, manifest = load_checkpoint(ckpt)
    if cfg.model.layers or cfg.model.preset:
        expected = cfg.model.build(model.input_shape, model.num_classes).describe()
        if expected != model.describe():
            raise CompatibilityError("checkpoint architecture does not match the config's model section")
    return model, manifest


def eval_cells(cfg):
    """Yield ``(policy, attack_section, AttackSpec)`` for every distinct sweep cell."""
    policies = [d.build() for d in cfg.defenses]
    attacks = cfg.attack or []
    for policy in policies:
        if not attacks:
            yield policy, None, AttackSpec(kind="none")
            continue
        for section in attacks:
            for lam in cfg.eval.lambdas:
                uses_mc = section.kind == "fgsm" and section.gradient_source == "defended" and not policy.deterministic
                for mc in (cfg.eval.mc_samples if uses_mc else cfg.eval.mc_samples[:1]):
                    yield policy, section, section.build(lam, mc)


def _cell_name(row):
    return f"{row.defense}__{row.attack}__lam{row.lam:g}__mc{row.mc_samples}"


def run_eval(cfg, ckpt, out, threads=1, base="."):
    started = _now()
    model, _ = load_model(cfg, ckpt)
    ds = eval_dataset(cfg, base)
    _check_data(model, ds)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, seen = [], set()
    calib = {}
    for policy, _, spec in eval_cells(cfg):
        res = evaluate(model, policy, spec, ds, cfg.eval.n_passes, cfg.seed, cfg.eval.block_size, threads)
        if res.row.key in seen:
            continue
        seen.add(res.row.key)
        rows.append(res.row)
        if cfg.eval.calibration_bins:
            calib[_cell_name(res.row)] = calibrate(res.confidences, res.correct, cfg.eval.calibration_bins)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    if calib:
        (out / "calibration").mkdir(exist_ok=True)
        for name, rec in calib.items():
            (out / "calibration" / f"{name}.csv").write_text(calibration_csv(rec))
    write_manifest(out, cfg, "eval", started, {"checkpoint": str(ckpt)})
    return rows


def _check_data(model, ds):
    if ds.image_shape != model.input_shape:
        raise CompatibilityError(f"data images {ds.image_shape} do not fit model input {model.input_shape}")
    if ds.num_classes != model.num_classes:
        raise CompatibilityError(f"data has {ds.num_classes} classes, model outputs {model.num_classes}")


def run_attack_export(cfg, ckpt, out, base="."):
    """Write ``x``, ``x_adv`` and ``labels`` SAPT files for every attack cell."""
    started = _now()
    model, _ = load_model(cfg, ckpt)
    ds = eval_dataset(cfg, base)
    _check_data(model, ds)
    limit = cfg.eval.export_limit or len(ds)
    x = np.asarray(ds.images[:limit], dtype=ad.get_dtype())
    y = np.asarray(ds.labels[:limit])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    exported = []
    for policy, _, spec in eval_cells(cfg):
        if spec.kind == "none":
            continue
        name = f"{policy.name}__{spec.label(policy)}__lam{spec.lam:g}__mc{effective_mc(spec, policy)}"
        if name in exported:
            continue
        x_adv = craft(model, policy, spec, x, y.astype(np.intp), rngmod.stream(cfg.seed, "export", name), PIXELS)
        d = out / name
        d.mkdir(exist_ok=True)
        write_tensor(d / "x.sapt", x)
        write_tensor(d / "x_adv.sapt", np.asarray(x_adv, dtype=x.dtype))
        write_tensor(d / "labels.sapt", y.astype(np.uint32))
        (d / "attack.json").write_text(json.dumps({"lambda": spec.lam, "attack": spec.label(policy),
                                                   "defense": policy.name, "integer_pixels": spec.integer_pixels},
                                                  indent=2, sort_keys=True) + "\n")
        exported.append(name)
    write_manifest(out, cfg, "attack-export", started, {"checkpoint": str(ckpt)})
    return [out / n for n in exported]


def check_export(directory, tol=1e-6, box=PIXELS):
    """Independent re-read of an exported batch: returns the L-infinity distance and box membership."""
    d = Path(directory)
    meta = json.loads((d / "attack.json").read_text())
    x = read_tensor(d / "x.sapt").data.astype(np.float64)
    xa = read_tensor(d / "x_adv.sapt").data.astype(np.float64)
    dist = float(np.abs(xa - x).max()) if x.size else 0.0
    return {
        "linf": dist,
        "within_ball": dist <= meta["lambda"] + tol,
        "within_box": bool(np.all((xa >= box.low) & (xa <= box.high))),
        "integral": bool(np.all(xa == np.rint(xa))),
    }
