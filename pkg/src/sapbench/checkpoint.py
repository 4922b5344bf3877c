"""Checkpoint directories: a JSON manifest plus one SAPT file per tensor.

Layout::

    model.json            layers, parameter names/shapes, seed, training metadata
    params/<name>.sapt    parameter tensors
    velocity/<name>.sapt  SGD momentum buffers (present after training)
"""

import json
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor, get_dtype
from .dataio import atomic_write_text, read_tensor, write_tensor
from .errors import CompatibilityError, FormatError
from .model import ModelGraph
from .trainer import TrainState

FORMAT = "sapbench-checkpoint/1"


def save_checkpoint(directory, model, state=None, seed=None, rng=None, metadata=None):
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    for name, t in model.params.items():
        write_tensor(d / "params" / f"{name}.sapt", t)
    state = state or TrainState()
    if state.velocity:
        (d / "velocity").mkdir(exist_ok=True)
        for name, v in state.velocity.items():
            write_tensor(d / "velocity" / f"{name}.sapt", np.asarray(v))
    manifest = {
        "format": FORMAT,
        "version": __version__,
        "model": model.describe(),
        "params": {name: list(t.shape) for name, t in model.params.items()},
        "dtype": str(next(iter(model.params.values())).dtype) if model.params else None,
        "seed": seed,
        "epoch": state.epoch,
        "history": state.history,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "metadata": metadata or {},
    }
    atomic_write_text(d / "model.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory):
    """Return ``(model, state, manifest)``; parameters are cast to the current precision."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "model.json").read_text())
    except FileNotFoundError:
        raise CompatibilityError(f"{d} is not a checkpoint (no model.json)") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / 'model.json'}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CompatibilityError(f"unsupported checkpoint format {manifest.get('format')!r}")
    model = ModelGraph.from_description(manifest["model"])
    dtype = get_dtype()
    params = {}
    for name, shape in manifest["params"].items():
        t = read_tensor(d / "params" / f"{name}.sapt")
        if list(t.shape) != shape:
            raise CompatibilityError(f"parameter {name} has shape {t.shape}, manifest says {shape}")
        params[name] = Tensor(t.data, requires_grad=True, dtype=dtype)
    model.params = params
    try:
        model.check_params()
    except Exception as exc:
        raise CompatibilityError(str(exc)) from None
    velocity = {}
    if (d / "velocity").is_dir():
        for name in manifest["params"]:
            f = d / "velocity" / f"{name}.sapt"
            if f.is_file():
                velocity[name] = read_tensor(f).data.astype(dtype)
    state = TrainState(epoch=manifest.get("epoch", 0), velocity=velocity, history=list(manifest.get("history", [])))
    return model, state, manifest


def restore_rng(manifest):
    state = manifest.get("rng_state")
    if state is None:
        return None
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen
