"""Command-line entry point: ``sapbench <subcommand> ...``.

Exit codes: 0 success, 2 configuration, 3 data, 4 numeric failure,
5 invariant breach or internal error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import autodiff as ad
from .config import load_config
from .dataio import save_dataset, synth_dataset
from .errors import ConfigError, InvariantError, SapError

log = logging.getLogger("sapbench")


def _config(args, check_paths=True):
    cfg = load_config(args.config, check_paths=check_paths)
    if args.precision:
        cfg = cfg.model_copy(update={"precision": args.precision})
    return cfg, Path(args.config).parent


def _out(args, cfg):
    out = args.out or cfg.output_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return Path(out)


def cmd_train(args):
    from .runner import run_train

    cfg, base = _config(args)
    out = _out(args, cfg)
    _, history = run_train(cfg, out, base)
    if history:
        last = history[-1]
        log.info("epoch %d loss %.4f accuracy %.4f", last["epoch"], last["loss"], last["accuracy"])
    print(out / "checkpoint")
    return 0


def cmd_eval(args):
    from .runner import run_eval

    cfg, base = _config(args)
    out = _out(args, cfg)
    rows = run_eval(cfg, args.model, out, threads=args.threads, base=base)
    for r in rows:
        log.info("%s %s lambda=%g mc=%d accuracy=%.4f", r.defense, r.attack, r.lam, r.mc_samples, r.accuracy)
    print(out / "sweep.csv")
    return 0


def cmd_attack_export(args):
    from .runner import check_export, run_attack_export

    cfg, base = _config(args)
    dirs = run_attack_export(cfg, args.model, _out(args, cfg), base)
    for d in dirs:
        res = check_export(d)
        if not (res["within_ball"] and res["within_box"]):
            raise InvariantError(f"{d}: exported batch leaves the allowed region ({res})")
        print(d)
    return 0


def cmd_dataset_synth(args):
    ad.set_precision(args.precision or "float32")
    kw = dict(classes=args.classes, image_size=args.image_size, noise_std=args.noise_std, seed=args.seed,
              channels=args.channels, contrast=args.contrast, phase_jitter=args.phase_jitter)
    out = Path(args.out)
    for split, n in (("train", args.n_per_class), ("val", args.eval_n_per_class)):
        if n:
            save_dataset(synth_dataset(n, split=split, **kw), out / split)
            print(out / split)
    return 0


def cmd_verify(args):
    from .checkpoint import load_checkpoint
    from .dataio import synth_dataset as synth
    from .runner import eval_dataset
    from .verify import run_checks

    model, _, manifest = load_checkpoint(args.model)
    if args.config:
        cfg, base = _config(args)
        ds = eval_dataset(cfg, base)
        images, labels = ds.images, ds.labels
    else:
        # no data given: grey-level gratings of the right shape are enough to exercise every check
        c, h, _ = model.input_shape
        ds = synth(1, model.num_classes, h, 20.0, args.seed, channels=c)
        images, labels = ds.images, ds.labels
    checks = run_checks(model, images, labels, seed=args.seed, sap_instances=args.sap_instances)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise InvariantError(f"{len(failed)} invariant check(s) failed: {', '.join(failed)}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sapbench", description="Stochastic activation pruning workbench.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--precision", choices=("float32", "float64"), help="override the config's precision")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run the defense x attack x lambda sweep")
    e.add_argument("--config", required=True)
    e.add_argument("--model", required=True, help="checkpoint directory")
    e.add_argument("--out")
    e.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack-export", help="write clean and adversarial batches as SAPT files")
    a.add_argument("--config", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack_export)

    s = sub.add_parser("dataset-synth", help="generate a synthetic grating dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, default=100)
    s.add_argument("--eval-n-per-class", type=int, default=20)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--image-size", type=int, default=16)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--noise-std", type=float, default=40.0)
    s.add_argument("--contrast", type=float, default=1.0)
    s.add_argument("--phase-jitter", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_dataset_synth)

    v = sub.add_parser("verify", help="run the invariant suite against a checkpoint")
    v.add_argument("--model", required=True)
    v.add_argument("--config", help="take example inputs from this config's eval data")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--sap-instances", type=int, default=20000)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except SapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
