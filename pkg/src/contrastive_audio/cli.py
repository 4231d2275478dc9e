"""Command-line entry point: ``contrastive-audio <command> [flags]``.

Every command writes its outputs and the fully resolved config
(``config.json``) under ``--out``. A flat JSON file passed with ``--config``
supplies flag values; flags given on the command line win.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .augment import STRATEGIES, augment_for, make_pair
from .dsp import write_mels
from .exceptions import ConfigError, ContrastiveAudioError, ParseError
from .metrics import normalize_confusion, write_confusion_csv
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .signal_io import CorpusSpec, generate_synthetic_corpus, load_wav, read_manifest
from .train import TrainConfig, evaluate, finetune, linear_probe, pretrain

logger = logging.getLogger("contrastive_audio")

STRATEGY_NAMES = list(STRATEGIES)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _common(p, seed=True, threads=True):
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--config", default=None, help="flat JSON file of flag values; explicit flags override it")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed")
    if threads:
        p.add_argument("--threads", type=int, default=1,
                       help="pair-construction worker threads; 1 is the bit-reproducible mode")
    p.add_argument("--verbose", action="store_true", default=False, help="log progress to stderr")


def _pretrain_flags(p):
    p.add_argument("--steps", type=int, default=2000, help="pretraining steps")
    p.add_argument("--batch", type=int, default=16, help="pairs per batch (B)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--proj-dim", type=int, default=64, help="projection (z) dimension")
    p.add_argument("--rir-dir", default=None,
                   help="directory of RIR WAVs for the rir strategy (synthetic bank if omitted)")


def _downstream_flags(p):
    p.add_argument("--epochs", type=int, default=40, help="downstream epochs")
    p.add_argument("--downstream-lr", type=float, default=1e-3, help="downstream Adam learning rate")
    p.add_argument("--downstream-batch", type=int, default=16, help="downstream minibatch size")


def build_parser():
    parser = _Parser(prog="contrastive-audio", formatter_class=_formatter,
                     description="Contrastive audio pretraining, transfer and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-data", help="generate the synthetic labeled corpus", formatter_class=_formatter)
    _common(p, threads=False)
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--clips-per-class", type=int, default=30, help="clips per class")
    p.add_argument("--clip-seconds", type=float, default=10.0, help="clip duration in seconds")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="contrastive pretraining on the pretrain split", formatter_class=_formatter)
    _common(p)
    p.add_argument("--manifest", required=True, help="manifest JSONL")
    p.add_argument("--strategy", choices=STRATEGY_NAMES, default="stretch+mask", help="augmentation strategy")
    _pretrain_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=0, help="save every N steps (0: only at the end)")
    p.set_defaults(func=cmd_pretrain)

    for name, fn, what in (("probe", cmd_probe, "linear probe on a frozen encoder"),
                           ("finetune", cmd_finetune, "finetune encoder and a fresh head")):
        p = sub.add_parser(name, help=what, formatter_class=_formatter)
        _common(p)
        p.add_argument("--checkpoint", required=True, help="pretrained checkpoint (.aclc)")
        p.add_argument("--manifest", required=True, help="manifest JSONL")
        _downstream_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="metrics on the test split", formatter_class=_formatter)
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint with a trained head (.aclc)")
    p.add_argument("--manifest", required=True, help="manifest JSONL")
    p.add_argument("--perturb", choices=STRATEGY_NAMES, default=None,
                   help="evaluate on test clips perturbed by this strategy's positive-branch augmentations")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablation", help="all strategies x {probe, finetune}", formatter_class=_formatter)
    _common(p)
    p.add_argument("--manifest", required=True, help="manifest JSONL")
    p.add_argument("--strategies", nargs="+", choices=STRATEGY_NAMES, default=STRATEGY_NAMES,
                   help="strategies to run")
    _pretrain_flags(p)
    _downstream_flags(p)
    p.add_argument("--perturb", choices=STRATEGY_NAMES, default=None, help="perturb the test set as in evaluate")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("augment-preview", help="anchor/positive mel blobs for one WAV", formatter_class=_formatter)
    _common(p, threads=False)
    p.add_argument("--wav", required=True, help="input WAV (16 kHz mono, >= 2 s)")
    p.add_argument("--strategy", choices=STRATEGY_NAMES, default="stretch+mask", help="augmentation strategy")
    p.add_argument("--rir-dir", default=None, help="directory of RIR WAVs for the rir strategy")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients", formatter_class=_formatter)
    p.add_argument("--out", default=None, help="optional directory for the JSON report")
    p.add_argument("--config", default=None, help="flat JSON file of flag values")
    p.add_argument("--seed", type=int, default=0, help="random seed for the test points")
    p.add_argument("--tol", type=float, default=1e-5, help="maximum allowed relative error")
    p.add_argument("--verbose", action="store_true", default=False, help="log progress to stderr")
    p.set_defaults(func=cmd_grad_check)
    return parser


# --------------------------------------------------------------------- helpers


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(args):
    path = Path(args.manifest)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return read_manifest(path)


def _checkpoint(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _train_config(args, mode, strategy=None, sample_rate=16000):
    kw = dict(seed=args.seed, mode=mode, threads=args.threads)
    if mode == "pretrain":
        kw.update(batch_size=args.batch, steps=args.steps, lr=args.lr,
                  augment=augment_for(strategy, args.rir_dir, args.seed, sample_rate),
                  checkpoint_every=getattr(args, "checkpoint_every", 0))
    else:
        kw.update(epochs=args.epochs, downstream_lr=args.downstream_lr, batch_size=args.downstream_batch)
    return TrainConfig(**kw)


def _write_eval(out, rep, cm, prefix=""):
    rep.write_json(out / f"{prefix}metrics.json")
    write_confusion_csv(out / f"{prefix}confusion.csv", cm)
    write_confusion_csv(out / f"{prefix}confusion_normalized.csv", normalize_confusion(cm))


def _perturbation(args):
    if not args.perturb:
        return None
    return augment_for(args.perturb, getattr(args, "rir_dir", None), args.seed)


# -------------------------------------------------------------------- commands


def cmd_synth_data(args):
    spec = CorpusSpec(n_classes=args.classes, clips_per_class=args.clips_per_class,
                      clip_seconds=args.clip_seconds, seed=args.seed)
    path, entries = generate_synthetic_corpus(spec, _out_dir(args))
    print(f"wrote {len(entries)} clips and {path}")


def cmd_pretrain(args):
    out = _out_dir(args)
    entries = _manifest(args)
    n_classes = len({e.label for e in entries if e.label is not None}) or ModelConfig.n_classes
    cfg = _train_config(args, "pretrain", args.strategy)
    model_config = ModelConfig(proj_dim=args.proj_dim, n_classes=n_classes)
    ckpt = pretrain(entries, cfg, model_config, log_path=out / "train_log.jsonl",
                    checkpoint_path=out / "checkpoint.aclc")
    save_checkpoint(ckpt, out / "checkpoint.aclc")
    losses = [r["loss"] for r in ckpt.history]
    if losses:
        print(f"pretrained {len(losses)} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"wrote {out / 'checkpoint.aclc'}")


def _transfer(args, fn):
    out = _out_dir(args)
    ckpt = _checkpoint(args)
    entries = _manifest(args)
    mode = "finetune" if fn is finetune else "probe"
    trained = fn(ckpt, entries, _train_config(args, mode))
    save_checkpoint(trained, out / "checkpoint.aclc")
    rep, cm = evaluate(trained, entries)
    _write_eval(out, rep, cm)
    print(f"{mode}: macro-F1 {rep.macro_f1:.4f}  wAP {rep.wap:.4f}")


def cmd_probe(args):
    _transfer(args, linear_probe)


def cmd_finetune(args):
    _transfer(args, finetune)


def cmd_evaluate(args):
    out = _out_dir(args)
    ckpt = _checkpoint(args)
    rep, cm = evaluate(ckpt, _manifest(args), perturb=_perturbation(args), perturb_seed=args.seed)
    _write_eval(out, rep, cm)
    print(f"macro-F1 {rep.macro_f1:.4f}  wAP {rep.wap:.4f}  n={rep.n_eval}")


def cmd_ablation(args):
    out = _out_dir(args)
    entries = _manifest(args)
    n_classes = len({e.label for e in entries if e.label is not None})
    model_config = ModelConfig(proj_dim=args.proj_dim, n_classes=n_classes)
    perturb = _perturbation(args)
    rows = []
    for strategy in args.strategies:
        run_dir = out / strategy.replace("+", "_")
        run_dir.mkdir(exist_ok=True)
        ckpt = pretrain(entries, _train_config(args, "pretrain", strategy), model_config,
                        log_path=run_dir / "train_log.jsonl")
        save_checkpoint(ckpt, run_dir / "pretrain.aclc")
        row = {"strategy": strategy}
        for mode, fn in (("probe", linear_probe), ("finetune", finetune)):
            trained = fn(ckpt, entries, _train_config(args, mode))
            save_checkpoint(trained, run_dir / f"{mode}.aclc")
            rep, cm = evaluate(trained, entries, perturb=perturb, perturb_seed=args.seed)
            _write_eval(run_dir, rep, cm, prefix=f"{mode}_")
            row[f"{mode}_macro_f1"] = rep.macro_f1
            row[f"{mode}_wap"] = rep.wap
            row[f"{mode}_per_class_f1"] = [float(f) for f in rep.f1]
        rows.append(row)
        print(f"{strategy:>13}  probe {row['probe_macro_f1']:.4f}  finetune {row['finetune_macro_f1']:.4f}")

    _write_json(out / "ablation.json", {"rows": rows, "perturb": args.perturb})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "probe_macro_f1", "finetune_macro_f1", "probe_wap", "finetune_wap"])
        for r in rows:
            w.writerow([r["strategy"]] + [repr(r[k]) for k in ("probe_macro_f1", "finetune_macro_f1",
                                                                "probe_wap", "finetune_wap")])
    with open(out / "per_class_f1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "mode"] + [f"class_{k}" for k in range(n_classes)])
        for r in rows:
            for mode in ("probe", "finetune"):
                w.writerow([r["strategy"], mode] + [repr(v) for v in r[f"{mode}_per_class_f1"]])


def cmd_augment_preview(args):
    out = _out_dir(args)
    wav = Path(args.wav)
    if not wav.is_file():
        raise FileNotFoundError(f"WAV not found: {wav}")
    clip = load_wav(wav)
    cfg = augment_for(args.strategy, args.rir_dir, args.seed, clip.sample_rate)
    anchor, positive = make_pair(clip, cfg, np.random.default_rng(args.seed))
    write_mels(out / "anchor.mels", anchor)
    write_mels(out / "positive.mels", positive)
    print(f"wrote {out / 'anchor.mels'} and {out / 'positive.mels'}")


def cmd_grad_check(args):
    errors = {k: float(v) for k, v in gradcheck.run_all(args.seed).items()}
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:<45} {err:.3e}")
    status = "ok" if worst <= args.tol else "FAILED"
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g}): {status}")
    if args.out:
        _write_json(_out_dir(args) / "grad_check.json",
                    {"errors": errors, "max_rel_error": worst, "tolerance": args.tol, "ok": bool(worst <= args.tol)})
    return 0 if worst <= args.tol else 1


# ------------------------------------------------------------------------ main


def _load_config_file(parser, argv):
    """Install values from ``--config`` as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in choices), None)
    if command is None:
        return
    path = Path(known.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    sub = choices[command]
    values = {k.replace("-", "_"): v for k, v in values.items() if k not in ("command", "config")}
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise ConfigError(f"{path}: unknown keys for {command}: {', '.join(unknown)}")
    for dest in values:
        actions[dest].required = False
    sub.set_defaults(**values)


def _resolved(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def main(argv=None):
    parser = build_parser()
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        _load_config_file(parser, argv)
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.out:
            _write_json(_out_dir(args) / "config.json", _resolved(args))
        # BLAS stays single-threaded so float reductions are reproducible
        with threadpool_limits(limits=1):
            code = args.func(args)
        return code or 0
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContrastiveAudioError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
