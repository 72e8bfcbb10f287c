"""Command-line entry point: ``sysdirect <subcommand> ...``.

Failures print one line ``error: <code>: <detail>`` to stderr and exit with
2 (usage), 3 (data) or 4 (numeric).  An optional ``--config`` INI file can
supply any flag under a section named after the subcommand; flags given on
the command line win.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

from . import metrics, models
from .errors import ConfigError, SysDirectError
from .features import extract_log_mel, read_wav
from .gradcheck import TOLERANCE, model_grad_check
from .models import SYSTEM, VARIANTS
from .trainer import TrainConfig

DEFAULTS = TrainConfig()


class HELP(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for flags without one."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> _Parser:
    parser = _Parser(prog="sysdirect", description="System-directed speech detection.",
                     formatter_class=HELP)
    parser.add_argument("--config", type=Path, default=None, help="INI file with per-subcommand sections")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic corpus", formatter_class=HELP)
    p.add_argument("--spec", default="easy", help="preset name (easy, hard) or key=value spec file")
    p.add_argument("--out", type=Path, help="output directory (required)")

    p = sub.add_parser("train", help="train one variant", formatter_class=HELP)
    p.add_argument("--manifest", type=Path, help="corpus manifest.csv (required)")
    p.add_argument("--variant", choices=VARIANTS, help="model variant (required)")
    p.add_argument("--out", type=Path, help="checkpoint path, .dsm (required)")
    p.add_argument("--lr", type=float, default=DEFAULTS.learning_rate, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=DEFAULTS.batch_size, help="utterances per batch")
    p.add_argument("--patience", type=int, default=DEFAULTS.patience, help="early-stopping patience (epochs)")
    p.add_argument("--seed", type=int, default=DEFAULTS.seed, help="initialisation and shuffling seed")
    p.add_argument("--epochs", type=int, default=DEFAULTS.max_epochs, help="maximum epochs")
    p.add_argument("--clip-norm", type=float, default=DEFAULTS.clip_norm, help="global gradient-norm cap")
    p.add_argument("--log", type=Path, default=None, help="JSON-lines training log (default: <out>.log.jsonl)")

    p = sub.add_parser("eval", help="score a split and write DET/EER reports", formatter_class=HELP)
    p.add_argument("--manifest", type=Path, help="corpus manifest.csv (required)")
    p.add_argument("--model", type=Path, help="checkpoint (required)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to score")
    p.add_argument("--out", type=Path, help="report directory (required)")

    p = sub.add_parser("classify", help="classify one WAV file", formatter_class=HELP)
    p.add_argument("--model", type=Path, help="checkpoint (required)")
    p.add_argument("--wav", type=Path, help="input WAV (required)")

    p = sub.add_parser("attention", help="dump the attention trace of one WAV file", formatter_class=HELP)
    p.add_argument("--model", type=Path, help="checkpoint of an attention variant (required)")
    p.add_argument("--wav", type=Path, help="input WAV (required)")
    p.add_argument("--words", type=Path, default=None, help="word,start_s,end_s alignment CSV")
    p.add_argument("--out", type=Path, help="output CSV (required)")

    p = sub.add_parser("gradcheck", help="float64 finite-difference check of every layer", formatter_class=HELP)
    p.add_argument("--variant", choices=VARIANTS, help="model variant (required)")
    p.add_argument("--seed", type=int, default=0, help="parameter and input seed")
    p.add_argument("--entries", type=int, default=12, help="coordinates sampled per parameter and input")
    return parser


REQUIRED = {
    "gen-data": ("out",),
    "train": ("manifest", "variant", "out"),
    "eval": ("manifest", "model", "out"),
    "classify": ("model", "wav"),
    "attention": ("model", "wav", "out"),
    "gradcheck": ("variant",),
}


def _subparser(parser: _Parser, name: str) -> argparse.ArgumentParser:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices[name]


def _apply_config(parser: _Parser, path: Path, command: str) -> None:
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise ConfigError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in cp.sections():
        if section not in REQUIRED:
            raise ConfigError(f"{path}: unknown section [{section}]")
    if not cp.has_section(command):
        return
    sub = _subparser(parser, command)
    known = {a.dest: a for a in sub._actions if a.dest != "help"}
    values = {}
    for key, raw in cp[command].items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"{path}: unknown key {key!r} in [{command}]")
        action = known[dest]
        try:
            value = action.type(raw) if action.type else raw
        except ValueError:
            raise ConfigError(f"{path}: bad value {raw!r} for {key}") from None
        if action.choices and value not in action.choices:
            raise ConfigError(f"{path}: {key} must be one of {', '.join(action.choices)}")
        values[dest] = value
    sub.set_defaults(**values)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        _apply_config(parser, args.config, args.command)
        args = parser.parse_args(argv)
    missing = [f"--{name.replace('_', '-')}" for name in REQUIRED[args.command] if getattr(args, name) is None]
    if missing:
        parser.error(f"{args.command}: missing required {', '.join(missing)}")
    return args


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synth import generate, load_spec

    manifest = generate(load_spec(args.spec), args.out)
    print(f"wrote {len(manifest.rows)} utterances to {args.out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import prepare, train_variant

    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, patience=args.patience,
                         seed=args.seed, max_epochs=args.epochs, clip_norm=args.clip_norm)
    log = args.log or args.out.with_name(args.out.name + ".log.jsonl")
    corpus = prepare(args.manifest)
    model, history = train_variant(corpus, args.variant, args.seed, config, log)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    models.save(model, args.out)
    best = min(history, key=lambda r: r["val_loss"])
    print(f"epochs {len(history)} best_epoch {best['epoch']} val_loss {best['val_loss']:.4f} "
          f"val_acc {best['val_acc']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .pipeline import featurize, score_features
    from .synth import load_manifest

    model = models.load(args.model)
    feats, labels = featurize(load_manifest(args.manifest), args.split)
    scores = score_features(model, feats, labels)
    args.out.mkdir(parents=True, exist_ok=True)
    metrics.write_scores(scores, args.out / "scores.csv")
    curve = metrics.det_curve(scores)
    metrics.emit_reports({(model.config.variant, f"synth-{args.split}"): curve}, args.out)
    print(f"eer_percent {100 * metrics.eer(curve):.2f}")
    return 0


def _load_features(path: Path):
    clip = read_wav(path)
    clip.id = path.stem
    return extract_log_mel(clip)


def cmd_classify(args) -> int:
    model = models.load(args.model)
    post, _ = model.forward(_load_features(args.wav), normalize=True)
    score = float(post[SYSTEM])
    print(f"{models.CLASSES[int(score >= 0.5)]} {score:.4f}")
    return 0


def cmd_attention(args) -> int:
    model = models.load(args.model)
    words = metrics.read_word_alignments(args.words) if args.words else None
    trace = metrics.dump_attention(model, _load_features(args.wav), args.out, words)
    print(f"wrote {trace.alpha.size} attention weights to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    report = model_grad_check(args.variant, args.seed, max_entries=args.entries)
    for name, c in report.layers.items():
        print(f"{name} {c.error:.3e} checked={c.checked} kinks={c.kinks} unresolved={c.unresolved}")
    ok = report.passed(TOLERANCE)
    print(f"max {report.worst:.3e} {'ok' if ok else 'FAIL'}")
    return 0 if ok else 4


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "attention": cmd_attention,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except SysDirectError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
