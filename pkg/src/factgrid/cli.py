"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic dataset), ``train`` (fit a model
and save a checkpoint plus training log), ``eval`` (top-k reports for the
seen test split and the unseen split, with figures), ``retrieve`` (rank
examples for one pair), ``gradcheck`` (verify every backward pass).

Configuration values come from defaults, then a ``--config`` file of flat
``key = value`` lines ('#' starts a comment), then command-line flags.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import difflib
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_UNSEEN,
    SynthConfig,
    read_feature_file,
    write_feature_file,
    generate_synthetic,
)
from .errors import CompatError, ConfigError, FactgridError, QueryError, RangeError, VocabError
from .evaluation import (
    CANDIDATE_POLICIES,
    accuracy_gap_report,
    read_report,
    retrieve,
    topk_accuracy,
    write_gap_report,
    write_report,
)
from .heads import MODEL_KINDS, build_model
from .optim import SgdConfig, train_epochs
from .verify import gradcheck_heads

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

USAGE_ERRORS = (ConfigError, RangeError)

RETRIEVAL_POOLS = ("eval", "test", "train", "unseen", "all")


@dataclass
class RunConfig:
    """Every tunable of the pipeline, overridable per key."""

    model: str = "fact"
    latent_dim: int = 2
    trunk: tuple[int, ...] = (64, 64)
    fork_hidden: int = 64
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 256
    epochs: int = 5
    poly_power: float = 1.0
    trunk_lr_multiplier: float = 1.0
    seed: int = 0
    dataset: str = ""
    out: str = "."
    adj_count: int = 20
    noun_count: int = 24
    true_latent_dim: int = 2
    feature_dim: int = 32
    examples_per_pair: int = 150
    holdout_fraction: float = 0.15
    label_noise_rate: float = 0.1
    noise_scale: float = 0.75
    test_fraction: float = 0.2
    candidates: str = "union"
    plots: bool = True
    top_n: int = 10
    gradcheck_tol: float = 1e-5

    def echo(self, keys: tuple[str, ...]) -> dict[str, str]:
        out = {}
        for key in keys:
            value = getattr(self, key)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out[key] = str(value)
        return out


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    if key not in _FIELD_TYPES:
        known = ", ".join(sorted(_FIELD_TYPES))
        raise ConfigError(f"unknown config key {key!r}; known keys: {known}")
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for config key {key!r}") from None


def read_config_file(path) -> dict[str, object]:
    """Flat 'key = value' lines; '#' comments and blank lines ignored."""
    values: dict[str, object] = {}
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from None
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = _coerce(key.strip(), value)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            setattr(cfg, key, value)
    for key in _FIELD_TYPES:
        if hasattr(args, key) and getattr(args, key) is not None:
            value = getattr(args, key)
            if key == "trunk" and isinstance(value, str):
                value = _coerce("trunk", value)
            setattr(cfg, key, value)
    if cfg.model not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}, got {cfg.model!r}")
    if cfg.candidates not in CANDIDATE_POLICIES:
        raise ConfigError(
            f"candidates must be one of {CANDIDATE_POLICIES}, got {cfg.candidates!r}"
        )
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(examples, name):
    return [ex for ex in examples if ex.split == name]


def cmd_synth(cfg: RunConfig) -> int:
    synth = SynthConfig(
        adj_count=cfg.adj_count,
        noun_count=cfg.noun_count,
        true_latent_dim=cfg.true_latent_dim,
        feature_dim=cfg.feature_dim,
        examples_per_pair=cfg.examples_per_pair,
        holdout_fraction=cfg.holdout_fraction,
        label_noise_rate=cfg.label_noise_rate,
        noise_scale=cfg.noise_scale,
        test_fraction=cfg.test_fraction,
        seed=cfg.seed,
    )
    vocab, examples, _ = generate_synthetic(synth)
    path = _outdir(cfg) / "synthetic.fg"
    write_feature_file(path, vocab, examples)
    print(f"wrote {path}")
    print(
        f"census: {vocab.adj_count} adjectives x {vocab.noun_count} nouns, "
        f"{vocab.seen_count} seen pairs, {len(vocab.unseen_pairs)} held-out cells"
    )
    print(
        f"examples: {len(_split(examples, SPLIT_TRAIN))} train, "
        f"{len(_split(examples, SPLIT_TEST))} test, "
        f"{len(_split(examples, SPLIT_UNSEEN))} unseen"
    )
    return EXIT_OK


TRAIN_ECHO_KEYS = (
    "model", "latent_dim", "trunk", "fork_hidden", "base_lr", "momentum",
    "weight_decay", "batch_size", "epochs", "poly_power",
    "trunk_lr_multiplier", "seed",
)


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.dataset:
        raise ConfigError("train requires --dataset")
    vocab, examples = read_feature_file(cfg.dataset)
    train = _split(examples, SPLIT_TRAIN)
    if not train:
        raise ConfigError(f"dataset {cfg.dataset} has no training examples")
    feature_dim = train[0].features.shape[0]
    model = build_model(
        cfg.model,
        vocab,
        feature_dim,
        trunk_widths=cfg.trunk,
        fork_hidden=cfg.fork_hidden,
        latent_dim=cfg.latent_dim,
        seed=cfg.seed,
    )
    sgd = SgdConfig(
        base_lr=cfg.base_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        poly_power=cfg.poly_power,
        lr_multipliers={"trunk": cfg.trunk_lr_multiplier},
    )
    log = train_epochs(model, train, sgd, cfg.epochs, seed=cfg.seed)
    out = _outdir(cfg)

    train_top1 = topk_accuracy(
        model, train, ks=(1,), policy="seen", expected_pairs=vocab.seen_pairs
    ).summary[1]
    log_path = out / "train_log.csv"
    with open(log_path, "w", encoding="utf-8", newline="\n") as handle:
        for line in log.lines():
            handle.write(line + "\n")
        handle.write(f"#final train_top1={train_top1!r}\n")

    ckpt_path = out / "checkpoint.txt"
    save_checkpoint(ckpt_path, model, cfg.echo(TRAIN_ECHO_KEYS))
    print(f"wrote {ckpt_path} and {log_path}")
    means = log.epoch_means()
    if means:
        print(
            f"epoch mean loss: first={means[0]!r} last={means[-1]!r}; "
            f"train top-1 {train_top1!r}"
        )
    if cfg.plots and log.rows:
        from .plots import save_training_curve

        fig_path = out / "fig_train_loss.png"
        save_training_curve(log.rows, fig_path)
        print(f"wrote {fig_path}")
    return EXIT_OK


def _load_model_for(dataset_path, checkpoint_path):
    model, _ = load_checkpoint(checkpoint_path)
    vocab, examples = read_feature_file(dataset_path)
    if vocab.fingerprint() != model.vocab.fingerprint():
        raise CompatError(
            "checkpoint vocabulary hash does not match the dataset; "
            "the model was trained on different data"
        )
    if examples and examples[0].features.shape[0] != model.trunk.in_dim:
        raise CompatError(
            f"dataset feature dimension {examples[0].features.shape[0]} does "
            f"not match the checkpoint ({model.trunk.in_dim})"
        )
    return model, vocab, examples


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    if not cfg.dataset or not args.checkpoint:
        raise ConfigError("eval requires --checkpoint and --dataset")
    model, vocab, examples = _load_model_for(cfg.dataset, args.checkpoint)
    out = _outdir(cfg)
    seen_split = SPLIT_TRAIN if args.split == "train" else SPLIT_TEST
    seen_examples = _split(examples, seen_split)
    unseen_examples = _split(examples, SPLIT_UNSEEN)

    reports: list[tuple[str, object]] = []
    if not seen_examples:
        print(f"note: no {seen_split} examples; skipping the seen report")
    else:
        seen_report = topk_accuracy(
            model, seen_examples, policy="seen", expected_pairs=vocab.seen_pairs
        )
        name = "eval_seen_train.csv" if args.split == "train" else "eval_seen.csv"
        write_report(out / name, seen_report)
        reports.append(("seen", seen_report, out / name))

    want_unseen = args.unseen
    if want_unseen is None:
        want_unseen = model.supports_unseen and bool(unseen_examples)
    if want_unseen:
        if not model.supports_unseen:
            raise QueryError(
                f"{model.describe()} cannot rank unseen pairs; "
                "only fork and fact models generalize to them"
            )
        if not unseen_examples:
            raise QueryError("dataset has no unseen examples to evaluate")
        unseen_report = topk_accuracy(
            model,
            unseen_examples,
            policy=cfg.candidates,
            expected_pairs=vocab.unseen_pairs,
        )
        write_report(out / "eval_unseen.csv", unseen_report)
        reports.append(("unseen", unseen_report, out / "eval_unseen.csv"))
    elif args.unseen is None and not model.supports_unseen and unseen_examples:
        print(f"note: {model.describe()} cannot rank unseen pairs; skipping")

    for label, report, path in reports:
        ks = " ".join(f"top-{k}={report.summary[k]:.4f}" for k in report.ks)
        print(f"{report.model_id} {label} ({report.policy}, {len(report.rows)} pairs): {ks}")
        print(f"wrote {path}")
        for warning in report.warnings:
            print(f"warning: {warning}", file=sys.stderr)

    if args.gap_against:
        if not reports:
            raise QueryError("no report produced to compare against")
        other = read_report(args.gap_against)
        matching = [r for _, r, _ in reports if r.pair_set() == other.pair_set()]
        if not matching:
            raise CompatError(
                f"{args.gap_against} covers a different pair set than every "
                "report produced by this run"
            )
        mine = matching[0]
        gap_rows = accuracy_gap_report(mine, other, k=args.gap_k)
        gap_path = out / f"gap_top{args.gap_k}.csv"
        write_gap_report(gap_path, gap_rows, mine.model_id, other.model_id, args.gap_k)
        print(f"wrote {gap_path}")
        if cfg.plots:
            from .plots import save_gap_chart

            fig = out / "fig_gap.png"
            save_gap_chart(gap_rows, fig, mine.model_id, other.model_id, args.gap_k)
            print(f"wrote {fig}")

    if cfg.plots and reports:
        from .plots import save_topk_bars

        chance = None
        if any(label == "unseen" for label, _, _ in reports):
            pool = (
                vocab.seen_pairs | vocab.unseen_pairs
                if cfg.candidates == "union"
                else vocab.unseen_pairs
            )
            if pool:
                chance = {k: k / len(pool) for k in reports[0][1].ks}
        fig = out / "fig_topk.png"
        save_topk_bars([report for _, report, _ in reports], fig, chance=chance)
        print(f"wrote {fig}")
    return EXIT_OK


def _word_id(words: tuple[str, ...], name: str, label: str) -> int:
    try:
        return words.index(name)
    except ValueError:
        near = difflib.get_close_matches(name, words, n=3)
        hint = f"; closest: {', '.join(near)}" if near else ""
        raise VocabError(f"unknown {label} {name!r}{hint}") from None


def cmd_retrieve(cfg: RunConfig, args: argparse.Namespace) -> int:
    if not cfg.dataset or not args.checkpoint:
        raise ConfigError("retrieve requires --checkpoint and --dataset")
    model, vocab, examples = _load_model_for(cfg.dataset, args.checkpoint)
    adj = _word_id(vocab.adjectives, args.adjective, "adjective")
    noun = _word_id(vocab.nouns, args.noun, "noun")
    pool_name = args.pool
    if pool_name == "eval":
        pool = [ex for ex in examples if ex.split in (SPLIT_TEST, SPLIT_UNSEEN)]
    elif pool_name == "all":
        pool = examples
    else:
        pool = _split(examples, pool_name)
    result = retrieve(model, pool, (adj, noun), cfg.top_n)
    print(
        f"query '{args.adjective} {args.noun}' over {len(pool)} {pool_name} "
        f"examples ({model.describe()}):"
    )
    for rank, (ex_id, score) in enumerate(result.ranked, start=1):
        print(f"{rank},{ex_id},{score!r}")
    out = _outdir(cfg)
    path = out / f"retrieval_{args.adjective}_{args.noun}.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("rank,example,score\n")
        for rank, (ex_id, score) in enumerate(result.ranked, start=1):
            handle.write(f"{rank},{ex_id},{score!r}\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    checks = gradcheck_heads(
        feature_dim=cfg.feature_dim,
        trunk_widths=cfg.trunk,
        fork_hidden=cfg.fork_hidden,
        latent_dim=cfg.latent_dim,
        seed=cfg.seed,
        tol=cfg.gradcheck_tol,
        corrupt=bool(args.corrupt_backward),
    )
    worst = 0.0
    failed = 0
    for check in checks:
        result = check.result
        status = "ok" if result.passed else "FAIL"
        print(
            f"{result.name}: checked {result.checked} coords, "
            f"max_rel_err={result.max_rel_err:.3e} {status}"
        )
        worst = max(worst, result.max_rel_err)
        failed += 0 if result.passed else 1
    print(f"gradcheck: {len(checks)} tensors, max_rel_err={worst:.3e}, failures={failed}")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems map to exit code 1
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="factgrid", description=__doc__)
    parser.add_argument("--version", action="version", version=f"factgrid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", help="output directory")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)
    for key in ("adj_count", "noun_count", "true_latent_dim", "feature_dim",
                "examples_per_pair"):
        p_synth.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
    for key in ("holdout_fraction", "label_noise_rate", "noise_scale",
                "test_fraction"):
        p_synth.add_argument(f"--{key.replace('_', '-')}", type=float, dest=key)

    p_train = sub.add_parser("train", help="train a model on a feature file")
    common(p_train)
    p_train.add_argument("--dataset", help="feature file path")
    p_train.add_argument("--model", choices=MODEL_KINDS)
    p_train.add_argument("--latent-dim", type=int, dest="latent_dim")
    p_train.add_argument("--trunk", help="comma-separated trunk widths")
    p_train.add_argument("--fork-hidden", type=int, dest="fork_hidden")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.add_argument("--base-lr", type=float, dest="base_lr")
    p_train.add_argument("--momentum", type=float)
    p_train.add_argument("--weight-decay", type=float, dest="weight_decay")
    p_train.add_argument("--poly-power", type=float, dest="poly_power")
    p_train.add_argument("--trunk-lr-multiplier", type=float, dest="trunk_lr_multiplier")
    p_train.add_argument("--plots", action=argparse.BooleanOptionalAction, default=None)

    p_eval = sub.add_parser("eval", help="write seen/unseen top-k reports")
    common(p_eval)
    p_eval.add_argument("--checkpoint", help="checkpoint path")
    p_eval.add_argument("--dataset", help="feature file path")
    p_eval.add_argument("--candidates", choices=("union", "unseen-only"),
                        help="candidate policy for the unseen report")
    p_eval.add_argument("--split", choices=("test", "train"), default="test",
                        help="which seen split to evaluate")
    p_eval.add_argument("--unseen", action=argparse.BooleanOptionalAction, default=None,
                        help="force or skip the unseen report")
    p_eval.add_argument("--gap-against", dest="gap_against",
                        help="another report file to rank accuracy gaps against")
    p_eval.add_argument("--gap-k", dest="gap_k", type=int, default=10)
    p_eval.add_argument("--plots", action=argparse.BooleanOptionalAction, default=None)

    p_ret = sub.add_parser("retrieve", help="rank examples for one pair")
    common(p_ret)
    p_ret.add_argument("--checkpoint", help="checkpoint path")
    p_ret.add_argument("--dataset", help="feature file path")
    p_ret.add_argument("--adjective", required=True)
    p_ret.add_argument("--noun", required=True)
    p_ret.add_argument("--top-n", type=int, dest="top_n")
    p_ret.add_argument("--pool", choices=RETRIEVAL_POOLS, default="eval",
                       help="which splits form the retrieval pool")

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients")
    common(p_grad)
    p_grad.add_argument("--feature-dim", type=int, dest="feature_dim")
    p_grad.add_argument("--trunk", help="comma-separated trunk widths")
    p_grad.add_argument("--fork-hidden", type=int, dest="fork_hidden")
    p_grad.add_argument("--latent-dim", type=int, dest="latent_dim")
    p_grad.add_argument("--tol", type=float, dest="gradcheck_tol")
    p_grad.add_argument("--corrupt-backward", action="store_true",
                        dest="corrupt_backward", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "retrieve":
            return cmd_retrieve(cfg, args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FactgridError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
