"""Versioned text checkpoints.

Checkpoints are plain UTF-8 text so that bit-exact round-trips do not
depend on platform byte order: every parameter value is rendered with 17
significant digits, which reconstructs the exact float64. The vocabulary
is embedded (and fingerprinted) so a checkpoint can be loaded standalone
and later verified against a dataset.
"""

from __future__ import annotations

import numpy as np

from .data import PairVocab
from .errors import ParseError
from .heads import Model, build_model

CHECKPOINT_MAGIC = "#factgrid-checkpoint v1"


def _value_text(value: float) -> str:
    return f"{value:.17g}"


def save_checkpoint(path, model: Model, config_echo: dict[str, str] | None = None) -> None:
    """Write a model (architecture, vocabulary, parameters) to text."""
    vocab = model.vocab
    lines = [
        CHECKPOINT_MAGIC,
        f"#kind {model.kind}",
        f"#feature_dim {model.trunk.in_dim}",
        "#trunk " + ",".join(str(w) for w in model.trunk.widths),
    ]
    if model.kind == "fork":
        lines.append(f"#fork_hidden {model.head.hidden}")
    if model.kind == "fact":
        lines.append(f"#latent_dim {model.head.latent_dim}")
    lines.append(f"#vocab_hash {vocab.fingerprint()}")
    lines.append("#adjectives " + ",".join(vocab.adjectives))
    lines.append("#nouns " + ",".join(vocab.nouns))
    lines.append("#seen " + " ".join(f"{i}:{j}" for i, j in sorted(vocab.seen_pairs)))
    lines.append("#unseen " + " ".join(f"{i}:{j}" for i, j in sorted(vocab.unseen_pairs)))
    for key in sorted(config_echo or {}):
        lines.append(f"#config {key}={config_echo[key]}")
    for param in model.parameters():
        dims = " ".join(str(d) for d in param.value.shape)
        lines.append(f"#param {param.name} {dims}")
        matrix = np.atleast_2d(param.value)
        for row in matrix:
            lines.append(" ".join(_value_text(v) for v in row))
    lines.append("#end")
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def _parse_pairs(text: str) -> frozenset[tuple[int, int]]:
    pairs = set()
    for token in text.split():
        i, j = token.split(":")
        pairs.add((int(i), int(j)))
    return frozenset(pairs)


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    """Rebuild a model from a checkpoint file.

    Returns (model, config echo). Raises ParseError on structural damage,
    including a vocabulary that no longer matches its recorded hash.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            raw = handle.read().splitlines()
    except OSError as err:
        raise ParseError(f"cannot read checkpoint {path}: {err}") from None
    if not raw or raw[0] != CHECKPOINT_MAGIC:
        raise ParseError(f"missing {CHECKPOINT_MAGIC!r} header", line=1)
    meta: dict[str, str] = {}
    config: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    lineno = 1
    idx = 1
    while idx < len(raw):
        line = raw[idx]
        lineno = idx + 1
        if line == "#end":
            break
        if line.startswith("#config "):
            key, _, value = line[len("#config "):].partition("=")
            config[key] = value
            idx += 1
            continue
        if line.startswith("#param "):
            tokens = line.split()
            name = tokens[1]
            try:
                shape = tuple(int(t) for t in tokens[2:])
            except ValueError:
                raise ParseError(f"bad parameter shape in {line!r}", line=lineno) from None
            n_rows = shape[0] if len(shape) == 2 else 1
            block = raw[idx + 1: idx + 1 + n_rows]
            if len(block) != n_rows:
                raise ParseError(f"truncated parameter {name!r}", line=lineno)
            try:
                values = np.array(
                    [[float(v) for v in row.split()] for row in block], dtype=np.float64
                )
            except ValueError:
                raise ParseError(f"unparsable values for {name!r}", line=lineno) from None
            params[name] = values.reshape(shape)
            idx += 1 + n_rows
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            meta[key] = value
            idx += 1
            continue
        raise ParseError(f"unexpected line {line!r}", line=lineno)
    else:
        raise ParseError("missing #end marker", line=lineno)

    for required in ("kind", "feature_dim", "trunk", "adjectives", "nouns", "seen"):
        if required not in meta:
            raise ParseError(f"checkpoint lacks #{required}", line=1)
    vocab = PairVocab(
        tuple(meta["adjectives"].split(",")),
        tuple(meta["nouns"].split(",")),
        _parse_pairs(meta.get("seen", "")),
        _parse_pairs(meta.get("unseen", "")),
    )
    recorded = meta.get("vocab_hash", "")
    if recorded and recorded != vocab.fingerprint():
        raise ParseError("checkpoint vocabulary does not match its recorded hash")
    model = build_model(
        meta["kind"],
        vocab,
        feature_dim=int(meta["feature_dim"]),
        trunk_widths=tuple(int(w) for w in meta["trunk"].split(",")),
        fork_hidden=int(meta.get("fork_hidden", 0) or 1),
        latent_dim=int(meta.get("latent_dim", 0) or 1),
        seed=0,
    )
    model_params = {p.name: p for p in model.parameters()}
    if set(model_params) != set(params):
        missing = sorted(set(model_params) ^ set(params))
        raise ParseError(f"parameter set mismatch: {missing[:4]}")
    for name, values in params.items():
        target = model_params[name].value
        if values.shape != target.shape:
            raise ParseError(
                f"parameter {name!r} has shape {values.shape}, expected {target.shape}"
            )
        target[...] = values
    return model, config
