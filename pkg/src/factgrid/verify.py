"""End-to-end gradient verification for all three heads.

Builds small randomly initialized models, draws a random batch, and
compares every parameter tensor's analytic gradient against central
finite differences. The optional ``corrupt`` hook multiplies one named
tensor's analytic gradient by a constant, as a negative control that the
check actually detects wrong backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PairVocab
from .heads import MODEL_KINDS, build_model
from .nn import GradCheckResult, grad_check

CORRUPT_TENSOR = "fact.adj_embed.weight"
CORRUPT_FACTOR = 1.01


def gradcheck_vocab() -> PairVocab:
    """Fixed small grid with a few unseen cells, for verification runs."""
    adjectives = tuple(f"a{i}" for i in range(5))
    nouns = tuple(f"n{j}" for j in range(6))
    unseen = frozenset({(0, 1), (2, 3), (4, 5)})
    seen = frozenset(
        (i, j) for i in range(5) for j in range(6) if (i, j) not in unseen
    )
    return PairVocab(adjectives, nouns, seen, unseen)


@dataclass
class HeadCheck:
    """grad_check outcome for one tensor of one head."""

    kind: str
    result: GradCheckResult


def gradcheck_heads(
    feature_dim: int = 12,
    trunk_widths: tuple[int, ...] = (16, 12),
    fork_hidden: int = 10,
    latent_dim: int = 2,
    seed: int = 0,
    tol: float = 1e-5,
    batch: int = 4,
    corrupt: bool = False,
    kinds: tuple[str, ...] = MODEL_KINDS,
) -> list[HeadCheck]:
    """Gradient-check every parameter group of every head kind."""
    vocab = gradcheck_vocab()
    rng = np.random.default_rng(seed)
    seen_pool = sorted(vocab.seen_pairs)
    checks: list[HeadCheck] = []
    for offset, kind in enumerate(kinds):
        model = build_model(
            kind,
            vocab,
            feature_dim,
            trunk_widths=trunk_widths,
            fork_hidden=fork_hidden,
            latent_dim=latent_dim,
            seed=seed * 31 + offset,
        )
        features = rng.normal(size=(batch, feature_dim))
        picks = rng.integers(len(seen_pool), size=batch)
        adj_ids = np.array([seen_pool[p][0] for p in picks])
        noun_ids = np.array([seen_pool[p][1] for p in picks])
        for param in model.parameters():
            poison = corrupt and param.name == CORRUPT_TENSOR

            def f(param=param, poison=poison):
                model.zero_grad()
                loss = model.accumulate_batch(features, adj_ids, noun_ids)
                grad = param.grad.copy()
                if poison:
                    grad *= CORRUPT_FACTOR
                return loss, grad

            result = grad_check(
                f, param.value, tol=tol, seed=seed, name=f"{kind}:{param.name}"
            )
            checks.append(HeadCheck(kind, result))
    return checks
