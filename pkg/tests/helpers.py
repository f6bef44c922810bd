"""Shared helpers for the test suite: tiny vocabularies and brute-force
oracles kept deliberately independent of the library code paths."""

import numpy as np

from factgrid.data import PairVocab


def full_grid_vocab(adj_count, noun_count, unseen_cells=()):
    """Vocabulary over every (i, j) cell, minus the given unseen cells."""
    unseen = frozenset(unseen_cells)
    seen = frozenset(
        (i, j)
        for i in range(adj_count)
        for j in range(noun_count)
        if (i, j) not in unseen
    )
    adjectives = tuple(f"a{i:02d}" for i in range(adj_count))
    nouns = tuple(f"n{j:02d}" for j in range(noun_count))
    return PairVocab(adjectives, nouns, seen, unseen)


def grid_oracle(adj_latent, noun_latent):
    """Per-cell double loop over the latent sum, the reference for the
    bilinear score grid."""
    adj_count, latent = adj_latent.shape
    noun_count = noun_latent.shape[0]
    grid = np.zeros((adj_count, noun_count))
    for i in range(adj_count):
        for j in range(noun_count):
            for m in range(latent):
                grid[i, j] += adj_latent[i, m] * noun_latent[j, m]
    return grid


def softmax_oracle(logits):
    """Plain softmax the long way (safe for small magnitudes only)."""
    weights = np.exp(logits)
    return weights / weights.sum()
