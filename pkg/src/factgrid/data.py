"""Dataset layer: pair vocabulary with support pruning, uploader-disjoint
splits, the feature-file format, and a synthetic two-factor generator.

A dataset is a vocabulary over adjectives and nouns plus a list of labeled
feature vectors. Grid cells (adjective, noun) are either *seen* (training
examples exist), *unseen* (held out, evaluation only) or novel (no examples
at all). Cells are flattened row-major: index(i, j) = i * noun_count + j,
the one convention used everywhere in this package.
"""

from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, ParseError, RangeError, VocabError

Array = np.ndarray

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
SPLIT_UNSEEN = "unseen"
SPLITS = (SPLIT_TRAIN, SPLIT_TEST, SPLIT_UNSEEN)

FEATURE_FILE_MAGIC = "#factgrid v1"


@dataclass(eq=False)
class PairVocab:
    """Adjective and noun lists plus the seen/unseen index over the grid."""

    adjectives: tuple[str, ...]
    nouns: tuple[str, ...]
    seen_pairs: frozenset[tuple[int, int]]
    unseen_pairs: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self):
        self.adjectives = tuple(self.adjectives)
        self.nouns = tuple(self.nouns)
        self.seen_pairs = frozenset(self.seen_pairs)
        self.unseen_pairs = frozenset(self.unseen_pairs)
        if len(set(self.adjectives)) != len(self.adjectives):
            raise VocabError("duplicate adjective names")
        if len(set(self.nouns)) != len(self.nouns):
            raise VocabError("duplicate noun names")
        overlap = self.seen_pairs & self.unseen_pairs
        if overlap:
            raise VocabError(f"pairs marked both seen and unseen: {sorted(overlap)}")
        for i, j in self.seen_pairs | self.unseen_pairs:
            if not (0 <= i < len(self.adjectives) and 0 <= j < len(self.nouns)):
                raise VocabError(f"pair ({i}, {j}) outside the vocabulary grid")
        self.seen_mask = np.zeros(self.pair_count, dtype=bool)
        for i, j in self.seen_pairs:
            self.seen_mask[self.pair_index(i, j)] = True
        # Seen classes ordered by flat grid index; -1 marks non-seen cells.
        self.class_of_pair = np.full(self.pair_count, -1, dtype=np.int64)
        self.class_pairs = np.flatnonzero(self.seen_mask)
        self.class_of_pair[self.class_pairs] = np.arange(len(self.class_pairs))

    @property
    def adj_count(self) -> int:
        return len(self.adjectives)

    @property
    def noun_count(self) -> int:
        return len(self.nouns)

    @property
    def pair_count(self) -> int:
        return self.adj_count * self.noun_count

    @property
    def seen_count(self) -> int:
        return len(self.seen_pairs)

    def pair_index(self, adj_id: int, noun_id: int) -> int:
        return adj_id * self.noun_count + noun_id

    def pair_of_index(self, flat: int) -> tuple[int, int]:
        return flat // self.noun_count, flat % self.noun_count

    def pair_name(self, flat: int) -> str:
        i, j = self.pair_of_index(flat)
        return f"{self.adjectives[i]} {self.nouns[j]}"

    def adj_id(self, name: str) -> int:
        try:
            return self.adjectives.index(name)
        except ValueError:
            raise VocabError(f"unknown adjective {name!r}") from None

    def noun_id(self, name: str) -> int:
        try:
            return self.nouns.index(name)
        except ValueError:
            raise VocabError(f"unknown noun {name!r}") from None

    def canonical_lines(self) -> list[str]:
        return [
            "adjectives:" + ",".join(self.adjectives),
            "nouns:" + ",".join(self.nouns),
            "seen:" + " ".join(f"{i}:{j}" for i, j in sorted(self.seen_pairs)),
            "unseen:" + " ".join(f"{i}:{j}" for i, j in sorted(self.unseen_pairs)),
        ]

    def fingerprint(self) -> str:
        """Stable hash identifying this vocabulary (used by checkpoints)."""
        payload = "\n".join(self.canonical_lines()).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass
class Example:
    """One feature vector with its (possibly noisy) pair label."""

    id: str
    uploader_id: str
    adj_id: int
    noun_id: int
    split: str
    features: Array


def prune_vocab(
    counts: Mapping[tuple[str, str], int],
    min_images: int,
    excluded: Iterable[tuple[str, str]] = (),
) -> PairVocab:
    """Build a seen-pair vocabulary from a (adjective, noun) -> count census.

    Pairs below ``min_images`` (or on the exclusion list) are dropped first.
    Then pairs that share neither their adjective nor their noun with another
    surviving pair are removed, repeatedly, until nothing changes: a pair
    survives only while at least one of its words has total support >= 2
    among survivors. Unused words are dropped and the rest reindexed.
    """
    excluded = frozenset(excluded)
    pairs = {
        pair: count
        for pair, count in counts.items()
        if count >= min_images and pair not in excluded
    }
    while True:
        adj_support = Counter(adj for adj, _ in pairs)
        noun_support = Counter(noun for _, noun in pairs)
        doomed = [
            pair
            for pair in pairs
            if adj_support[pair[0]] < 2 and noun_support[pair[1]] < 2
        ]
        if not doomed:
            break
        for pair in doomed:
            del pairs[pair]
    if not pairs:
        raise VocabError(
            f"no pair survives pruning (min_images={min_images}, "
            f"{len(counts)} pairs in census)"
        )
    adjectives = tuple(sorted({adj for adj, _ in pairs}))
    nouns = tuple(sorted({noun for _, noun in pairs}))
    adj_index = {name: i for i, name in enumerate(adjectives)}
    noun_index = {name: j for j, name in enumerate(nouns)}
    seen = frozenset((adj_index[a], noun_index[n]) for a, n in pairs)
    return PairVocab(adjectives, nouns, seen)


def select_unseen(
    counts: Mapping[tuple[str, str], int],
    vocab: PairVocab,
    min_unseen: int = 100,
) -> frozenset[tuple[int, int]]:
    """Pick evaluation-only pairs: excluded from the seen set but with both
    words in the vocabulary and at least ``min_unseen`` examples."""
    adj_index = {name: i for i, name in enumerate(vocab.adjectives)}
    noun_index = {name: j for j, name in enumerate(vocab.nouns)}
    chosen = set()
    for (adj, noun), count in counts.items():
        if count < min_unseen or adj not in adj_index or noun not in noun_index:
            continue
        pair = (adj_index[adj], noun_index[noun])
        if pair not in vocab.seen_pairs:
            chosen.add(pair)
    return frozenset(chosen)


def with_unseen(vocab: PairVocab, unseen: Iterable[tuple[int, int]]) -> PairVocab:
    """Copy of the vocabulary with the unseen pair set replaced."""
    return PairVocab(vocab.adjectives, vocab.nouns, vocab.seen_pairs, frozenset(unseen))


def build_vocab(
    counts: Mapping[tuple[str, str], int],
    min_images: int = 200,
    min_unseen: int = 100,
    excluded: Iterable[tuple[str, str]] = (),
) -> PairVocab:
    """prune_vocab followed by select_unseen, in one step."""
    vocab = prune_vocab(counts, min_images, excluded)
    return with_unseen(vocab, select_unseen(counts, vocab, min_unseen))


def split_by_uploader(
    examples: Iterable[Example],
    test_fraction: float,
    seed: int,
) -> tuple[dict[str, str], list[str]]:
    """Assign examples to train/test, keeping each (pair, uploader) whole.

    Within every pair, uploaders are visited in seeded random order and
    their whole image group goes to the test side whenever that moves the
    pair's test count closer to ``test_fraction`` of its images. A pair
    with a single uploader goes entirely to train and a warning is
    recorded. Returns (example id -> split, warnings).
    """
    if not 0.0 < test_fraction < 1.0:
        raise RangeError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_pair: dict[tuple[int, int], dict[str, list[Example]]] = defaultdict(dict)
    for ex in examples:
        by_pair[(ex.adj_id, ex.noun_id)].setdefault(ex.uploader_id, []).append(ex)
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    warnings: list[str] = []
    for pair in sorted(by_pair):
        groups = by_pair[pair]
        if len(groups) == 1:
            (uploader,) = groups
            for ex in groups[uploader]:
                assignment[ex.id] = SPLIT_TRAIN
            warnings.append(
                f"pair {pair}: single uploader {uploader!r}, all images kept for training"
            )
            continue
        uploaders = sorted(groups)
        order = rng.permutation(len(uploaders))
        total = sum(len(g) for g in groups.values())
        target = test_fraction * total
        in_test = 0
        for idx in order:
            group = groups[uploaders[idx]]
            side = SPLIT_TEST if abs(in_test + len(group) - target) < abs(in_test - target) else SPLIT_TRAIN
            if side == SPLIT_TEST:
                in_test += len(group)
            for ex in group:
                assignment[ex.id] = side
    return assignment, warnings


def _feature_text(value: float) -> str:
    # 17 significant digits round-trip any float64 exactly.
    return f"{value:.17g}"


def write_feature_file(path, vocab: PairVocab, examples: Iterable[Example]) -> None:
    """Serialize a dataset to the delimited text format (see read side)."""
    for name in (*vocab.adjectives, *vocab.nouns):
        if "," in name or "\n" in name:
            raise VocabError(f"word {name!r} may not contain commas or newlines")
    lines = [
        f"{FEATURE_FILE_MAGIC} D={{}}",
        "#adjectives " + ",".join(vocab.adjectives),
        "#nouns " + ",".join(vocab.nouns),
    ]
    dim: int | None = None
    for ex in examples:
        if "," in ex.id or "," in ex.uploader_id:
            raise VocabError(f"example {ex.id!r}: ids may not contain commas")
        if ex.split not in SPLITS:
            raise VocabError(f"example {ex.id!r}: unknown split {ex.split!r}")
        if dim is None:
            dim = len(ex.features)
        elif len(ex.features) != dim:
            raise VocabError(
                f"example {ex.id!r}: feature dimension {len(ex.features)} != {dim}"
            )
        lines.append(
            ",".join(
                [
                    ex.id,
                    ex.uploader_id,
                    vocab.adjectives[ex.adj_id],
                    vocab.nouns[ex.noun_id],
                    ex.split,
                    *(_feature_text(v) for v in ex.features),
                ]
            )
        )
    lines[0] = lines[0].format(dim if dim is not None else 0)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def read_feature_file(path) -> tuple[PairVocab, list[Example]]:
    """Parse a feature file.

    Format (UTF-8 text, one record per line):

      line 1: ``#factgrid v1 D=<dim>``
      line 2: ``#adjectives <comma-separated names>``
      line 3: ``#nouns <comma-separated names>``
      body:   ``<id>,<uploader>,<adjective>,<noun>,<split>,<f_1>,...,<f_D>``
              with split in {train, test, unseen}

    Unknown ``#``-prefixed lines after line 3 are ignored. Seen pairs are
    the ones labeling train/test rows, unseen pairs the ones labeling
    unseen rows; a pair may not do both.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            raw = handle.read().splitlines()
    except OSError as err:
        raise ParseError(f"cannot read feature file {path}: {err}") from None
    if not raw or not raw[0].startswith(FEATURE_FILE_MAGIC):
        raise ParseError(f"missing {FEATURE_FILE_MAGIC!r} header", line=1)
    head = raw[0][len(FEATURE_FILE_MAGIC):].strip()
    if not head.startswith("D="):
        raise ParseError("header must carry D=<feature dimension>", line=1)
    try:
        dim = int(head[2:])
    except ValueError:
        raise ParseError(f"bad feature dimension {head[2:]!r}", line=1) from None
    if dim < 0:
        raise ParseError(f"bad feature dimension {dim}", line=1)
    if len(raw) < 3:
        raise ParseError("missing #adjectives / #nouns header lines", line=len(raw))
    if not raw[1].startswith("#adjectives "):
        raise ParseError("expected '#adjectives <names>'", line=2)
    if not raw[2].startswith("#nouns "):
        raise ParseError("expected '#nouns <names>'", line=3)
    adjectives = tuple(raw[1][len("#adjectives "):].split(","))
    nouns = tuple(raw[2][len("#nouns "):].split(","))
    adj_index = {name: i for i, name in enumerate(adjectives)}
    noun_index = {name: j for j, name in enumerate(nouns)}
    examples: list[Example] = []
    seen_ids: set[str] = set()
    seen_pairs: set[tuple[int, int]] = set()
    unseen_pairs: set[tuple[int, int]] = set()
    for lineno, line in enumerate(raw[3:], start=4):
        if not line.strip():
            continue
        if line.startswith("#"):
            continue  # forward compatibility
        fields = line.split(",")
        if len(fields) != 5 + dim:
            raise ParseError(
                f"expected {5 + dim} comma-separated fields, found {len(fields)}",
                line=lineno,
            )
        ex_id, uploader, adj, noun, split = fields[:5]
        if ex_id in seen_ids:
            raise ParseError(f"duplicate example id {ex_id!r}", line=lineno)
        seen_ids.add(ex_id)
        if adj not in adj_index:
            raise ParseError(f"unknown adjective {adj!r}", line=lineno)
        if noun not in noun_index:
            raise ParseError(f"unknown noun {noun!r}", line=lineno)
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", line=lineno)
        try:
            features = np.array([float(v) for v in fields[5:]], dtype=np.float64)
        except ValueError:
            raise ParseError("unparsable feature value", line=lineno) from None
        pair = (adj_index[adj], noun_index[noun])
        (unseen_pairs if split == SPLIT_UNSEEN else seen_pairs).add(pair)
        examples.append(Example(ex_id, uploader, pair[0], pair[1], split, features))
    conflict = seen_pairs & unseen_pairs
    if conflict:
        raise ParseError(
            f"pairs labeled with both seen and unseen splits: {sorted(conflict)}",
            line=len(raw),
        )
    vocab = PairVocab(adjectives, nouns, frozenset(seen_pairs), frozenset(unseen_pairs))
    return vocab, examples


def read_exclusion_file(path) -> frozenset[tuple[str, str]]:
    """Optional manual exclusion list: one 'adjective,noun' per line,
    '#' comments and blank lines ignored."""
    pairs = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError("expected 'adjective,noun'", line=lineno)
            pairs.add((parts[0].strip(), parts[1].strip()))
    return frozenset(pairs)


def pack_examples(examples: list[Example]) -> tuple[Array, Array, Array]:
    """Stack examples into (features, adj_ids, noun_ids) arrays."""
    if not examples:
        raise VocabError("cannot pack an empty example list")
    features = np.stack([ex.features for ex in examples]).astype(np.float64)
    adj_ids = np.array([ex.adj_id for ex in examples], dtype=np.int64)
    noun_ids = np.array([ex.noun_id for ex in examples], dtype=np.int64)
    return features, adj_ids, noun_ids


@dataclass
class SynthConfig:
    """Recipe for a synthetic two-factor dataset with known structure."""

    adj_count: int = 20
    noun_count: int = 24
    true_latent_dim: int = 2
    feature_dim: int = 32
    examples_per_pair: int = 150
    holdout_fraction: float = 0.15
    label_noise_rate: float = 0.1
    noise_scale: float = 0.75
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.adj_count < 1 or self.noun_count < 1:
            raise ConfigError("adj_count and noun_count must be >= 1")
        if self.true_latent_dim < 1:
            raise ConfigError("true_latent_dim must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.examples_per_pair < 1:
            raise ConfigError("examples_per_pair must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ConfigError("label_noise_rate must be in [0, 1)")
        if self.noise_scale < 0.0:
            raise ConfigError("noise_scale must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")


@dataclass
class SynthTruth:
    """Generating parameters behind a synthetic dataset."""

    adj_latents: Array
    noun_latents: Array
    feature_map: Array
    true_pairs: dict[str, tuple[int, int]] = field(default_factory=dict)


def _holdout_cells(cfg: SynthConfig, rng: np.random.Generator) -> set[int]:
    total = cfg.adj_count * cfg.noun_count
    wanted = int(round(cfg.holdout_fraction * total))
    if wanted == 0:
        return set()
    for _ in range(100):
        cells = rng.choice(total, size=wanted, replace=False)
        seen = np.ones(total, dtype=bool)
        seen[cells] = False
        grid = seen.reshape(cfg.adj_count, cfg.noun_count)
        if grid.sum(axis=1).min() >= 2 and grid.sum(axis=0).min() >= 2:
            return set(int(c) for c in cells)
    raise ConfigError(
        "could not sample a holdout leaving every adjective and noun with "
        ">= 2 seen cells in 100 attempts; lower holdout_fraction"
    )


def generate_synthetic(cfg: SynthConfig) -> tuple[PairVocab, list[Example], SynthTruth]:
    """Draw a dataset whose features really do factor into two latents.

    Every adjective i and noun j get true latent vectors; the features of
    an example of cell (i, j) are a fixed random linear map of the
    concatenated latents plus Gaussian noise. With probability
    ``label_noise_rate`` an example keeps its features but is relabeled to
    a different adjective of the same noun, mimicking adjective-tag noise.
    A fraction of grid cells is held out as unseen; examples whose label
    lands in a held-out cell form the unseen evaluation split, the rest
    are split train/test uploader-disjointly.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    adj_width = max(2, len(str(cfg.adj_count - 1)))
    noun_width = max(2, len(str(cfg.noun_count - 1)))
    adjectives = tuple(f"adj{i:0{adj_width}d}" for i in range(cfg.adj_count))
    nouns = tuple(f"noun{j:0{noun_width}d}" for j in range(cfg.noun_count))
    latent = cfg.true_latent_dim
    adj_latents = rng.normal(size=(cfg.adj_count, latent))
    noun_latents = rng.normal(size=(cfg.noun_count, latent))
    feature_map = rng.normal(size=(cfg.feature_dim, 2 * latent)) / np.sqrt(2 * latent)

    holdout = _holdout_cells(cfg, rng)
    total = cfg.adj_count * cfg.noun_count
    seen = frozenset(
        (c // cfg.noun_count, c % cfg.noun_count)
        for c in range(total)
        if c not in holdout
    )
    unseen = frozenset(
        (c // cfg.noun_count, c % cfg.noun_count) for c in sorted(holdout)
    )
    vocab = PairVocab(adjectives, nouns, seen, unseen)

    truth = SynthTruth(adj_latents, noun_latents, feature_map)
    pool = max(3, cfg.examples_per_pair // 10)
    examples: list[Example] = []
    counter = 0
    for cell in range(total):
        i, j = cell // cfg.noun_count, cell % cfg.noun_count
        base = feature_map @ np.concatenate([adj_latents[i], noun_latents[j]])
        for _ in range(cfg.examples_per_pair):
            uploader = f"u{cell:04d}.{int(rng.integers(pool)):02d}"
            feats = base + rng.normal(0.0, cfg.noise_scale, size=cfg.feature_dim)
            label_i = i
            if cfg.label_noise_rate > 0.0 and cfg.adj_count >= 2:
                if rng.random() < cfg.label_noise_rate:
                    other = int(rng.integers(cfg.adj_count - 1))
                    label_i = other if other < i else other + 1
            ex_id = f"img{counter:06d}"
            counter += 1
            truth.true_pairs[ex_id] = (i, j)
            examples.append(Example(ex_id, uploader, label_i, j, SPLIT_UNSEEN, feats))

    seen_labeled = [
        ex for ex in examples if (ex.adj_id, ex.noun_id) in vocab.seen_pairs
    ]
    split_seed = int(rng.integers(2**63))
    assignment, _ = split_by_uploader(seen_labeled, cfg.test_fraction, split_seed)
    for ex in seen_labeled:
        ex.split = assignment[ex.id]
    return vocab, examples, truth
