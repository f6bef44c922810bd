"""Top-k accuracy over candidate pair sets, accuracy-gap rankings between
two models, and example retrieval for arbitrary (including novel) pairs.

Candidate policies: "seen" ranks among seen cells only, "union" among
seen plus unseen cells (the default for unseen-pair evaluation, and the
harder test), "unseen-only" among unseen cells. Ties are always broken
deterministically: by ascending flat cell index when ranking cells, by
ascending example id when ranking examples.

Headline accuracies are unweighted means over pairs (each pair's accuracy
is the mean hit rate of its own examples).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Example, PairVocab, pack_examples
from .errors import CompatError, ParseError, QueryError, RangeError
from .heads import Model

Array = np.ndarray

TOP_KS = (1, 5, 10)
CANDIDATE_POLICIES = ("seen", "union", "unseen-only")

THREADS_ENV = "FACTGRID_THREADS"
SCORE_CHUNK = 2048


def worker_count() -> int:
    """Worker cap for batch-parallel scoring: FACTGRID_THREADS, else cores."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise RangeError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if value < 1:
            raise RangeError(f"{THREADS_ENV} must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


def candidate_pairs(vocab: PairVocab, policy: str) -> frozenset[tuple[int, int]]:
    """The pair set implied by a candidate policy name."""
    if policy == "seen":
        return vocab.seen_pairs
    if policy == "union":
        return vocab.seen_pairs | vocab.unseen_pairs
    if policy == "unseen-only":
        return vocab.unseen_pairs
    raise QueryError(f"unknown candidate policy {policy!r}; use {CANDIDATE_POLICIES}")


def score_examples(model: Model, features: Array, chunk: int = SCORE_CHUNK) -> Array:
    """Score every example against the full grid, chunked and thread-capped.

    Chunks are scored independently (model parameters are read-only here)
    and concatenated in order, so the result does not depend on the number
    of workers.
    """
    n = features.shape[0]
    if n <= chunk:
        return model.pair_scores(features)
    slices = [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    workers = min(worker_count(), len(slices))
    if workers <= 1:
        parts = [model.pair_scores(features[s]) for s in slices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: model.pair_scores(features[s]), slices))
    return np.vstack(parts)


def _candidate_indices(vocab: PairVocab, candidates) -> Array:
    flat = np.array(sorted(vocab.pair_index(i, j) for i, j in candidates), dtype=np.int64)
    if flat.size == 0:
        raise QueryError("candidate set is empty")
    return flat


def ranks_among_candidates(scores: Array, target_flat: Array, cand_flat: Array) -> Array:
    """0-based rank of each row's target cell among the candidate cells.

    A candidate outranks the target if its score is strictly larger, or
    equal with a smaller flat index (the deterministic tie-break).
    """
    cand_scores = scores[:, cand_flat]
    target_scores = scores[np.arange(scores.shape[0]), target_flat][:, None]
    greater = (cand_scores > target_scores).sum(axis=1)
    ties_below = (
        (cand_scores == target_scores) & (cand_flat[None, :] < target_flat[:, None])
    ).sum(axis=1)
    return greater + ties_below


def topk_hit(grid: Array, target: tuple[int, int], k: int, candidates) -> bool:
    """Whether the target cell scores among the k best candidate cells."""
    if k < 1:
        raise RangeError(f"k must be >= 1, got {k}")
    grid = np.asarray(grid, dtype=np.float64)
    noun_count = grid.shape[1]
    candidates = set(candidates)
    if target not in candidates:
        raise QueryError(f"target {target} is not in the candidate set")
    cand_flat = np.array(
        sorted(i * noun_count + j for i, j in candidates), dtype=np.int64
    )
    target_flat = np.array([target[0] * noun_count + target[1]], dtype=np.int64)
    rank = ranks_among_candidates(grid.reshape(1, -1), target_flat, cand_flat)[0]
    return bool(rank < k)


@dataclass
class PairAccuracy:
    """Evaluation row for one pair."""

    pair_index: int
    adjective: str
    noun: str
    seen: bool
    n_examples: int
    accuracy: dict[int, float]


@dataclass
class EvalReport:
    """Per-pair top-k accuracies plus their unweighted means."""

    model_id: str
    policy: str
    ks: tuple[int, ...]
    rows: list[PairAccuracy]
    summary: dict[int, float]
    warnings: list[str] = field(default_factory=list)

    def pair_set(self) -> frozenset[int]:
        return frozenset(row.pair_index for row in self.rows)


def topk_accuracy(
    model: Model,
    examples: list[Example],
    ks: tuple[int, ...] = TOP_KS,
    policy: str = "union",
    candidates=None,
    expected_pairs=None,
) -> EvalReport:
    """Evaluate top-k hit rates of a model over a candidate pair set.

    ``candidates`` overrides the policy-derived set. Every example's label
    pair must be a candidate. ``expected_pairs`` (pair set) lists pairs
    that ought to have examples; those without any are excluded from the
    table with a warning.
    """
    vocab = model.vocab
    if candidates is None:
        candidates = candidate_pairs(vocab, policy)
    else:
        candidates = frozenset(candidates)
        policy = policy if policy in CANDIDATE_POLICIES else "custom"
    if not model.supports_unseen and any(
        pair not in vocab.seen_pairs for pair in candidates
    ):
        raise QueryError(
            f"{model.describe()} can only rank seen pairs; "
            "it has no scores for unseen cells"
        )
    if not examples:
        raise QueryError("no examples to evaluate")
    cand_flat = _candidate_indices(vocab, candidates)
    features, adj_ids, noun_ids = pack_examples(examples)
    target_flat = adj_ids * vocab.noun_count + noun_ids
    in_cand = np.isin(target_flat, cand_flat)
    if not in_cand.all():
        bad = int(target_flat[~in_cand][0])
        raise QueryError(
            f"example pair {vocab.pair_name(bad)!r} is outside the candidate set"
        )
    scores = score_examples(model, features)
    ranks = ranks_among_candidates(scores, target_flat, cand_flat)

    ks = tuple(sorted(ks))
    rows: list[PairAccuracy] = []
    for flat in np.unique(target_flat):
        member = target_flat == flat
        i, j = vocab.pair_of_index(int(flat))
        accuracy = {
            k: float((ranks[member] < k).mean()) for k in ks
        }
        rows.append(
            PairAccuracy(
                int(flat),
                vocab.adjectives[i],
                vocab.nouns[j],
                bool(vocab.seen_mask[flat]),
                int(member.sum()),
                accuracy,
            )
        )
    warnings = []
    if expected_pairs is not None:
        covered = {row.pair_index for row in rows}
        for i, j in sorted(expected_pairs):
            flat = vocab.pair_index(i, j)
            if flat not in covered:
                warnings.append(
                    f"pair {vocab.pair_name(flat)!r} has no examples; excluded"
                )
    summary = {
        k: float(np.mean([row.accuracy[k] for row in rows])) for k in ks
    }
    return EvalReport(model.describe(), policy, ks, rows, summary, warnings)


@dataclass
class GapRow:
    """Per-pair accuracy difference between two reports at one k."""

    pair_index: int
    adjective: str
    noun: str
    seen: bool
    acc_a: float
    acc_b: float

    @property
    def gap(self) -> float:
        return self.acc_a - self.acc_b


def accuracy_gap_report(report_a: EvalReport, report_b: EvalReport, k: int) -> list[GapRow]:
    """Pairs sorted by accuracy difference (a minus b) at one k, descending.

    Both reports must cover exactly the same pairs. Slice the head and tail
    of the result for the best and worst pairs.
    """
    if report_a.pair_set() != report_b.pair_set():
        only_a = sorted(report_a.pair_set() - report_b.pair_set())
        only_b = sorted(report_b.pair_set() - report_a.pair_set())
        raise CompatError(
            f"reports cover different pairs (only in a: {only_a[:5]}, "
            f"only in b: {only_b[:5]})"
        )
    if k not in report_a.ks or k not in report_b.ks:
        raise CompatError(f"k={k} missing from one of the reports")
    b_rows = {row.pair_index: row for row in report_b.rows}
    rows = [
        GapRow(
            row.pair_index,
            row.adjective,
            row.noun,
            row.seen,
            row.accuracy[k],
            b_rows[row.pair_index].accuracy[k],
        )
        for row in report_a.rows
    ]
    rows.sort(key=lambda r: (-r.gap, r.pair_index))
    return rows


@dataclass
class RetrievalResult:
    """Examples ranked by their score at one query cell, descending."""

    adj_id: int
    noun_id: int
    ranked: list[tuple[str, float]]


def retrieve(
    model: Model, examples: list[Example], query: tuple[int, int], top_n: int
) -> RetrievalResult:
    """Rank examples by the model's score for the queried pair.

    The pair may be seen, unseen, or never annotated at all; only the flat
    classifier refuses anything but seen pairs. Ties rank by example id.
    """
    vocab = model.vocab
    i, j = query
    if not (0 <= i < vocab.adj_count and 0 <= j < vocab.noun_count):
        raise QueryError(f"query pair {query} outside the vocabulary grid")
    if top_n < 0:
        raise RangeError(f"top_n must be >= 0, got {top_n}")
    if not model.supports_unseen and (i, j) not in vocab.seen_pairs:
        raise QueryError(
            f"{model.describe()} can only retrieve seen pairs: "
            f"{vocab.pair_name(vocab.pair_index(i, j))!r} has no classifier output"
        )
    if top_n == 0 or not examples:
        return RetrievalResult(i, j, [])
    features, _, _ = pack_examples(examples)
    column = score_examples(model, features)[:, vocab.pair_index(i, j)]
    ids = np.array([ex.id for ex in examples])
    order = np.lexsort((ids, -column))[:top_n]
    ranked = [(str(ids[idx]), float(column[idx])) for idx in order]
    return RetrievalResult(i, j, ranked)


def _float_text(value: float) -> str:
    return repr(float(value))


def write_report(path, report: EvalReport) -> None:
    """Serialize a report: CSV rows plus '#summary' footer lines."""
    lines = ["pair,adjective,noun,seen,n_examples," + ",".join(f"top{k}" for k in report.ks)]
    for row in report.rows:
        lines.append(
            ",".join(
                [
                    str(row.pair_index),
                    row.adjective,
                    row.noun,
                    str(int(row.seen)),
                    str(row.n_examples),
                    *(_float_text(row.accuracy[k]) for k in report.ks),
                ]
            )
        )
    lines.append(f"#summary model={report.model_id} policy={report.policy}")
    for k in report.ks:
        lines.append(f"#summary k={k} mean={_float_text(report.summary[k])}")
    lines.append(f"#summary pairs={len(report.rows)} warnings={len(report.warnings)}")
    for warning in report.warnings:
        lines.append(f"#warning {warning}")
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def read_report(path) -> EvalReport:
    """Parse a report written by write_report."""
    try:
        with open(path, encoding="utf-8") as handle:
            raw = handle.read().splitlines()
    except OSError as err:
        raise ParseError(f"cannot read report {path}: {err}") from None
    if not raw or not raw[0].startswith("pair,adjective,noun,seen,n_examples,"):
        raise ParseError("not an evaluation report", line=1)
    ks = tuple(int(col[3:]) for col in raw[0].split(",")[5:])
    rows: list[PairAccuracy] = []
    model_id, policy = "?", "?"
    summary: dict[int, float] = {}
    warnings: list[str] = []
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#warning "):
            warnings.append(line[len("#warning "):])
            continue
        if line.startswith("#summary "):
            fields = dict(
                token.split("=", 1) for token in line[len("#summary "):].split()
            )
            if "model" in fields:
                model_id = fields["model"]
                policy = fields.get("policy", policy)
            if "k" in fields:
                summary[int(fields["k"])] = float(fields["mean"])
            continue
        parts = line.split(",")
        if len(parts) != 5 + len(ks):
            raise ParseError(f"expected {5 + len(ks)} fields", line=lineno)
        try:
            rows.append(
                PairAccuracy(
                    int(parts[0]),
                    parts[1],
                    parts[2],
                    bool(int(parts[3])),
                    int(parts[4]),
                    {k: float(v) for k, v in zip(ks, parts[5:])},
                )
            )
        except ValueError:
            raise ParseError("unparsable report row", line=lineno) from None
    return EvalReport(model_id, policy, ks, rows, summary, warnings)


def write_gap_report(path, rows: list[GapRow], model_a: str, model_b: str, k: int) -> None:
    """Serialize a gap ranking (model_a accuracy minus model_b accuracy)."""
    lines = ["pair,adjective,noun,seen,acc_a,acc_b,gap"]
    for row in rows:
        lines.append(
            ",".join(
                [
                    str(row.pair_index),
                    row.adjective,
                    row.noun,
                    str(int(row.seen)),
                    _float_text(row.acc_a),
                    _float_text(row.acc_b),
                    _float_text(row.gap),
                ]
            )
        )
    lines.append(f"#summary model_a={model_a} model_b={model_b} k={k}")
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")
