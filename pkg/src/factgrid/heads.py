"""The three classifier heads over a shared MLP trunk.

* flat: one softmax over the seen pairs; cannot score anything else.
* fork: independent adjective and noun softmaxes; a pair scores the
  product of its two probabilities.
* fact: each example is mapped to per-adjective and per-noun latent
  vectors of width ``latent_dim``; the score grid is their product, so the
  grid of one example always has rank <= latent_dim and held-out cells get
  meaningful scores from the shared factors.

Training losses use the softmax normalized over seen cells only (the flat
head's class list is exactly the seen cells, the fact head masks its grid).
At evaluation time fork and fact score the full grid with no mask; fact
ranks raw bilinear scores, fork ranks probability products.

All backward passes are hand-derived and grad-checkable; batch gradients
are means over examples.
"""

from __future__ import annotations

import numpy as np

from .data import PairVocab
from .errors import ShapeError, TargetError
from .nn import Array, LinearLayer, Param, PReLULayer, masked_nll_rows, masked_softmax_rows, matmul

TRUNK_WIDTHS = (64, 64)
FORK_HIDDEN = 64
LATENT_DIM = 2

MODEL_KINDS = ("flat", "fork", "fact")


def pair_grid(adj_latent: Array, noun_latent: Array) -> Array:
    """Score grid of one example: adj_latent @ noun_latent.T.

    Entry (i, j) is the dot product of adjective i's and noun j's latent
    vectors, so the grid has rank at most the latent width.
    """
    if adj_latent.ndim != 2 or noun_latent.ndim != 2 or adj_latent.shape[1] != noun_latent.shape[1]:
        raise ShapeError(
            f"latent widths do not match: {adj_latent.shape} vs {noun_latent.shape}"
        )
    return matmul(adj_latent, noun_latent.T)


def bilinear_grid_backward(
    dgrid: Array, adj_latent: Array, noun_latent: Array
) -> tuple[Array, Array]:
    """Backward of the bilinear grid for one example.

    Given dL/dgrid, returns (dL/dadj_latent, dL/dnoun_latent) =
    (dgrid @ noun_latent, dgrid.T @ adj_latent).
    """
    if dgrid.shape != (adj_latent.shape[0], noun_latent.shape[0]):
        raise ShapeError(
            f"grid gradient {dgrid.shape} does not match "
            f"({adj_latent.shape[0]}, {noun_latent.shape[0]})"
        )
    return matmul(dgrid, noun_latent), matmul(dgrid.T, adj_latent)


def fork_pair_score(adj_probs: Array, noun_probs: Array) -> Array:
    """Product-rule pair scores: grid[i, j] = adj_probs[i] * noun_probs[j].

    For valid input distributions the grid itself sums to one.
    """
    adj_probs = np.asarray(adj_probs, dtype=np.float64)
    noun_probs = np.asarray(noun_probs, dtype=np.float64)
    if adj_probs.ndim != 1 or noun_probs.ndim != 1:
        raise ShapeError(
            f"expected probability vectors, got {adj_probs.shape} and {noun_probs.shape}"
        )
    return np.outer(adj_probs, noun_probs)


class Trunk:
    """Stack of LinearLayer + PReLU pairs shared by every head."""

    def __init__(self, in_dim: int, widths: tuple[int, ...], rng: np.random.Generator | None):
        if not widths:
            raise ShapeError("trunk needs at least one layer width")
        self.in_dim = in_dim
        self.widths = tuple(int(w) for w in widths)
        self.out_dim = self.widths[-1]
        self.linears: list[LinearLayer] = []
        self.prelus: list[PReLULayer] = []
        prev = in_dim
        for width in self.widths:
            self.linears.append(LinearLayer(prev, width, rng))
            self.prelus.append(PReLULayer(width))
            prev = width
        self._cache: list[tuple[Array, Array]] | None = None

    def forward(self, x: Array, cache: bool = False) -> Array:
        steps = []
        out = x
        for linear, prelu in zip(self.linears, self.prelus):
            pre = linear.forward(out)
            if cache:
                steps.append((out, pre))
            out = prelu.forward(pre)
        self._cache = steps if cache else None
        return out

    def backward(self, grad_out: Array) -> Array:
        if self._cache is None:
            raise ShapeError("trunk backward requires a cached forward pass")
        grad = grad_out
        for linear, prelu, (x_in, pre) in zip(
            reversed(self.linears), reversed(self.prelus), reversed(self._cache)
        ):
            grad = prelu.backward(pre, grad)
            grad = linear.backward(x_in, grad)
        return grad

    def zero_grad(self) -> None:
        for linear, prelu in zip(self.linears, self.prelus):
            linear.zero_grad()
            prelu.zero_grad()

    def parameters(self) -> list[Param]:
        params: list[Param] = []
        for idx, (linear, prelu) in enumerate(zip(self.linears, self.prelus)):
            params += linear.parameters(f"trunk.{idx}", group="trunk")
            params += prelu.parameters(f"trunk.{idx}", group="trunk")
        return params


class FlatHead:
    """One classifier over the seen pairs, nothing else."""

    supports_unseen = False

    def __init__(self, in_dim: int, vocab: PairVocab, rng: np.random.Generator | None):
        self.vocab = vocab
        self.classifier = LinearLayer(in_dim, vocab.seen_count, rng)
        self._all_true = np.ones(vocab.seen_count, dtype=bool)

    def forward_probs(self, trunk_out: Array) -> Array:
        """Per-example softmax over the seen-pair classes."""
        return masked_softmax_rows(self.classifier.forward(trunk_out), self._all_true)

    def _class_targets(self, pair_flat: Array) -> Array:
        classes = self.vocab.class_of_pair[pair_flat]
        if (classes < 0).any():
            bad = int(pair_flat[classes < 0][0])
            raise TargetError(f"pair {self.vocab.pair_name(bad)!r} is not a seen pair")
        return classes

    def loss(self, trunk_out: Array, pair_flat: Array) -> float:
        logits = self.classifier.forward(trunk_out)
        losses, _ = masked_nll_rows(logits, self._all_true, self._class_targets(pair_flat))
        return float(losses.mean())

    def loss_and_backward(self, trunk_out: Array, pair_flat: Array) -> tuple[float, Array]:
        targets = self._class_targets(pair_flat)
        logits = self.classifier.forward(trunk_out)
        losses, dlogits = masked_nll_rows(logits, self._all_true, targets)
        dtrunk = self.classifier.backward(trunk_out, dlogits / len(targets))
        return float(losses.mean()), dtrunk

    def pair_scores(self, trunk_out: Array) -> Array:
        """Seen-cell probabilities scattered onto the grid; -inf elsewhere."""
        probs = self.forward_probs(trunk_out)
        scores = np.full((trunk_out.shape[0], self.vocab.pair_count), -np.inf)
        scores[:, self.vocab.class_pairs] = probs
        return scores

    def zero_grad(self) -> None:
        self.classifier.zero_grad()

    def parameters(self) -> list[Param]:
        return self.classifier.parameters("flat.classifier")


class ForkHead:
    """Independent adjective and noun classifiers behind the shared trunk."""

    supports_unseen = True

    def __init__(self, in_dim: int, vocab: PairVocab, hidden: int, rng):
        self.vocab = vocab
        self.hidden = hidden
        self.adj_hidden = LinearLayer(in_dim, hidden, rng)
        self.adj_act = PReLULayer(hidden)
        self.adj_out = LinearLayer(hidden, vocab.adj_count, rng)
        self.noun_hidden = LinearLayer(in_dim, hidden, rng)
        self.noun_act = PReLULayer(hidden)
        self.noun_out = LinearLayer(hidden, vocab.noun_count, rng)
        self._adj_mask = np.ones(vocab.adj_count, dtype=bool)
        self._noun_mask = np.ones(vocab.noun_count, dtype=bool)

    def _branch_forward(self, which: str, trunk_out: Array):
        hidden = getattr(self, f"{which}_hidden")
        act = getattr(self, f"{which}_act")
        out = getattr(self, f"{which}_out")
        pre = hidden.forward(trunk_out)
        mid = act.forward(pre)
        return pre, mid, out.forward(mid)

    def forward_logits(self, trunk_out: Array) -> tuple[Array, Array]:
        _, _, adj = self._branch_forward("adj", trunk_out)
        _, _, noun = self._branch_forward("noun", trunk_out)
        return adj, noun

    def forward_probs(self, trunk_out: Array) -> tuple[Array, Array]:
        """Full softmaxes over the adjective and noun vocabularies."""
        adj, noun = self.forward_logits(trunk_out)
        return (
            masked_softmax_rows(adj, self._adj_mask),
            masked_softmax_rows(noun, self._noun_mask),
        )

    def _check_targets(self, adj_ids: Array, noun_ids: Array) -> None:
        if adj_ids.min() < 0 or adj_ids.max() >= self.vocab.adj_count:
            raise TargetError("adjective target out of range")
        if noun_ids.min() < 0 or noun_ids.max() >= self.vocab.noun_count:
            raise TargetError("noun target out of range")

    def loss(self, trunk_out: Array, adj_ids: Array, noun_ids: Array) -> float:
        self._check_targets(adj_ids, noun_ids)
        adj, noun = self.forward_logits(trunk_out)
        adj_losses, _ = masked_nll_rows(adj, self._adj_mask, adj_ids)
        noun_losses, _ = masked_nll_rows(noun, self._noun_mask, noun_ids)
        return float(adj_losses.mean() + noun_losses.mean())

    def loss_and_backward(
        self, trunk_out: Array, adj_ids: Array, noun_ids: Array
    ) -> tuple[float, Array]:
        self._check_targets(adj_ids, noun_ids)
        batch = trunk_out.shape[0]
        total = 0.0
        dtrunk = np.zeros_like(trunk_out)
        for which, targets, mask in (
            ("adj", adj_ids, self._adj_mask),
            ("noun", noun_ids, self._noun_mask),
        ):
            pre, mid, logits = self._branch_forward(which, trunk_out)
            losses, dlogits = masked_nll_rows(logits, mask, targets)
            total += float(losses.mean())
            dmid = getattr(self, f"{which}_out").backward(mid, dlogits / batch)
            dpre = getattr(self, f"{which}_act").backward(pre, dmid)
            dtrunk += getattr(self, f"{which}_hidden").backward(trunk_out, dpre)
        return total, dtrunk

    def pair_scores(self, trunk_out: Array) -> Array:
        adj_probs, noun_probs = self.forward_probs(trunk_out)
        grids = np.einsum("ba,bn->ban", adj_probs, noun_probs)
        return grids.reshape(trunk_out.shape[0], -1)

    def zero_grad(self) -> None:
        for layer in (
            self.adj_hidden,
            self.adj_act,
            self.adj_out,
            self.noun_hidden,
            self.noun_act,
            self.noun_out,
        ):
            layer.zero_grad()

    def parameters(self) -> list[Param]:
        params: list[Param] = []
        for which in ("adj", "noun"):
            params += getattr(self, f"{which}_hidden").parameters(f"fork.{which}_hidden")
            params += getattr(self, f"{which}_act").parameters(f"fork.{which}_act")
            params += getattr(self, f"{which}_out").parameters(f"fork.{which}_out")
        return params


class FactHead:
    """Bilinearly factorized head: latent factors per adjective and noun."""

    supports_unseen = True

    def __init__(self, in_dim: int, vocab: PairVocab, latent_dim: int, rng):
        if latent_dim < 1:
            raise ShapeError(f"latent_dim must be >= 1, got {latent_dim}")
        self.vocab = vocab
        self.latent_dim = latent_dim
        self.adj_embed = LinearLayer(in_dim, vocab.adj_count * latent_dim, rng)
        self.adj_act = PReLULayer(vocab.adj_count * latent_dim)
        self.noun_embed = LinearLayer(in_dim, vocab.noun_count * latent_dim, rng)
        self.noun_act = PReLULayer(vocab.noun_count * latent_dim)

    def forward(self, trunk_out: Array) -> tuple[Array, Array, Array]:
        """Latent factor stacks and the score grid, batched.

        Returns (adj_latent (B, A, M), noun_latent (B, N, M), grid
        (B, A, N)) with grid[b] = adj_latent[b] @ noun_latent[b].T.
        """
        batch = trunk_out.shape[0]
        adj = self.adj_act.forward(self.adj_embed.forward(trunk_out))
        noun = self.noun_act.forward(self.noun_embed.forward(trunk_out))
        adj_latent = adj.reshape(batch, self.vocab.adj_count, self.latent_dim)
        noun_latent = noun.reshape(batch, self.vocab.noun_count, self.latent_dim)
        grid = np.einsum("bam,bnm->ban", adj_latent, noun_latent)
        return adj_latent, noun_latent, grid

    def _check_targets(self, pair_flat: Array) -> None:
        if (pair_flat < 0).any() or (pair_flat >= self.vocab.pair_count).any():
            raise TargetError("pair target outside the grid")
        seen = self.vocab.seen_mask[pair_flat]
        if not seen.all():
            bad = int(pair_flat[~seen][0])
            raise TargetError(f"pair {self.vocab.pair_name(bad)!r} is not a seen pair")

    def loss(self, trunk_out: Array, pair_flat: Array) -> float:
        self._check_targets(pair_flat)
        _, _, grid = self.forward(trunk_out)
        logits = grid.reshape(trunk_out.shape[0], -1)
        losses, _ = masked_nll_rows(logits, self.vocab.seen_mask, pair_flat)
        return float(losses.mean())

    def loss_and_backward(self, trunk_out: Array, pair_flat: Array) -> tuple[float, Array]:
        self._check_targets(pair_flat)
        batch = trunk_out.shape[0]
        pre_adj = self.adj_embed.forward(trunk_out)
        act_adj = self.adj_act.forward(pre_adj)
        pre_noun = self.noun_embed.forward(trunk_out)
        act_noun = self.noun_act.forward(pre_noun)
        adj_latent = act_adj.reshape(batch, self.vocab.adj_count, self.latent_dim)
        noun_latent = act_noun.reshape(batch, self.vocab.noun_count, self.latent_dim)
        grid = np.einsum("bam,bnm->ban", adj_latent, noun_latent)

        losses, dlogits = masked_nll_rows(
            grid.reshape(batch, -1), self.vocab.seen_mask, pair_flat
        )
        dgrid = (dlogits / batch).reshape(grid.shape)
        dadj_latent = np.einsum("ban,bnm->bam", dgrid, noun_latent)
        dnoun_latent = np.einsum("ban,bam->bnm", dgrid, adj_latent)

        dpre_adj = self.adj_act.backward(pre_adj, dadj_latent.reshape(batch, -1))
        dtrunk = self.adj_embed.backward(trunk_out, dpre_adj)
        dpre_noun = self.noun_act.backward(pre_noun, dnoun_latent.reshape(batch, -1))
        dtrunk = dtrunk + self.noun_embed.backward(trunk_out, dpre_noun)
        return float(losses.mean()), dtrunk

    def pair_scores(self, trunk_out: Array) -> Array:
        """Raw bilinear scores over the full grid, seen or not."""
        _, _, grid = self.forward(trunk_out)
        return grid.reshape(trunk_out.shape[0], -1)

    def zero_grad(self) -> None:
        for layer in (self.adj_embed, self.adj_act, self.noun_embed, self.noun_act):
            layer.zero_grad()

    def parameters(self) -> list[Param]:
        params = self.adj_embed.parameters("fact.adj_embed")
        params += self.adj_act.parameters("fact.adj_act")
        params += self.noun_embed.parameters("fact.noun_embed")
        params += self.noun_act.parameters("fact.noun_act")
        return params


class Model:
    """A trunk plus one head, with the vocabulary they were built for."""

    def __init__(self, kind: str, vocab: PairVocab, trunk: Trunk, head):
        self.kind = kind
        self.vocab = vocab
        self.trunk = trunk
        self.head = head

    @property
    def supports_unseen(self) -> bool:
        return self.head.supports_unseen

    def describe(self) -> str:
        if self.kind == "fact":
            return f"fact-m{self.head.latent_dim}"
        return self.kind

    def zero_grad(self) -> None:
        self.trunk.zero_grad()
        self.head.zero_grad()

    def parameters(self) -> list[Param]:
        return self.trunk.parameters() + self.head.parameters()

    def _head_loss_and_backward(self, trunk_out, adj_ids, noun_ids):
        if self.kind == "fork":
            return self.head.loss_and_backward(trunk_out, adj_ids, noun_ids)
        pair_flat = adj_ids * self.vocab.noun_count + noun_ids
        return self.head.loss_and_backward(trunk_out, pair_flat)

    def accumulate_batch(self, features: Array, adj_ids: Array, noun_ids: Array) -> float:
        """Forward + backward on one batch; gradients are added in place."""
        trunk_out = self.trunk.forward(features, cache=True)
        loss, dtrunk = self._head_loss_and_backward(trunk_out, adj_ids, noun_ids)
        self.trunk.backward(dtrunk)
        return loss

    def batch_loss(self, features: Array, adj_ids: Array, noun_ids: Array) -> float:
        trunk_out = self.trunk.forward(features)
        if self.kind == "fork":
            return self.head.loss(trunk_out, adj_ids, noun_ids)
        pair_flat = adj_ids * self.vocab.noun_count + noun_ids
        return self.head.loss(trunk_out, pair_flat)

    def pair_scores(self, features: Array) -> Array:
        """Flat (batch, adj_count * noun_count) score rows for ranking."""
        return self.head.pair_scores(self.trunk.forward(features))


def build_model(
    kind: str,
    vocab: PairVocab,
    feature_dim: int,
    trunk_widths: tuple[int, ...] = TRUNK_WIDTHS,
    fork_hidden: int = FORK_HIDDEN,
    latent_dim: int = LATENT_DIM,
    seed: int = 0,
) -> Model:
    """Construct a freshly initialized model of the given kind."""
    if kind not in MODEL_KINDS:
        raise ShapeError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    rng = np.random.default_rng(seed)
    trunk = Trunk(feature_dim, tuple(trunk_widths), rng)
    if kind == "flat":
        head = FlatHead(trunk.out_dim, vocab, rng)
    elif kind == "fork":
        head = ForkHead(trunk.out_dim, vocab, fork_hidden, rng)
    else:
        head = FactHead(trunk.out_dim, vocab, latent_dim, rng)
    return Model(kind, vocab, trunk, head)
