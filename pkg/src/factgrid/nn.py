"""Minimal dense float64 kernel: matmul, linear and PReLU layers, masked
softmax, cross-entropy, and finite-difference gradient checking.

All numeric state lives in 2-D (or 1-D for vectors) C-order ``numpy.float64``
arrays. Backward passes are hand-derived; there is no autodiff graph. Layers
accumulate parameter gradients in-place into ``grad_*`` buffers whose shapes
always mirror the parameter shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MaskError, ShapeError, TargetError

Array = np.ndarray

PRELU_INIT_SLOPE = 0.25


def as_matrix(values) -> Array:
    """Coerce to a C-order float64 2-D array."""
    out = np.ascontiguousarray(values, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {out.shape}")
    return out


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class Param:
    """Handle onto one learnable tensor and its gradient buffer.

    ``value`` and ``grad`` alias the owning layer's arrays, so in-place
    updates through a Param are visible to the layer. ``decay`` marks
    whether weight decay applies (it is skipped for biases and PReLU
    slopes); ``group`` selects the optimizer's learning-rate multiplier.
    """

    name: str
    value: Array
    grad: Array
    decay: bool = True
    group: str = "head"


class LinearLayer:
    """Affine map ``y = x @ weight.T + bias`` over rows of a batch.

    ``weight`` has shape (out_dim, in_dim). Weights are initialized
    uniformly in [-s, s] with s = 1/sqrt(in_dim) when an ``rng`` is given,
    and to zero otherwise; biases start at zero.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            self.weight = np.zeros((out_dim, in_dim))
        else:
            scale = 1.0 / np.sqrt(in_dim)
            self.weight = rng.uniform(-scale, scale, size=(out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def forward(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear layer expects (batch, {self.in_dim}) input, got {x.shape}"
            )
        return x @ self.weight.T + self.bias

    def backward(self, x: Array, grad_out: Array) -> Array:
        """Accumulate parameter gradients for the batch and return dL/dx."""
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ShapeError(
                f"gradient shape {grad_out.shape} does not match output "
                f"({x.shape[0]}, {self.out_dim})"
            )
        self.grad_weight += grad_out.T @ x
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def zero_grad(self) -> None:
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def parameters(self, prefix: str, group: str = "head") -> list[Param]:
        return [
            Param(f"{prefix}.weight", self.weight, self.grad_weight, True, group),
            Param(f"{prefix}.bias", self.bias, self.grad_bias, False, group),
        ]


class PReLULayer:
    """Per-channel parametric rectifier: x where x >= 0, slope * x below."""

    def __init__(self, channels: int, init_slope: float = PRELU_INIT_SLOPE):
        self.channels = channels
        self.slope = np.full(channels, float(init_slope))
        self.grad_slope = np.zeros_like(self.slope)

    def forward(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != self.channels:
            raise ShapeError(
                f"prelu expects (batch, {self.channels}) input, got {x.shape}"
            )
        return np.where(x >= 0.0, x, x * self.slope)

    def backward(self, x: Array, grad_out: Array) -> Array:
        if grad_out.shape != x.shape:
            raise ShapeError(
                f"gradient shape {grad_out.shape} does not match input {x.shape}"
            )
        negative = x < 0.0
        self.grad_slope += np.where(negative, grad_out * x, 0.0).sum(axis=0)
        return np.where(negative, grad_out * self.slope, grad_out)

    def zero_grad(self) -> None:
        self.grad_slope[...] = 0.0

    def parameters(self, prefix: str, group: str = "head") -> list[Param]:
        return [Param(f"{prefix}.slope", self.slope, self.grad_slope, False, group)]


@dataclass
class MaskedDistribution:
    """Probabilities normalized over the masked-in categories only.

    probs[k] is exactly 0 wherever mask[k] is False, and the masked-in
    entries sum to 1.
    """

    probs: Array
    mask: Array


def masked_softmax_rows(logits: Array, mask: Array) -> Array:
    """Row-wise softmax over masked-in columns; masked-out columns get 0.

    ``logits`` is (batch, K) or (K,), ``mask`` a boolean (K,). The usual
    max-shift for stability uses the max over masked-in entries only.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MaskError("mask admits no category")
    if logits.shape[-1] != mask.shape[0]:
        raise ShapeError(
            f"logits with {logits.shape[-1]} categories do not match mask of "
            f"length {mask.shape[0]}"
        )
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    return probs / probs.sum(axis=-1, keepdims=True)


def masked_softmax(logits: Array, mask: Array) -> MaskedDistribution:
    """Softmax of a logit vector normalized over the masked-in entries."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError(f"expected a logit vector, got shape {logits.shape}")
    mask = np.asarray(mask, dtype=bool)
    return MaskedDistribution(masked_softmax_rows(logits, mask), mask)


def cross_entropy(dist: MaskedDistribution, target: int) -> float:
    """Negative log probability of ``target`` under a masked distribution."""
    if target < 0 or target >= dist.probs.shape[0]:
        raise TargetError(
            f"target {target} out of range for {dist.probs.shape[0]} categories"
        )
    if not dist.mask[target]:
        raise TargetError(f"target {target} is masked out")
    return float(-np.log(dist.probs[target]))


def cross_entropy_logit_grad(dist: MaskedDistribution, target: int) -> Array:
    """Gradient of cross_entropy w.r.t. the logits: probs - one_hot(target).

    Exactly zero outside the mask, since masked-out probabilities are zero
    and the target is always masked in.
    """
    if not dist.mask[target]:
        raise TargetError(f"target {target} is masked out")
    grad = dist.probs.copy()
    grad[target] -= 1.0
    return grad


def masked_nll_rows(logits: Array, mask: Array, targets: Array) -> tuple[Array, Array]:
    """Per-row masked cross-entropy and its logit gradients, in one pass.

    Uses the log-sum-exp form so losses stay finite for extreme logits.
    Returns (losses (batch,), grads (batch, K)). Raises TargetError when a
    target falls outside the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MaskError("mask admits no category")
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= mask.shape[0]):
        raise TargetError(
            f"target out of range for {mask.shape[0]} categories"
        )
    if not mask[targets].all():
        bad = targets[~mask[targets]][0]
        raise TargetError(f"target {int(bad)} is masked out")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=-1, keepdims=True)
    rows = np.arange(logits.shape[0])
    losses = np.log(total[:, 0]) - shifted[rows, targets]
    grads = exp / total
    grads[rows, targets] -= 1.0
    return losses, grads


@dataclass
class CoordinateError:
    """One gradient-check discrepancy above tolerance."""

    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckResult:
    """Outcome of grad_check over one parameter tensor."""

    name: str
    checked: int
    max_rel_err: float
    tol: float
    failures: list[CoordinateError] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    f,
    param: Array,
    tol: float = 1e-6,
    eps: float = 1e-6,
    max_coords: int = 200,
    seed: int = 0,
    name: str = "param",
    scale_floor: float = 1e-2,
) -> GradCheckResult:
    """Compare an analytic gradient against central finite differences.

    ``f()`` must evaluate the scalar loss at the current contents of
    ``param`` and return ``(loss, grad)`` where ``grad`` has param's shape.
    ``param`` is perturbed in place coordinate by coordinate and restored.
    At most ``max_coords`` coordinates are sampled (all of them when the
    tensor has that many entries or fewer).

    The relative error divides by max(|analytic|, |numeric|, scale_floor):
    below the floor, central differences at this eps cannot resolve a
    relative comparison, so near-zero coordinates are held to the absolute
    criterion tol * scale_floor instead.
    """
    _, grad = f()
    grad = np.array(grad, dtype=np.float64, copy=True)
    if grad.shape != param.shape:
        raise ShapeError(
            f"analytic gradient shape {grad.shape} does not match parameter "
            f"shape {param.shape}"
        )
    size = param.size
    if size <= max_coords:
        coords = np.arange(size)
    else:
        coords = np.sort(
            np.random.default_rng(seed).choice(size, size=max_coords, replace=False)
        )
    flat = param.reshape(-1)
    grad_flat = grad.reshape(-1)
    failures: list[CoordinateError] = []
    max_rel = 0.0
    for c in coords:
        original = flat[c]
        flat[c] = original + eps
        plus, _ = f()
        flat[c] = original - eps
        minus, _ = f()
        flat[c] = original
        numeric = (plus - minus) / (2.0 * eps)
        analytic = grad_flat[c]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), scale_floor)
        if rel > max_rel:
            max_rel = rel
        if rel > tol:
            failures.append(CoordinateError(int(c), float(analytic), float(numeric), rel))
    return GradCheckResult(name, len(coords), max_rel, tol, failures)
