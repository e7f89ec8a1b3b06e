"""Pairwise hinge ranking loss and its all-pairs mini-batch gradient.

Convention: ``labels[i, j] = +1`` means sample ``i`` is of higher quality
than sample ``j``, ``-1`` the reverse, and ``0`` that the two cannot be
compared. A comparable pair costs

    g = max(0, l_ij * (s_j - s_i) + eps)

and, when the hinge is active, has derivative ``-l_ij`` with respect to
``s_i`` and ``+l_ij`` with respect to ``s_j``. Summing those per sample
gives the coefficient vector ``c`` that a single backward pass turns into
the gradient of the whole mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import Network, NetworkSpec, ParameterStore

DEFAULT_MARGIN = 1.0


class ConfigError(ValueError):
    pass


def _check_margin(eps: float) -> None:
    if not eps > 0:
        raise ConfigError(f"margin must be positive, got {eps}")


def hinge_pair_loss(y_hi: float, y_lo: float, eps: float = DEFAULT_MARGIN) -> float:
    """Hinge cost of one pair whose first member is known to be better."""
    _check_margin(eps)
    return max(0.0, y_lo - y_hi + eps)


def pair_active(y_i: float, y_j: float, l_ij: int, eps: float = DEFAULT_MARGIN) -> bool:
    # boundary (exactly zero) counts as inactive
    if l_ij == 0:
        return False
    return l_ij * (y_j - y_i) + eps > 0


@dataclass
class ComparabilityMatrix:
    """M x M labels in {-1, 0, 1} plus the hinge margin."""

    labels: np.ndarray
    eps: float = DEFAULT_MARGIN

    def __post_init__(self):
        _check_margin(self.eps)
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.shape[0] != lab.shape[1]:
            raise ValueError(f"labels must be square, got shape {lab.shape}")
        if not np.isin(lab, (-1, 0, 1)).all():
            raise ValueError("labels must be in {-1, 0, 1}")
        lab = lab.astype(np.int8)
        if np.any(np.diag(lab)) or not np.array_equal(lab, -lab.T):
            raise ValueError("labels must be antisymmetric with a zero diagonal")
        self.labels = lab

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def n_pairs(self) -> int:
        """Number of comparable unordered pairs."""
        return int(np.count_nonzero(np.triu(self.labels)))

    def pairs(self) -> list[tuple[int, int]]:
        """Comparable pairs (i, j), i < j, in row-major order."""
        ii, jj = np.nonzero(np.triu(self.labels))
        return list(zip(ii.tolist(), jj.tolist()))

    @classmethod
    def from_groups(cls, reference_ids, kinds, levels, eps: float = DEFAULT_MARGIN) -> "ComparabilityMatrix":
        """Samples are comparable iff they share reference and kind and differ in level.

        A lower level index is the better image.
        """
        ref = np.asarray(reference_ids, dtype=object)
        kind = np.asarray(kinds, dtype=object)
        lev = np.asarray(levels)
        same = (ref[:, None] == ref[None, :]) & (kind[:, None] == kind[None, :])
        lab = np.sign(lev[None, :] - lev[:, None]) * same
        return cls(lab.astype(np.int8), eps)

    @classmethod
    def full_order(cls, m: int, eps: float = DEFAULT_MARGIN) -> "ComparabilityMatrix":
        """One fully comparable group where sample 0 is best and m-1 worst."""
        return cls.from_groups([0] * m, ["k"] * m, np.arange(m), eps)


def _check_dims(scores, labels: ComparabilityMatrix) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.shape[0] != labels.size:
        raise ValueError(f"{s.shape[0]} scores for a {labels.size}x{labels.size} label matrix")
    return s


def _active_mask(s: np.ndarray, labels: ComparabilityMatrix) -> np.ndarray:
    lab = labels.labels
    margin = lab * (s[None, :] - s[:, None]) + labels.eps
    return (lab != 0) & (margin > 0)


def batch_loss(scores, labels: ComparabilityMatrix) -> float:
    """Sum of hinge costs over comparable pairs with j > i."""
    s = _check_dims(scores, labels)
    lab = labels.labels
    margin = lab * (s[None, :] - s[:, None]) + labels.eps
    upper = np.triu(lab != 0, k=1)
    return float(np.maximum(margin, 0.0)[upper].sum())


@dataclass
class PairCoefficients:
    """Per-sample output-gradient coefficients of the mini-batch loss.

    ``c[i]`` is d(batch_loss)/d(s_i). ``active`` marks the pairs whose
    hinge is open; ``labels`` is kept so the dense pair matrix can be
    produced on request.
    """

    c: np.ndarray
    active: np.ndarray
    labels: np.ndarray

    @property
    def P(self) -> np.ndarray:
        """Dense pair matrix whose row sums give ``c``.

        Entry (i, j) is the derivative of pair {i, j}'s cost with respect
        to ``s_i``: ``-l_ij`` when active, else 0.
        """
        return np.where(self.active, -self.labels, 0).astype(np.float64)


def output_gradient_coefficients(scores, labels: ComparabilityMatrix) -> PairCoefficients:
    s = _check_dims(scores, labels)
    active = _active_mask(s, labels)
    lab = labels.labels.astype(np.float64)
    # active is symmetric, so row i collects both (i, j) and (j, i) roles
    c = -(lab * active).sum(axis=1) + 0.0  # + 0.0 turns -0.0 into 0.0
    return PairCoefficients(c=c, active=active, labels=labels.labels)


class RankingObjective:
    """Callable ``scores -> (batch_loss, c)`` for a fixed label matrix."""

    def __init__(self, labels: ComparabilityMatrix):
        self.labels = labels

    def __call__(self, scores):
        return batch_loss(scores, self.labels), output_gradient_coefficients(scores, self.labels).c

    def active_set(self, scores) -> np.ndarray:
        return _active_mask(_check_dims(scores, self.labels), self.labels)


@dataclass
class GradientResult:
    grads: dict[str, np.ndarray]
    loss: float
    forward_count: int


def efficient_gradient(
    spec: NetworkSpec, params: ParameterStore, batch: np.ndarray, labels: ComparabilityMatrix
) -> GradientResult:
    """All-pairs gradient with one forward and one backward of the batch.

    ``params`` gradients are zeroed first and hold the result afterwards.
    """
    params.zero_grad()
    net = Network(spec, params)
    scores = net.forward(batch)
    coeffs = output_gradient_coefficients(scores, labels)
    net.backward(coeffs.c)
    return GradientResult(params.grad_copy(), batch_loss(scores, labels), net.forward_count)


def naive_pairwise_gradient(
    spec: NetworkSpec, params: ParameterStore, batch: np.ndarray, labels: ComparabilityMatrix
) -> GradientResult:
    """Reference Siamese gradient: two independent branch passes per pair.

    Every comparable pair is pushed through two weight-sharing branches,
    its hinge derivative computed from the two scores, and each branch
    backpropagated on its own. Cost is ``2 * labels.n_pairs`` forwards.
    """
    params.zero_grad()
    branch_a = Network(spec, params)
    branch_b = Network(spec, params)
    batch = np.asarray(batch)
    loss = 0.0
    for i, j in labels.pairs():
        l_ij = int(labels.labels[i, j])
        s_i = float(branch_a.forward(batch[i:i + 1])[0])
        s_j = float(branch_b.forward(batch[j:j + 1])[0])
        if l_ij > 0:
            loss += hinge_pair_loss(s_i, s_j, labels.eps)
        else:
            loss += hinge_pair_loss(s_j, s_i, labels.eps)
        if pair_active(s_i, s_j, l_ij, labels.eps):
            branch_a.backward(np.array([-l_ij]))
            branch_b.backward(np.array([l_ij]))
    count = branch_a.forward_count + branch_b.forward_count
    return GradientResult(params.grad_copy(), loss, count)


def max_relative_difference(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    """``max|a - b| / max(|a|, |b|)`` over the whole parameter vector.

    Normalising per tensor would be ill-posed: with ``sum(c) == 0`` any
    parameter that shifts every score equally has an exactly zero
    gradient, which one path may return as roundoff.
    """
    diff = max((float(np.abs(a[n] - b[n]).max(initial=0.0)) for n in b), default=0.0)
    scale = max((float(max(np.abs(a[n]).max(initial=0.0), np.abs(b[n]).max(initial=0.0))) for n in b), default=0.0)
    return diff / scale if scale > 0 else diff
