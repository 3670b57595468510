"""Two-parameter logistic measurement model and normal-prior quadrature.

The latent trait is standardized within each group, so every likelihood here
integrates against a standard normal density.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit, logsumexp

from .errors import EmptyData, TooFewNodes, ValidationError

PROB_FLOOR = 1e-12
MIN_NODES = 21
DEFAULT_NODES = 61


@dataclass(frozen=True)
class ItemParams:
    """Slope ``a`` (logits per SD of the trait) and intercept ``b`` of one item."""

    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValidationError(f"item parameters must be finite, got a={self.a}, b={self.b}")
        if self.a <= 0:
            raise ValidationError(f"slope must be positive, got a={self.a}")


@dataclass(frozen=True)
class GroupModel:
    items: tuple
    group: int = 0

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if len(self.items) < 2:
            raise ValidationError("a group model needs at least two items")
        if self.group not in (0, 1):
            raise ValidationError(f"group label must be 0 or 1, got {self.group!r}")

    @classmethod
    def from_arrays(cls, slopes, intercepts, group=0):
        return cls(tuple(ItemParams(float(a), float(b)) for a, b in zip(slopes, intercepts)), group)

    @property
    def m(self):
        return len(self.items)

    @property
    def slopes(self):
        return np.array([it.a for it in self.items])

    @property
    def intercepts(self):
        return np.array([it.b for it in self.items])


@dataclass(frozen=True)
class QuadratureGrid:
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValidationError("nodes and weights must be 1-d arrays of equal length")
        if np.any(np.diff(nodes) <= 0):
            raise ValidationError("quadrature nodes must be strictly increasing")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError("quadrature weights must be positive and sum to 1")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self):
        return self.nodes.size


def make_grid(n_nodes=DEFAULT_NODES):
    """Gauss-Hermite rule for the standard normal density, weights normalized to 1."""
    if int(n_nodes) != n_nodes or n_nodes < MIN_NODES:
        raise TooFewNodes(f"need at least {MIN_NODES} quadrature nodes, got {n_nodes}")
    nodes, weights = hermegauss(int(n_nodes))
    weights = weights / weights.sum()
    return QuadratureGrid(nodes, weights)


def response_prob(item, theta):
    """Probability of endorsing ``item`` at trait value ``theta``."""
    return expit(item.a * np.asarray(theta, dtype=float) + item.b)


def item_probs(slopes, intercepts, nodes):
    """Clamped ``(m, Q)`` matrix of endorsement probabilities at each node."""
    p = expit(np.outer(slopes, nodes) + np.asarray(intercepts)[:, None])
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def split_responses(responses):
    """Return ``(ones, observed)`` float matrices from a response array with NaN for missing."""
    x = np.asarray(responses, dtype=float)
    if x.ndim != 2:
        raise ValidationError("responses must be a persons x items matrix")
    observed = ~np.isnan(x)
    ones = np.where(observed, x, 0.0)
    if np.any((ones != 0) & (ones != 1)):
        raise ValidationError("observed responses must be 0 or 1")
    return ones, observed.astype(float)


def node_loglik(slopes, intercepts, ones, observed, nodes):
    """``(n, Q)`` matrix of per-person log-likelihoods conditional on each node."""
    p = item_probs(slopes, intercepts, nodes)
    return ones @ np.log(p) + (observed - ones) @ np.log1p(-p)


def person_loglik(slopes, intercepts, ones, observed, grid):
    joint = node_loglik(slopes, intercepts, ones, observed, grid.nodes) + np.log(grid.weights)
    return logsumexp(joint, axis=1)


def marginal_loglik(model, responses, grid):
    """Marginal log-likelihood of ``responses`` under ``model``.

    ``responses`` is a persons x items array; ``NaN`` marks a missing entry,
    which is left out of that person's likelihood.
    """
    ones, observed = split_responses(responses)
    if ones.shape[1] != model.m:
        raise ValidationError(f"responses have {ones.shape[1]} columns, model has {model.m} items")
    if ones.shape[0] == 0 or observed.sum() == 0:
        raise EmptyData("no observed responses")
    return float(person_loglik(model.slopes, model.intercepts, ones, observed, grid).sum())
