"""Differentiable fuzzy connectives and quantifiers over truth tensors.

Connectives follow the product configuration (product t-norm, probabilistic
sum) with a Goguen implication; universal quantification and the overall
satisfaction aggregate use the p-mean error.  Inputs are clamped to
``[EPS, 1 - EPS]`` by :func:`as_truth` so that divisions and fractional powers
never see an exact 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

EPS = 1e-7
_RANGE_SLACK = 1e-9


@dataclass(frozen=True)
class AggregatorConfig:
    p_forall_equiv: float = 2.0
    p_forall_incl: float = 4.0
    p_satagg: float = 2.0

    def __post_init__(self):
        for name in ("p_forall_equiv", "p_forall_incl", "p_satagg"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


def as_truth(x) -> Tensor:
    """Validate that ``x`` holds truth values and clamp it into ``[EPS, 1 - EPS]``."""
    t = dc.as_tensor(x)
    d = t.data
    if not np.all(np.isfinite(d)) or d.min(initial=0.0) < -_RANGE_SLACK or d.max(initial=1.0) > 1 + _RANGE_SLACK:
        raise ValueError("truth values must be finite and lie in [0, 1]")
    return dc.clamp(t, EPS, 1.0 - EPS)


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def not_std(a) -> Tensor:
    return dc.sub(1.0, as_truth(a))


def and_prod(a, b) -> Tensor:
    a, b = as_truth(a), as_truth(b)
    _same_shape(a, b, "and_prod")
    return dc.mul(a, b)


def or_probsum(a, b) -> Tensor:
    a, b = as_truth(a), as_truth(b)
    _same_shape(a, b, "or_probsum")
    return dc.sub(dc.add(a, b), dc.mul(a, b))


def lukasiewicz(a, b, kind: str = "and") -> Tensor:
    """Lukasiewicz t-norm ``max(0, a + b - 1)`` or t-conorm ``min(1, a + b)``."""
    a, b = as_truth(a), as_truth(b)
    _same_shape(a, b, "lukasiewicz")
    if kind == "and":
        return dc.max_const(dc.sub(dc.add(a, b), 1.0), 0.0)
    if kind == "or":
        return dc.clamp(dc.add(a, b), hi=1.0)
    raise ValueError(f"kind must be 'and' or 'or', got {kind!r}")


def implies_goguen(a, b) -> Tensor:
    """Goguen implication: 1 where ``a <= b``, else ``b / a``.

    At ``a == b`` the constant branch is taken, so the gradient there is 0.
    """
    a, b = as_truth(a), as_truth(b)
    _same_shape(a, b, "implies_goguen")
    ratio = dc.div(b, dc.max_const(a, EPS))
    ones = Tensor(np.ones(a.shape))
    return dc.where(a.data <= b.data, ones, ratio)


def implies_reichenbach(a, b) -> Tensor:
    """``1 - a + a * b``; kept for comparison runs only."""
    a, b = as_truth(a), as_truth(b)
    _same_shape(a, b, "implies_reichenbach")
    return dc.add(dc.sub(1.0, a), dc.mul(a, b))


def forall_pme(a, p: float) -> Tensor:
    """p-mean error aggregator ``1 - mean((1 - a)^p)^(1/p)``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    a = as_truth(a)
    if a.size == 0:
        raise ValueError("forall over an empty domain")
    if a.data.ndim != 1:
        a = dc.reshape(a, (a.size,))
    err = dc.pow_const(dc.sub(1.0, a), p)
    return dc.sub(1.0, dc.pow_const(dc.mean_all(err), 1.0 / p))


def sat_agg(formula_truths: Sequence, p: float = 2.0) -> Tensor:
    """Aggregate scalar formula truths into one satisfaction level."""
    if len(formula_truths) == 0:
        raise ValueError("sat_agg needs at least one formula")
    return forall_pme(dc.stack_scalars([dc.as_tensor(t) for t in formula_truths]), p)
