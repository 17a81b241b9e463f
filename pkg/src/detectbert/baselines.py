"""Aggregation baselines: one vector per bag, then a fully connected head.

Three ways to compress a bag into a single embedding: pick one instance at
random, sum the instances elementwise, or average them.  Each feeds the
same d -> 1 linear head, and the baselines share the training loop, loss,
optimizer and metrics with the attention model so comparisons differ only
in the aggregation step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .model import Bag, PROJECTION_STD
from .numerics import Tensor
from .seeding import derive_rng

BASELINE_KINDS = ("random_selection", "elementwise_addition", "elementwise_average")


@dataclass
class BaselineParams:
    kind: str
    head_weights: Tensor
    head_bias: Tensor
    eval_seed: int

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(
                f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}"
            )

    @property
    def d(self) -> int:
        return self.head_weights.rows

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("head_weights", self.head_weights), ("head_bias", self.head_bias)]

    def zero_grads(self):
        for _, p in self.named_parameters():
            p.zero_grad()


def init_baseline(kind: str, d: int, seed: int) -> BaselineParams:
    rng = derive_rng(seed, "init", "head_weights")
    return BaselineParams(
        kind=kind,
        head_weights=Tensor(PROJECTION_STD * rng.standard_normal((d, 1)), requires_grad=True),
        head_bias=Tensor(np.zeros((1, 1)), requires_grad=True),
        eval_seed=seed,
    )


def select_index(app_id: str, n: int, seed: int) -> int:
    """Uniform instance choice, a pure function of (app_id, seed)."""
    return int(derive_rng(seed, "baseline-select", app_id).integers(n))


def aggregate(bag: Bag, params: BaselineParams, epoch_seed: int) -> np.ndarray:
    """Compress the bag to a 1 x d vector according to ``params.kind``.

    Random selection is deterministic given (bag.app_id, epoch_seed);
    training callers mix the epoch index into the seed to redraw each
    epoch, evaluation passes the fixed ``eval_seed``.
    """
    if bag.size < 1:
        raise ValueError(f"aggregate: bag {bag.app_id!r} is empty")
    if params.kind == "random_selection":
        row = bag.embeddings[select_index(bag.app_id, bag.size, epoch_seed)]
        return row.reshape(1, -1).copy()
    if params.kind == "elementwise_addition":
        return bag.embeddings.sum(axis=0, keepdims=True)
    return bag.embeddings.mean(axis=0, keepdims=True)


def baseline_forward(bag: Bag, params: BaselineParams, epoch_seed: int) -> Tensor:
    """Logit of the aggregated bag under the linear head, as a 1x1 tensor."""
    if bag.dim != params.d:
        raise nm.ShapeError(f"baseline_forward: bag width {bag.dim} != head width {params.d}")
    agg = Tensor(aggregate(bag, params, epoch_seed))
    return nm.add(nm.matmul(agg, params.head_weights), params.head_bias)
