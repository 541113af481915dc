"""Sparsely routed mixture-of-experts classification head.

A linear router scores each 512-dim representation; scores normalize to
routing probabilities (softmax by default, elementwise sigmoid as the
alternative); each sample is dispatched to exactly the argmax expert, ties
to the lowest index. Optionally a fixed always-on expert adds residual
logits, and a balancing term penalizes load concentration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmoe import nn, ops
from cmoe.backbone import MIN_INPUT, REPR_DIM, Backbone
from cmoe.errors import CmoeError
from cmoe.tensor import Tensor, gather_rows, mean, mul, relu, scatter_rows, sigmoid, softmax, sum_

EXPERT_HIDDEN = 128
NORM_FUNCS = ("softmax", "sigmoid")


class ExpertLayer(nn.Module):
    """512 -> 128 -> BN -> ReLU -> num_class; parameters private per expert.

    in_dim/hidden are parametric so composite gradient checks can run the
    identical structure at small width; production defaults stay 512/128.
    """

    def __init__(self, num_class: int, rng: np.random.Generator,
                 in_dim: int = REPR_DIM, hidden: int = EXPERT_HIDDEN):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, rng)
        self.bn = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, num_class, rng)

    def forward(self, r: Tensor) -> Tensor:
        return self.fc2(relu(self.bn(self.fc1(r))))


@dataclass
class RoutingDecision:
    scores: Tensor
    probs: Tensor
    chosen: np.ndarray  # int64 expert index per sample


@dataclass
class BalanceStats:
    counts: np.ndarray
    ef: np.ndarray  # hard dispatch fractions, constants
    ep: np.ndarray  # mean routing probabilities (snapshot of the tensor)
    alpha: float
    m: int
    n: int


class CmoeHead(nn.Module):
    def __init__(
        self,
        num_class: int,
        num_experts: int,
        rng: np.random.Generator,
        norm_func: str = "softmax",
        residual: bool = False,
        balance: bool = True,
        alpha: float = 1e-2,
        in_dim: int = REPR_DIM,
        hidden: int = EXPERT_HIDDEN,
    ):
        super().__init__()
        if num_experts < 1:
            raise CmoeError(f"need at least one expert, got {num_experts}")
        if norm_func not in NORM_FUNCS:
            raise CmoeError(f"unknown norm_func {norm_func!r}; choose from {NORM_FUNCS}")
        if alpha < 0:
            raise CmoeError(f"balance coefficient must be nonnegative, got {alpha}")
        self.num_class = num_class
        self.num_experts = num_experts
        self.norm_func = norm_func
        self.balance = balance
        self.alpha = alpha
        self.router = nn.Linear(in_dim, num_experts, rng)
        self.experts = nn.ModuleList(
            ExpertLayer(num_class, rng, in_dim, hidden) for _ in range(num_experts)
        )
        self.residual_expert = ExpertLayer(num_class, rng, in_dim, hidden) if residual else None

    def route(self, r: Tensor) -> RoutingDecision:
        scores = self.router(r)
        if self.norm_func == "softmax":
            probs = softmax(scores, axis=-1)
        else:
            probs = sigmoid(scores)
        chosen = np.argmax(probs.data, axis=1)  # np.argmax takes the first maximum
        return RoutingDecision(scores=scores, probs=probs, chosen=chosen)

    def dispatch(self, r: Tensor, decision: RoutingDecision) -> Tensor:
        """Row i of the result = experts[chosen[i]](r[i]).

        Each expert runs once on its gathered sub-batch (its batch norm sees
        only those rows); scattered outputs are summed, so every row touches
        exactly one expert's parameters.
        """
        n = r.shape[0]
        chosen = decision.chosen
        if chosen.size and (chosen.min() < 0 or chosen.max() >= self.num_experts):
            raise CmoeError("routing decision references a nonexistent expert")
        logits = None
        for j in range(self.num_experts):
            idx = np.nonzero(chosen == j)[0]
            if idx.size == 0:
                continue
            part = scatter_rows(self.experts[j](gather_rows(r, idx)), idx, n)
            logits = part if logits is None else logits + part
        if logits is None:
            raise CmoeError("dispatch called with an empty batch")
        return logits

    def forward(self, r: Tensor, frozen_chosen: np.ndarray | None = None):
        """Returns (logits, decision). frozen_chosen overrides the argmax
        dispatch (finite-difference checks must hold routing fixed while the
        router's probabilities stay differentiable)."""
        decision = self.route(r)
        if frozen_chosen is not None:
            decision = RoutingDecision(decision.scores, decision.probs, frozen_chosen)
        logits = self.dispatch(r, decision)
        if self.residual_expert is not None:
            logits = logits + self.residual_expert(r)
        return logits, decision

    def balance_stats(self, decision: RoutingDecision) -> BalanceStats:
        n = decision.chosen.shape[0]
        counts = np.bincount(decision.chosen, minlength=self.num_experts)
        return BalanceStats(
            counts=counts,
            ef=counts / n,
            ep=decision.probs.data.mean(axis=0),
            alpha=self.alpha,
            m=self.num_experts,
            n=n,
        )


def balance_loss(probs: Tensor, chosen: np.ndarray, alpha: float, num_experts: int) -> Tensor:
    """alpha * m * sum_j ef_j * ep_j.

    ef_j (hard dispatch fraction) enters as a constant; the gradient reaches
    the router only through ep_j, the mean routing probability.
    """
    n = probs.shape[0]
    if n == 0:
        raise CmoeError("balance loss undefined for an empty batch")
    ef = (np.bincount(chosen, minlength=num_experts) / n).astype(probs.dtype)
    ep = mean(probs, axis=0)
    return mul(sum_(mul(ep, ef)), alpha * num_experts)


def total_loss(logits: Tensor, labels: np.ndarray, balance: Tensor | None = None) -> Tensor:
    ce = ops.cross_entropy(logits, labels)
    return ce if balance is None else ce + balance


class CmoeModel(nn.Module):
    """Backbone plus head; the trainable unit the trainer and CLI handle."""

    def __init__(
        self,
        num_class: int,
        num_experts: int,
        rng: np.random.Generator,
        norm_func: str = "softmax",
        residual: bool = False,
        balance: bool = True,
        alpha: float = 1e-2,
        attn_heads: int = 4,
    ):
        super().__init__()
        self.backbone = Backbone(rng, attn_heads=attn_heads)
        self.head = CmoeHead(
            num_class,
            num_experts,
            rng,
            norm_func=norm_func,
            residual=residual,
            balance=balance,
            alpha=alpha,
        )

    def forward(self, x: Tensor, min_size: int | None = MIN_INPUT):
        r = self.backbone(x, min_size=min_size)
        return self.head(r)

    def loss(self, logits: Tensor, labels: np.ndarray, decision: RoutingDecision) -> tuple:
        """(total, ce_value, balance_value) for one batch."""
        ce = ops.cross_entropy(logits, labels)
        if self.head.balance and self.head.alpha > 0:
            bal = balance_loss(
                decision.probs, decision.chosen, self.head.alpha, self.head.num_experts
            )
            return ce + bal, float(ce.data), float(bal.data)
        return ce, float(ce.data), 0.0
