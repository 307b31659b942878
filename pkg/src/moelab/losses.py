"""Auxiliary router losses and the combined training objective.

The objective is cross-entropy plus two router regularizers: a load-balance
term that pushes dispatch counts and gate mass toward uniformity across
experts, and a z-loss that keeps router logits from drifting to large
magnitudes. Both are means over tokens, and a multi-layer model averages
them over its MoE layers so the loss weights do not depend on depth.

Every function here accepts either plain float64 arrays (for analysis of
recorded routing data) or Tensors (for training). The two paths evaluate
the same expressions in the same order, so they agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

GAMMA_DEFAULT = 0.01   # weight of the load-balance term
ETA_DEFAULT = 0.001    # weight of the router z term

_GATE_SUM_TOL = 1e-12


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class RouterBatchStats:
    """Routing record for one MoE layer over a batch of tokens.

    Columns span whatever set the router scored: just the routed experts by
    default, or every expert when the router scores shared ones too. gates
    and logits may be Tensors, in which case the losses below stay
    differentiable through them; dispatch is always a fixed boolean matrix
    because selection is not differentiable.
    """

    dispatch: np.ndarray   # (T, n_scored) bool, True where the token reached the expert
    gates: object          # (T, n_scored) softmax probabilities, Tensor or ndarray
    logits: object         # (T, n_scored) raw router scores, Tensor or ndarray

    def __post_init__(self):
        d = np.asarray(self.dispatch)
        if d.ndim != 2 or d.dtype != np.bool_:
            raise ValueError(f"dispatch must be 2-D bool, got {d.dtype} {d.shape}")
        if d.shape[0] < 1:
            raise ValueError("routing stats need at least one token")
        g, l = _array(self.gates), _array(self.logits)
        if g.shape != d.shape or l.shape != d.shape:
            raise ValueError(
                f"shape mismatch: dispatch {d.shape}, gates {g.shape}, logits {l.shape}"
            )
        counts = d.sum(axis=1)
        if counts.min() < 1 or counts.min() != counts.max():
            raise ValueError("each token must dispatch to the same positive expert count")
        err = np.abs(g.sum(axis=1) - 1.0).max()
        if err > _GATE_SUM_TOL:
            raise ValueError(f"gate rows must sum to 1, worst error {err:.3e}")
        self.dispatch = d

    @classmethod
    def from_routing(cls, outcome):
        """Build stats from one MoELayer routing outcome, keeping the graph."""
        return cls(outcome.dispatch_matrix(), outcome.gates, outcome.logits)

    @property
    def t_tokens(self):
        return self.dispatch.shape[0]

    @property
    def n_scored(self):
        return self.dispatch.shape[1]


def load_balance_loss(stats):
    """n_scored * sum_i m_i * P_i, minimized by perfectly uniform routing.

    m_i is the fraction of tokens dispatched to expert i and P_i the mean
    gate probability of expert i. Uniform dispatch and gates give exactly
    the per-token selection count; full collapse gives exactly n_scored.
    Gradients flow through P_i only; the dispatch indicators are fixed.
    """
    m = stats.dispatch.mean(axis=0)
    scale = float(stats.n_scored)
    if isinstance(stats.gates, Tensor):
        p = T.tmean(stats.gates, axis=0)
        return T.mul(T.tsum(T.mul(p, m)), scale)
    gates = np.asarray(stats.gates)
    p = gates.sum(axis=0) * (1.0 / stats.t_tokens)
    return float(np.sum(p * m) * scale)


def router_z_loss(stats):
    """Mean over tokens of the squared log-sum-exp of the router logits."""
    if isinstance(stats.logits, Tensor):
        lse = T.logsumexp(stats.logits, axis=-1)
        return T.tmean(T.mul(lse, lse))
    x = np.asarray(stats.logits)
    mx = x.max(axis=-1, keepdims=True)
    s = np.exp(x - mx).sum(axis=-1, keepdims=True)
    lse = np.squeeze(mx + np.log(s), axis=-1)
    return float(np.sum(lse * lse) * (1.0 / x.shape[0]))


def total_loss(ce, lb, rz, gamma=GAMMA_DEFAULT, eta=ETA_DEFAULT):
    """ce + gamma*lb + eta*rz, evaluated as (ce + gamma*lb) + eta*rz."""
    if any(isinstance(v, Tensor) for v in (ce, lb, rz)):
        return T.add(T.add(ce, T.mul(lb, gamma)), T.mul(rz, eta))
    return ce + gamma * lb + eta * rz


def layer_mean(values):
    """Arithmetic mean of per-layer scalar losses, in layer order."""
    values = list(values)
    if not values:
        raise ValueError("layer_mean needs at least one value")
    if any(isinstance(v, Tensor) for v in values):
        acc = values[0]
        for v in values[1:]:
            acc = T.add(acc, v)
        return T.mul(acc, 1.0 / len(values))
    acc = values[0]
    for v in values[1:]:
        acc = acc + v
    return acc * (1.0 / len(values))
