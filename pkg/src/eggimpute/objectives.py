"""Loss terms and their weighted combination.

Imputation losses run over cells the surrogate mask removed (mask value
0); the homophily penalty runs over relaxed edge values between
differently-labelled batch rows, normalized by the squared node count so
its weight is batch-size independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossWeights:
    task: float = 1.0  # alpha
    imputation: float = 1.0  # beta
    homophily: float = 0.1  # gamma
    triplet: float = 0.0  # eta
    margin: float = 0.05

    def validate(self):
        if min(self.task, self.imputation, self.homophily, self.triplet) < 0:
            raise ValueError("loss weights must be nonnegative")


def numeric_imputation_loss(truth, pred: Tensor, numeric_mask) -> Tensor:
    """Mean squared error over surrogate-masked numeric cells."""
    weight = ((numeric_mask == 0) & np.isfinite(truth)).astype(np.float64)
    count = weight.sum()
    if count == 0:
        return Tensor(np.zeros((1, 1)))
    diff = pred - Tensor(np.nan_to_num(truth))
    return T.scale(T.reduce_sum(T.mul(T.mul(diff, diff), Tensor(weight))), 1.0 / count)


def _masked_cross_entropy(logits: Tensor, targets, weight):
    """Sum of -log softmax(logits)[target] over rows with weight 1."""
    n, c = logits.shape
    onehot = np.zeros((n, c))
    active = weight > 0
    onehot[np.arange(n)[active], targets[active]] = 1.0
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # constant, for stability
    z = logits - shift
    log_norm = T.log(T.reduce_sum(T.exp(z), axis=1))
    log_probs = z - log_norm
    picked = T.reduce_sum(T.mul(log_probs, Tensor(onehot * weight[:, None])))
    return T.scale(picked, -1.0)


def categorical_imputation_loss(truth_cat, cat_logits, cat_mask) -> Tensor:
    """Mean cross-entropy over surrogate-masked categorical cells."""
    total = None
    count = 0
    for col, logits in enumerate(cat_logits):
        targets = truth_cat[:, col]
        weight = ((cat_mask[:, col] == 0) & (targets >= 0)).astype(np.float64)
        count += weight.sum()
        term = _masked_cross_entropy(logits, targets, weight)
        total = term if total is None else total + term
    if total is None or count == 0:
        return Tensor(np.zeros((1, 1)))
    return T.scale(total, 1.0 / count)


def task_loss(task_logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over all batch rows."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= task_logits.shape[1]:
        raise ValueError("label out of range for task head")
    weight = np.ones(len(labels))
    return T.scale(_masked_cross_entropy(task_logits, labels, weight), 1.0 / len(labels))


def homophily_loss(samples, labels) -> Tensor:
    """Penalize relaxed edges between rows of different classes.

    Prototype rows (beyond the labelled batch rows) carry no penalty.
    Summed over blocks; each block normalized by its node count squared.
    """
    labels = np.asarray(labels)
    n = len(labels)
    total = None
    for sample in samples:
        m = sample.relaxed.shape[0]
        interclass = np.zeros((m, m))
        interclass[:n, :n] = (labels[:, None] != labels[None, :]).astype(np.float64)
        term = T.scale(T.reduce_sum(T.mul(sample.relaxed, Tensor(interclass))), 1.0 / (m * m))
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.zeros((1, 1)))


def triplet_regularizer(h_graph: Tensor, labels, margin, rng, n_triplets=None) -> Tensor:
    """Hinge loss over sampled (anchor, positive, negative) triplets.

    Negatives are drawn with probability proportional to clamped inverse
    distance to the anchor (distance-weighted sampling).
    """
    labels = np.asarray(labels)
    n = len(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        return Tensor(np.zeros((1, 1)))
    if n_triplets is None:
        n_triplets = n
    dist = T.pairwise_sq_dist(h_graph)
    anchors, positives, negatives = [], [], []
    for _ in range(n_triplets):
        a = int(rng.integers(n))
        same = np.flatnonzero((labels == labels[a]) & (np.arange(n) != a))
        other = np.flatnonzero(labels != labels[a])
        if same.size == 0 or other.size == 0:
            continue
        pos = int(rng.choice(same))
        w = 1.0 / np.clip(np.sqrt(dist.data[a, other]), 0.1, 10.0)
        neg = int(rng.choice(other, p=w / w.sum()))
        anchors.append(a)
        positives.append(pos)
        negatives.append(neg)
    if not anchors:
        return Tensor(np.zeros((1, 1)))
    total = None
    m = h_graph.shape[0]
    # the hinge applies per triplet, so build one selector per triplet
    terms = []
    for a, p, ng in zip(anchors, positives, negatives):
        sel_p = np.zeros((m, m))
        sel_p[a, p] = 1.0
        sel_n = np.zeros((m, m))
        sel_n[a, ng] = 1.0
        d_pos = T.reduce_sum(T.mul(dist, Tensor(sel_p)))
        d_neg = T.reduce_sum(T.mul(dist, Tensor(sel_n)))
        terms.append(T.relu(T.add_scalar(d_pos - d_neg, margin)))
        total = terms[-1] if total is None else total + terms[-1]
    return T.scale(total, 1.0 / len(terms))


@dataclass
class LossParts:
    task: Tensor
    numeric: Tensor
    categorical: Tensor
    homophily: Tensor
    triplet: Tensor

    def named(self):
        return {"task": self.task, "numeric": self.numeric, "categorical": self.categorical,
                "homophily": self.homophily, "triplet": self.triplet}


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    weights.validate()
    for name, term in parts.named().items():
        if not np.isfinite(term.data).all():
            raise FloatingPointError(f"non-finite loss term {name!r}")
    total = T.scale(parts.task, weights.task) + \
        T.scale(parts.numeric + parts.categorical, weights.imputation) + \
        T.scale(parts.homophily, weights.homophily)
    if weights.triplet > 0:
        total = total + T.scale(parts.triplet, weights.triplet)
    return total


def compute_losses(batch, out, weights: LossWeights, rng=None) -> LossParts:
    """All loss parts for one forward output."""
    num_mask = batch.surrogate_mask[:, batch.numeric_cols]
    numeric = numeric_imputation_loss(batch.truth_numeric, out.numeric_pred, num_mask) \
        if batch.truth_numeric.shape[1] else Tensor(np.zeros((1, 1)))
    cat_mask = batch.surrogate_mask[:, batch.categorical_cols]
    categorical = categorical_imputation_loss(batch.truth_categorical, out.cat_logits, cat_mask) \
        if out.cat_logits else Tensor(np.zeros((1, 1)))
    task = task_loss(out.task_logits, batch.labels)
    homophily = homophily_loss(out.samples, batch.labels)
    if weights.triplet > 0 and out.projections:
        trip_rng = rng if rng is not None else np.random.default_rng(0)
        n = len(batch.labels)
        triplet = triplet_regularizer(T.slice_rows(out.projections[0], 0, n),
                                      batch.labels, weights.margin, trip_rng)
    else:
        triplet = Tensor(np.zeros((1, 1)))
    return LossParts(task, numeric, categorical, homophily, triplet)
