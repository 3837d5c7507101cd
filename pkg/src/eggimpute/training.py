"""Training loop: surrogate masking, RMSprop, temperature annealing and
validation-based early stopping.

One master seed derives every stream (batch order, surrogate masks,
Gumbel noise, parameter init), so identical configurations produce
bitwise-identical trajectories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import missingness, model, objectives


@dataclass
class TrainConfig:
    batch_size: int = 300
    learning_rate: float = 1e-4
    tau_start: float = 0.5
    tau_end: float = 0.01
    surrogate_rate: float = 0.2  # share of observed batch cells re-masked
    weights: objectives.LossWeights = field(default_factory=objectives.LossWeights)
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0

    def validate(self):
        if not self.tau_start > self.tau_end > 0:
            raise ValueError("need tau_start > tau_end > 0")
        if not 0 <= self.surrogate_rate < 1:
            raise ValueError("surrogate_rate must be in [0, 1)")
        self.weights.validate()
        self.model.validate()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        weights = objectives.LossWeights(**raw.pop("weights", {}))
        mcfg = model.ModelConfig(**raw.pop("model", {}))
        return cls(weights=weights, model=mcfg, **raw)


class RmsPropState:
    """Per-parameter squared-gradient accumulators."""

    def __init__(self, params, rho=0.99, eps=1e-8):
        self.rho = rho
        self.eps = eps
        self.acc = {name: np.zeros_like(p.data) for name, p in params.items()}


def rmsprop_step(params, state: RmsPropState, lr):
    """s <- rho s + (1 - rho) g^2;  theta <- theta - lr g / (sqrt(s) + eps)."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        s = state.acc[name]
        s *= state.rho
        s += (1 - state.rho) * g * g
        p.data -= lr * g / (np.sqrt(s) + state.eps)


def temperature(step, total_steps, tau_start, tau_end):
    """Linear anneal from tau_start to tau_end, clamped afterwards."""
    if total_steps <= 0 or step >= total_steps:
        return tau_end
    frac = step / total_steps
    return tau_start + (tau_end - tau_start) * frac


@dataclass
class TrainedModel:
    params: model.ParameterSet
    config: TrainConfig
    best_val_loss: float
    best_epoch: int
    history: list  # per-epoch dicts


def _epoch_batches(n_rows, batch_size, rng):
    order = rng.permutation(n_rows)
    return [order[i:i + batch_size] for i in range(0, n_rows, batch_size)]


def _batch_loss(ds, rows, initial_mask, surr, params, tau, mode, rng, weights, trip_rng=None):
    batch = missingness.preprocess_batch(ds, rows, initial_mask, surr,
                                         params.embeddings, params.config.embed_width)
    out = model.forward(batch, params, tau, mode, rng)
    parts = objectives.compute_losses(batch, out, weights, trip_rng)
    return batch, out, parts


def validation_loss(ds, initial_mask, val_surrogate, params, config, rng):
    """Total loss over the validation set under a fixed surrogate mask."""
    losses, counts = [], []
    for start in range(0, ds.n_rows, config.batch_size):
        rows = np.arange(start, min(start + config.batch_size, ds.n_rows))
        _, _, parts = _batch_loss(ds, rows, initial_mask, val_surrogate[rows], params,
                                  config.tau_end, "eval", rng, config.weights)
        losses.append(objectives.total_loss(parts, config.weights).item())
        counts.append(len(rows))
    return float(np.average(losses, weights=counts))


def train(config: TrainConfig, train_ds, val_ds, train_mask, val_mask, log=None) -> TrainedModel:
    """Optimize on ``train_ds``; early-stop on validation loss.

    ``train_mask`` / ``val_mask`` are the dataset-level corruption masks
    (1 = observed).  Datasets must already be normalized with training
    statistics.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    init_seed, order_seed, surr_seed, gumbel_seed, val_seed, trip_seed = root.spawn(6)
    params = model.ParameterSet(config.model, train_ds.schema, train_ds.num_classes,
                                seed=init_seed)
    order_rng = np.random.default_rng(order_seed)
    surr_rng = np.random.default_rng(surr_seed)
    gumbel_rng = np.random.default_rng(gumbel_seed)
    trip_rng = np.random.default_rng(trip_seed)
    val_rng_seed = val_seed  # fixed surrogate + per-epoch eval streams
    val_surrogate = missingness.surrogate_mask(val_mask, config.surrogate_rate,
                                              np.random.default_rng(val_rng_seed))
    opt = RmsPropState(params.named_parameters())

    batches_per_epoch = int(np.ceil(train_ds.n_rows / config.batch_size))
    total_steps = config.max_epochs * batches_per_epoch
    best = {"loss": np.inf, "epoch": -1, "state": params.snapshot()}
    history = []
    step = 0
    stale = 0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        epoch_parts = {k: 0.0 for k in ("total", "task", "numeric", "categorical", "homophily", "triplet")}
        for rows in _epoch_batches(train_ds.n_rows, config.batch_size, order_rng):
            tau = temperature(step, total_steps, config.tau_start, config.tau_end)
            surr = missingness.surrogate_mask(train_mask[rows], config.surrogate_rate, surr_rng)
            try:
                _, _, parts = _batch_loss(train_ds, rows, train_mask, surr, params, tau,
                                          "train", gumbel_rng, config.weights, trip_rng)
                loss = objectives.total_loss(parts, config.weights)
                loss.backward()
                rmsprop_step(params.named_parameters(), opt, config.learning_rate)
                params.check_finite()
            except FloatingPointError:
                params.load_state_arrays(best["state"])
                return TrainedModel(params, config, best["loss"], best["epoch"], history)
            epoch_parts["total"] += loss.item()
            for name, term in parts.named().items():
                epoch_parts[name] += term.item()
            step += 1
        for key in epoch_parts:
            epoch_parts[key] /= batches_per_epoch
        val_loss = validation_loss(val_ds, val_mask, val_surrogate, params, config,
                                   np.random.default_rng(val_rng_seed.spawn(1)[0]))
        record = {"epoch": epoch, "tau": temperature(step, total_steps, config.tau_start,
                                                     config.tau_end),
                  "val_loss": val_loss, "seconds": time.perf_counter() - t0}
        record.update({f"train_{k}": v for k, v in epoch_parts.items()})
        history.append(record)
        if log:
            log(record)
        if val_loss < best["loss"]:
            best = {"loss": val_loss, "epoch": epoch, "state": params.snapshot()}
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    params.load_state_arrays(best["state"])
    return TrainedModel(params, config, best["loss"], best["epoch"], history)
