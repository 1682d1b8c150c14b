"""Training a network to hedge, either directly or as a correction to the BS delta.

Both objectives minimize the mean squared one-period hedging error
``dv - hedge * ds``.  In ``direct`` mode the network output is the hedge
ratio.  In ``residual`` mode the hedge is ``delta_bs + output``, so a network
that outputs zero reproduces the Black-Scholes benchmark.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import neural
from .data import FLOAT_FORMAT, FeatureSpec, SampleSet, fit_feature_spec
from .errors import DivergenceError, EmptyPartitionError, ShapeMismatchError

log = logging.getLogger(__name__)

DIRECT = "direct"
RESIDUAL = "residual"
PREDICT_CHUNK = 65536


@dataclass(frozen=True)
class Objective:
    mode: str = RESIDUAL

    def __post_init__(self):
        if self.mode not in (DIRECT, RESIDUAL):
            raise ValueError(f"objective must be {DIRECT!r} or {RESIDUAL!r}, got {self.mode!r}")

    @property
    def residual(self) -> bool:
        return self.mode == RESIDUAL

    def label(self, model_name: str) -> str:
        """Report label: residual models carry a ``-BS`` suffix (``Fea2-BS``)."""
        return f"{model_name}-BS" if self.residual else model_name


@dataclass(frozen=True)
class TrainPlan:
    batch_size: int = 1024
    max_epochs: int = 40
    patience: int = 5
    shuffle_seed: int = 0
    objective: Objective = field(default_factory=Objective)
    learning_rate: float = 1e-4
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs batch statistics)")
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ValueError("need max_epochs >= 1 and 1 <= patience <= max_epochs")
        if not (self.learning_rate > 0 and self.clip_norm > 0):
            raise ValueError("learning_rate and clip_norm must be positive")


@dataclass
class TrainedModel:
    network: neural.Network
    objective: Objective
    feature_spec: FeatureSpec
    history: list          # (epoch, train_mse, val_mse), epochs counted from 1
    best_epoch: int
    metadata: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.objective.label(self.feature_spec.model_name)

    @property
    def best_val_mse(self) -> float:
        return self.history[self.best_epoch - 1][2]


def hedge_ratios_from_outputs(outputs, delta_bs, objective: Objective) -> np.ndarray:
    outputs = np.asarray(outputs, float)
    return np.asarray(delta_bs, float) + outputs if objective.residual else outputs


def hedge_loss(outputs, samples, objective: Objective) -> tuple[float, np.ndarray]:
    """Mean squared hedging error and its gradient with respect to each output.

    ``samples`` is anything with ``dv``, ``ds`` and ``delta_bs`` arrays aligned
    with ``outputs``.
    """
    outputs = np.asarray(outputs, float)
    dv, ds = np.asarray(samples.dv, float), np.asarray(samples.ds, float)
    if outputs.shape != dv.shape:
        raise ShapeMismatchError(f"{outputs.shape[0] if outputs.ndim else 1} outputs for {dv.shape[0]} samples")
    if objective.residual and samples.delta_bs is None:
        raise ValueError("residual objective needs delta_bs for every sample")
    err = dv - hedge_ratios_from_outputs(outputs, samples.delta_bs, objective) * ds
    m = err.size
    return float(np.mean(err * err)), -2.0 * ds * err / m


class EarlyStopper:
    """Patience rule: stop once ``patience`` epochs pass without a strictly lower validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Record one epoch; returns ``(improved, stop)``."""
        self.epoch += 1
        improved = val_loss < self.best
        if improved:
            self.best, self.best_epoch = val_loss, self.epoch
        return improved, self.epoch - self.best_epoch >= self.patience


class _Batch:
    """Lightweight view with the fields ``hedge_loss`` reads."""

    def __init__(self, dv, ds, delta_bs):
        self.dv, self.ds, self.delta_bs = dv, ds, delta_bs


def _eval_mse(net, x, samples: SampleSet, objective) -> float:
    out = _predict_outputs(net, x)
    return hedge_loss(out, samples, objective)[0]


def _predict_outputs(net, x) -> np.ndarray:
    if x.shape[0] <= PREDICT_CHUNK:
        return neural.predict(net, x)
    return np.concatenate([neural.predict(net, x[i:i + PREDICT_CHUNK])
                           for i in range(0, x.shape[0], PREDICT_CHUNK)])


def train(train_samples: SampleSet, val_samples: SampleSet, net_config: neural.NetConfig,
          plan: TrainPlan = TrainPlan(), *, feature_spec: FeatureSpec | None = None) -> TrainedModel:
    """Mini-batch Adam with per-epoch validation and patience-based early stopping.

    Normalization statistics are fit on ``train_samples`` unless given.  The
    returned network holds the parameters of the epoch with the lowest
    validation MSE.
    """
    if len(train_samples) == 0 or len(val_samples) == 0:
        raise EmptyPartitionError("training and validation sets must be nonempty")
    spec = feature_spec or fit_feature_spec(train_samples)
    spec.check(train_samples)
    spec.check(val_samples)
    if net_config.input_dim != len(spec.columns):
        raise ShapeMismatchError(
            f"network expects {net_config.input_dim} inputs, feature set has {len(spec.columns)}")
    objective = plan.objective
    x_train = spec.transform(train_samples.features)
    x_val = spec.transform(val_samples.features)
    dv, ds, dbs = train_samples.dv, train_samples.ds, train_samples.delta_bs

    net = neural.init_network(net_config)
    opt = neural.OptimState.for_network(net, learning_rate=plan.learning_rate, clip_norm=plan.clip_norm)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(plan.shuffle_seed)))
    stopper = EarlyStopper(plan.patience)
    best_state = {k: v.copy() for k, v in net.state().items()}
    history = []
    n = len(train_samples)
    min_batch = 2 if net_config.batch_norm else 1

    for epoch in range(1, plan.max_epochs + 1):
        perm = rng.permutation(n)
        sse, seen = 0.0, 0
        for start in range(0, n, plan.batch_size):
            idx = perm[start:start + plan.batch_size]
            if idx.size < min_batch:
                continue
            out, cache = neural.forward(net, x_train[idx], neural.TRAIN)
            loss, grad = hedge_loss(out, _Batch(dv[idx], ds[idx], dbs[idx]), objective)
            if not np.isfinite(loss):
                raise DivergenceError(f"training loss became {loss} at epoch {epoch}, batch starting {start}")
            grads = neural.backward(net, cache, grad)
            neural.adam_step(net, grads, opt)
            sse += loss * idx.size
            seen += idx.size
        train_mse = sse / seen
        val_mse = _eval_mse(net, x_val, val_samples, objective)
        if not np.isfinite(val_mse):
            raise DivergenceError(f"validation loss became {val_mse} at epoch {epoch}")
        history.append((epoch, train_mse, val_mse))
        improved, stop = stopper.update(val_mse)
        log.debug("epoch %d train %.6g val %.6g%s", epoch, train_mse, val_mse, " *" if improved else "")
        if improved:
            best_state = {k: v.copy() for k, v in net.state().items()}
        if stop:
            break

    net.load_state(best_state)
    metadata = {
        "net_seed": net_config.seed,
        "shuffle_seed": plan.shuffle_seed,
        "epochs_run": len(history),
        "best_epoch": stopper.best_epoch,
        "final_val_mse": history[-1][2],
        "best_val_mse": stopper.best,
        # zero-residual (Black-Scholes delta) hedge on the same validation set
        "val_benchmark_mse": float(np.mean((val_samples.dv - val_samples.delta_bs * val_samples.ds) ** 2)),
        "n_train": n,
        "n_val": len(val_samples),
        "adam_steps": opt.step,
        "batch_size": plan.batch_size,
        "max_epochs": plan.max_epochs,
        "patience": plan.patience,
        "learning_rate": plan.learning_rate,
        "clip_norm": plan.clip_norm,
    }
    return TrainedModel(net, objective, spec, history, stopper.best_epoch, metadata)


def predict_hedge(model: TrainedModel, samples: SampleSet) -> np.ndarray:
    """Hedge ratios for ``samples``; infer mode, so rows are scored independently."""
    model.feature_spec.check(samples)
    x = model.feature_spec.transform(samples.features)
    out = _predict_outputs(model.network, x)
    return hedge_ratios_from_outputs(out, samples.delta_bs, model.objective)


def zero_residual_model(feature_spec: FeatureSpec, net_config: neural.NetConfig) -> TrainedModel:
    """Residual model whose output layer is all zeros: it hedges with ``delta_bs`` exactly."""
    net = neural.init_network(net_config)
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = 0.0
    return TrainedModel(net, Objective(RESIDUAL), feature_spec, [], 0, {})


# -- artifacts ----------------------------------------------------------------

def save_model(model: TrainedModel, path) -> Path:
    meta = {
        "kind": "trained_model",
        "net_config": asdict(model.network.config),
        "objective": model.objective.mode,
        "feature_spec": model.feature_spec.to_dict(),
        "history": [list(h) for h in model.history],
        "best_epoch": model.best_epoch,
        "metadata": model.metadata,
    }
    return neural.write_container(path, meta, model.network.state())


def load_model(path) -> TrainedModel:
    meta, arrays = neural.read_container(path)
    config = neural.NetConfig(**meta["net_config"])
    net = neural.network_from_state(config, arrays)
    history = [(int(e), float(a), float(b)) for e, a, b in meta["history"]]
    return TrainedModel(net, Objective(meta["objective"]), FeatureSpec.from_dict(meta["feature_spec"]),
                        history, int(meta["best_epoch"]), meta.get("metadata", {}))


def write_training_log(model: TrainedModel, path) -> Path:
    path = Path(path)
    df = pd.DataFrame(model.history, columns=["epoch", "train_mse", "val_mse"])
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path
