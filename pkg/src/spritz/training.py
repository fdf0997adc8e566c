"""Dataset splitting, Adam training for every network, threshold
calibration and clean-accuracy evaluation."""
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset
from .models import (COMBINER_WIDTH, H0, H1, EnsembleModel, build_autoencoder, build_cnn2c,
                     build_combiner, cnn2c_predict, frozen, reconstruction_error)
from .tensor import Tensor, ops


class InsufficientDataError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    # stop once validation accuracy reaches 1.0 (classifiers only); the
    # retained weights are the same either way since later epochs can only tie
    stop_at_perfect: bool = True
    # auto-encoders: stop after this many epochs without a relative
    # validation-loss improvement of at least ``min_rel_improvement``
    patience: int = None
    min_rel_improvement: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @classmethod
    def from_dict(cls, raw):
        return cls(**raw)

    def as_dict(self):
        return asdict(self)


@dataclass
class SplitSpec:
    """Per-class example counts for each partition."""

    train: int
    val: int
    test: int

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split counts must be nonnegative")

    @property
    def per_class(self):
        return self.train + self.val + self.test


def split_indices(labels, spec, seed=0):
    """Disjoint, class-balanced train/val/test index arrays for ``labels``."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for label in (H0, H1):
        idx = np.flatnonzero(labels == label)
        if idx.size < spec.per_class:
            name = "H0 (pristine)" if label == H0 else "H1 (malicious)"
            raise InsufficientDataError(f"class {name}: need {spec.per_class} examples, have {idx.size}")
        idx = rng.permutation(idx)
        parts["train"].append(idx[:spec.train])
        parts["val"].append(idx[spec.train:spec.train + spec.val])
        parts["test"].append(idx[spec.train + spec.val:spec.per_class])
    out = []
    for key in ("train", "val", "test"):
        merged = np.concatenate(parts[key])
        out.append(merged[rng.permutation(merged.size)])
    return tuple(out)


def split_dataset(dataset, spec, seed=0):
    """Draw disjoint, class-balanced train/val/test partitions."""
    return tuple(dataset.subset(idx) for idx in split_indices(dataset.y, spec, seed))


# -------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update, applied in place.

    ``params`` maps names to Tensors or arrays; missing gradients count as
    zero. Returns ``(params, state)``.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    lr_t = config.learning_rate * math.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        elif m.shape != data.shape:
            raise ValueError(f"{name}: optimizer state shape {m.shape} != parameter shape {data.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        # eps is scaled so the update equals the textbook form m_hat / (sqrt(v_hat) + eps)
        data -= lr_t * m / (np.sqrt(v) + config.eps * math.sqrt(1.0 - b2 ** t))
    return params, state


# ----------------------------------------------------------------------- history

@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = None
    stopped_early: bool = False

    def add(self, epoch, train_loss, val_metric):
        self.rows.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val_metric})

    @property
    def train_losses(self):
        return [r["train_loss"] for r in self.rows]

    @property
    def val_metrics(self):
        return [r["val_metric"] for r in self.rows]

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_metric"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_metric"])])


def _snapshot(graph):
    return {k: np.array(v, copy=True) for k, v in graph.state_arrays().items()}


def _fit(graph, x, y, loss_fn, val_fn, config, maximize):
    """Shared minibatch loop: shuffles with ``config.seed`` each epoch,
    steps Adam, and keeps the best-validation snapshot."""
    history = TrainHistory()
    if config.epochs == 0:
        return graph, history
    rng = np.random.default_rng(config.seed)
    params = graph.parameters()
    state = AdamState()
    best = _snapshot(graph)
    best_val = -np.inf if maximize else np.inf
    stale = 0
    n = len(x)
    for epoch in range(1, config.epochs + 1):
        graph.training = True
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            graph.zero_grad()
            loss = loss_fn(graph.forward(x[idx]), None if y is None else y[idx], x[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"{graph.name}: loss became {value} in epoch {epoch}")
            loss.backward()
            adam_step(params, {k: t.grad for k, t in params.items() if t.grad is not None}, state, config)
            total += value * idx.size
        graph.training = False
        graph.zero_grad()
        val = float(val_fn(graph))
        history.add(epoch, total / n, val)
        if maximize:
            improved = val > best_val
            enough = improved
        else:
            improved = val < best_val
            enough = not math.isfinite(best_val) or val < best_val * (1.0 - config.min_rel_improvement)
        stale = 0 if enough else stale + 1
        if improved:
            best_val = val
            best = _snapshot(graph)
            history.best_epoch = epoch
        if maximize and config.stop_at_perfect and val >= 1.0:
            history.stopped_early = epoch < config.epochs
            break
        if config.patience is not None and stale >= config.patience:
            history.stopped_early = epoch < config.epochs
            break
    graph.load_state_arrays(best)
    return graph, history


def _batched(fn, x, size=64):
    return np.concatenate([fn(x[lo:lo + size]) for lo in range(0, len(x), size)])


def train_2c(train, val, config, model=None):
    """Fit the 2C network with binary cross-entropy on the logit tap."""
    graph = model if model is not None else build_cnn2c(config.seed)

    def loss_fn(out, y, _x):
        return ops.binary_cross_entropy(graph.taps["logit"], y)

    def val_fn(g):
        pred = _batched(lambda b: cnn2c_predict(g, b), val.x)
        return float(np.mean(pred == val.y))

    return _fit(graph, train.x, train.y, loss_fn, val_fn, config, maximize=True)


def train_autoencoder(train, val, config, name="autoencoder", model=None):
    """Fit an auto-encoder on one class with a mean-squared reconstruction loss
    (0-255 units). The validation metric is the mean validation MSE."""
    graph = model if model is not None else build_autoencoder(config.seed, name)

    def loss_fn(out, _y, x):
        return ops.mse(out, graph.prepare(x).data)

    def val_fn(g):
        return float(np.mean(_batched(lambda b: np.atleast_1d(reconstruction_error(g, b)), val.x)))

    return _fit(graph, train.x, None, loss_fn, val_fn, config, maximize=False)


def calibrate_threshold(autoencoder, calibration, percentile=95.0):
    """Nearest-rank ``percentile`` of reconstruction errors on ``calibration``
    (a Dataset, an array of grids, or precomputed errors via ``errors=``)."""
    x = calibration.x if isinstance(calibration, Dataset) else np.asarray(calibration)
    if len(x) == 0:
        raise ValueError("calibration set is empty")
    errors = _batched(lambda b: np.atleast_1d(reconstruction_error(autoencoder, b)), x)
    return nearest_rank(errors, percentile)


def nearest_rank(values, percentile):
    values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if values.size == 0:
        raise ValueError("empty set")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    rank = max(1, math.ceil(percentile / 100.0 * values.size))
    return float(values[rank - 1])


def extract_features(ensemble, x):
    return _batched(lambda b: ensemble.features(b).data, x)


def train_combiner(ensemble, train, val, config):
    """Fit the combiner on frozen 2752-wide features with softmax cross-entropy.

    Features are computed once up front; the extractors never see a tape
    or an optimizer step.
    """
    with frozen(ensemble):
        f_train = extract_features(ensemble, train.x)
        f_val = extract_features(ensemble, val.x)
    if f_train.shape[1] != COMBINER_WIDTH:
        raise ValueError(f"feature width {f_train.shape[1]} != {COMBINER_WIDTH}")
    graph = ensemble.combiner

    def loss_fn(out, y, _x):
        return ops.softmax_cross_entropy(out, y)

    def val_fn(g):
        return float(np.mean(np.argmax(g.predict(f_val), axis=1) == val.y))

    ensemble.combiner_trained = False
    _, history = _fit(graph, f_train, train.y, loss_fn, val_fn, config, maximize=True)
    ensemble.combiner_trained = config.epochs > 0
    return ensemble, history


# ------------------------------------------------------------------- evaluation

@dataclass
class AccuracyReport:
    accuracy: float
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def p_md(self):
        """Missed detections: malicious examples labelled pristine."""
        pos = self.tp + self.fn
        return self.fn / pos if pos else 0.0

    @property
    def p_fa(self):
        """False alarms: pristine examples labelled malicious."""
        neg = self.tn + self.fp
        return self.fp / neg if neg else 0.0

    def as_dict(self):
        return {"accuracy": self.accuracy, "tp": self.tp, "tn": self.tn, "fp": self.fp,
                "fn": self.fn, "p_md": self.p_md, "p_fa": self.p_fa}


def oneclass_predictor(autoencoder, threshold, accept_label):
    """Standalone 1C detector: ``accept_label`` when accepted, the other label otherwise."""
    def predict(x):
        ok = np.atleast_1d(reconstruction_error(autoencoder, x)) <= threshold
        return np.where(ok, accept_label, 1 - accept_label)
    return predict


def predictor_for(model):
    if isinstance(model, EnsembleModel):
        return model.predict
    if callable(getattr(model, "predict", None)) and hasattr(model, "tap_names"):
        if "prob" in model.tap_names():
            return lambda x: cnn2c_predict(model, x)
        raise TypeError("auto-encoders need a threshold; use oneclass_predictor")
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def evaluate_accuracy(model, test):
    """Accuracy and confusion counts with H1 (malicious) as the positive class."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    pred = _batched(predictor_for(model), test.x)
    y = test.y
    tp = int(np.sum((pred == H1) & (y == H1)))
    tn = int(np.sum((pred == H0) & (y == H0)))
    fp = int(np.sum((pred == H1) & (y == H0)))
    fn = int(np.sum((pred == H0) & (y == H1)))
    return AccuracyReport((tp + tn) / len(y), tp, tn, fp, fn)


# ---------------------------------------------------------------- whole ensemble

@dataclass
class EnsembleTraining:
    ensemble: EnsembleModel
    histories: dict
    accuracy: dict


def train_ensemble(train, val, test, config, ae_config=None, percentile=95.0, log=None):
    """Train 2C, 1C-Leg (pristine), 1C-Mal (malicious), calibrate both
    thresholds on each model's own training class, then the combiner.
    Returns the ensemble, training histories and a per-classifier accuracy table."""
    ae_config = ae_config or config
    say = log or (lambda msg: None)
    cnn, h2c = train_2c(train, val, config)
    say(f"2C trained ({len(h2c.rows)} epochs)")
    leg, hleg = train_autoencoder(train.of_class(H0), val.of_class(H0), _reseed(ae_config, 1), name="leg")
    say(f"1C-Leg trained ({len(hleg.rows)} epochs)")
    mal, hmal = train_autoencoder(train.of_class(H1), val.of_class(H1), _reseed(ae_config, 2), name="mal")
    say(f"1C-Mal trained ({len(hmal.rows)} epochs)")
    leg_thr = calibrate_threshold(leg, train.of_class(H0), percentile)
    mal_thr = calibrate_threshold(mal, train.of_class(H1), percentile)
    ensemble = EnsembleModel(cnn, leg, mal, build_combiner(config.seed + 3), leg_thr, mal_thr)
    ensemble, hcmb = train_combiner(ensemble, train, val, _reseed(config, 3))
    say(f"combiner trained ({len(hcmb.rows)} epochs)")
    accuracy = {
        "2C": evaluate_accuracy(cnn, test),
        "1C-Leg": evaluate_accuracy(oneclass_predictor(leg, leg_thr, H0), test),
        "1C-Mal": evaluate_accuracy(oneclass_predictor(mal, mal_thr, H1), test),
        "cmb": evaluate_accuracy(ensemble, test),
    }
    histories = {"2C": h2c, "1C-Leg": hleg, "1C-Mal": hmal, "cmb": hcmb}
    return EnsembleTraining(ensemble, histories, accuracy)


def _reseed(config, offset):
    raw = config.as_dict()
    raw["seed"] = config.seed + offset
    return TrainConfig(**raw)
