"""From-scratch 256-class fully-connected classifier.

Architecture: three hidden layers (100, 1024, 512 by default), each as
dense -> ReLU -> batch norm -> dropout, then a dense layer into a
256-way softmax. Training is Adam with an initial learning rate that is
halved after every five-epoch validation-accuracy plateau; the weights
with the best validation accuracy are retained. Everything runs in
float64 numpy and is bit-reproducible for a fixed seed and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

N_CLASSES = 256


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class TrainConfig:
    lr0: float = 0.005
    plateau_patience: int = 5
    lr_factor: float = 0.5
    batch_size: int = 64
    max_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int | None = 15
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)


@dataclass
class MlpModel:
    """Parameters, batch-norm state and metadata of the classifier.

    Exclusively owned during training; treat as immutable in eval use.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gammas: list[np.ndarray]
    betas: list[np.ndarray]
    running_means: list[np.ndarray]
    running_vars: list[np.ndarray]
    dropout_rates: list[float]
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    transform_fingerprint: str | None = None

    @property
    def n_hidden(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        for i in range(self.n_hidden):
            out[f"gamma{i}"] = self.gammas[i]
            out[f"beta{i}"] = self.betas[i]
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        kind = name.rstrip("0123456789")
        idx = int(name[len(kind):])
        store = {"W": self.weights, "b": self.biases,
                 "gamma": self.gammas, "beta": self.betas}[kind]
        store[idx] = value

    def state_snapshot(self) -> dict[str, np.ndarray]:
        snap = {k: v.copy() for k, v in self.parameters().items()}
        for i in range(self.n_hidden):
            snap[f"rmean{i}"] = self.running_means[i].copy()
            snap[f"rvar{i}"] = self.running_vars[i].copy()
        return snap

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name in self.parameters():
            self.set_parameter(name, snap[name].copy())
        for i in range(self.n_hidden):
            self.running_means[i] = snap[f"rmean{i}"].copy()
            self.running_vars[i] = snap[f"rvar{i}"].copy()

    def validate(self) -> None:
        if self.layer_dims[-1] != N_CLASSES:
            raise ValueError(f"output layer must have width {N_CLASSES}")
        if any(not 0 <= p < 1 for p in self.dropout_rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        for rv in self.running_vars:
            if np.any(rv <= 0):
                raise ValueError("running variances must stay positive")
        if float(np.var(self.weights[0])) == 0.0:
            raise ValueError("first-layer weights have zero variance; bad init")


def init_model(input_dim: int, seed: int = 0,
               hidden_dims: tuple[int, ...] = (100, 1024, 512),
               dropout_rates: tuple[float, ...] = (0.45, 0.20, 0.20)) -> MlpModel:
    """He-uniform initialized model; deterministic per seed."""
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    if len(dropout_rates) != len(hidden_dims):
        raise ValueError("one dropout rate per hidden layer required")
    dims = [input_dim, *hidden_dims, N_CLASSES]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    model = MlpModel(
        layer_dims=dims,
        weights=weights,
        biases=biases,
        gammas=[np.ones(h) for h in hidden_dims],
        betas=[np.zeros(h) for h in hidden_dims],
        running_means=[np.zeros(h) for h in hidden_dims],
        running_vars=[np.ones(h) for h in hidden_dims],
        dropout_rates=list(dropout_rates),
    )
    model.validate()
    return model


def dense_parameter_count(model: MlpModel) -> int:
    """Weights plus biases of the dense layers (batch-norm excluded)."""
    return sum(int(w.size + b.size) for w, b in zip(model.weights, model.biases))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_full(model: MlpModel, x: np.ndarray, mode: Mode,
                  rng: np.random.Generator | None = None,
                  update_running: bool = True):
    """Forward pass keeping per-layer caches for backprop.

    TRAIN mode uses batch statistics for batch norm and inverted dropout;
    EVAL uses running statistics and no dropout.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(
            f"expected input of shape (n, {model.input_dim}), got {x.shape}")
    caches = []
    h = x
    for i in range(model.n_hidden):
        z = h @ model.weights[i] + model.biases[i]
        a = np.maximum(z, 0.0)
        if mode == Mode.TRAIN:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            if update_running:
                m = model.bn_momentum
                model.running_means[i] = m * model.running_means[i] + (1 - m) * mu
                model.running_vars[i] = m * model.running_vars[i] + (1 - m) * var
        else:
            mu = model.running_means[i]
            var = model.running_vars[i]
        inv_std = 1.0 / np.sqrt(var + model.bn_eps)
        a_hat = (a - mu) * inv_std
        out = model.gammas[i] * a_hat + model.betas[i]
        p = model.dropout_rates[i]
        if mode == Mode.TRAIN and p > 0:
            if rng is None:
                raise ValueError("TRAIN-mode forward with dropout needs an RNG")
            mask = (rng.random(out.shape) >= p) / (1.0 - p)
            out = out * mask
        else:
            mask = None
        caches.append({"x": h, "z": z, "a_hat": a_hat, "inv_std": inv_std,
                       "mask": mask, "batch_stats": mode == Mode.TRAIN})
        h = out
    logits = h @ model.weights[-1] + model.biases[-1]
    probs = _softmax(logits)
    return probs, h, caches


def forward(model: MlpModel, x: np.ndarray, mode: Mode = Mode.EVAL,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities (n, 256); rows sum to 1."""
    probs, _, _ = _forward_full(model, x, mode, rng,
                                update_running=(mode == Mode.TRAIN))
    return probs


def loss_and_grads(model: MlpModel, x: np.ndarray, labels: np.ndarray,
                   mode: Mode = Mode.TRAIN,
                   rng: np.random.Generator | None = None,
                   update_running: bool = True):
    """Mean cross-entropy and gradients for every parameter.

    EVAL mode freezes batch-norm statistics (gradients treat the running
    mean/var as constants) and disables dropout; that is the setting the
    finite-difference check runs in.
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise ValueError("labels must lie in 0..255")
    n = x.shape[0]
    probs, h_last, caches = _forward_full(model, x, mode, rng, update_running)
    eps = 1e-300
    loss = float(-np.log(probs[np.arange(n), labels] + eps).mean())

    grads: dict[str, np.ndarray] = {}
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads[f"W{model.n_hidden}"] = h_last.T @ dlogits
    grads[f"b{model.n_hidden}"] = dlogits.sum(axis=0)
    dh = dlogits @ model.weights[-1].T

    for i in range(model.n_hidden - 1, -1, -1):
        c = caches[i]
        if c["mask"] is not None:
            dh = dh * c["mask"]
        grads[f"gamma{i}"] = (dh * c["a_hat"]).sum(axis=0)
        grads[f"beta{i}"] = dh.sum(axis=0)
        da_hat = dh * model.gammas[i]
        if c["batch_stats"]:
            m = da_hat.shape[0]
            da = (c["inv_std"] / m) * (
                m * da_hat
                - da_hat.sum(axis=0)
                - c["a_hat"] * (da_hat * c["a_hat"]).sum(axis=0))
        else:
            da = da_hat * c["inv_std"]
        dz = da * (c["z"] > 0)
        grads[f"W{i}"] = c["x"].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ model.weights[i].T
    return loss, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, model: MlpModel) -> "AdamState":
        params = model.parameters()
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(model: MlpModel, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> MlpModel:
    """Bias-corrected Adam update, applied in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, param in model.parameters().items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        model.set_parameter(name, param - lr * m_hat / (np.sqrt(v_hat) + eps))
    return model


class PlateauSchedule:
    """Halve the learning rate after `patience` epochs without improvement."""

    def __init__(self, lr0: float, patience: int, factor: float):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self._stale = 0

    def update(self, improved: bool) -> float:
        """Feed one epoch's outcome; returns the LR for the next epoch."""
        if improved:
            self._stale = 0
        else:
            self._stale += 1
            if self._stale >= self.patience:
                self.lr *= self.factor
                self._stale = 0
        return self.lr


def train(model: MlpModel, train_x: np.ndarray, train_y: np.ndarray,
          val_x: np.ndarray, val_y: np.ndarray,
          config: TrainConfig | None = None) -> tuple[MlpModel, TrainHistory]:
    """Minibatch Adam training with the plateau schedule.

    Validation traces must come from the training devices (held-out
    split); cross-device accuracy is measured separately. The model state
    with the best validation accuracy is restored at the end.
    """
    config = config or TrainConfig()
    if len(val_x) == 0:
        raise ValueError("validation set must be nonempty")
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)

    seq = np.random.SeedSequence(config.seed)
    shuffle_seq, dropout_seq = seq.spawn(2)
    shuffle_rng = np.random.Generator(np.random.Philox(shuffle_seq))
    dropout_rng = np.random.Generator(np.random.Philox(dropout_seq))

    state = AdamState.init(model)
    schedule = PlateauSchedule(config.lr0, config.plateau_patience, config.lr_factor)
    history = TrainHistory()
    best_acc = -1.0
    best_snapshot = model.state_snapshot()
    stale_epochs = 0
    n = train_x.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        lr = schedule.lr
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = loss_and_grads(model, train_x[idx], train_y[idx],
                                         Mode.TRAIN, dropout_rng)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} at epoch {epoch}, "
                    f"batch starting at {start} (lr={lr})")
            adam_step(model, grads, state, lr, config.beta1, config.beta2,
                      config.adam_eps)
            epoch_loss += loss * len(idx)
        train_acc = float((predict_labels(model, train_x) == train_y).mean())
        val_acc = float((predict_labels(model, val_x) == val_y).mean())

        history.train_loss.append(epoch_loss / n)
        history.train_accuracy.append(train_acc)
        history.val_accuracy.append(val_acc)
        history.learning_rate.append(lr)

        improved = val_acc > best_acc
        if improved:
            best_acc = val_acc
            best_snapshot = model.state_snapshot()
            stale_epochs = 0
        else:
            stale_epochs += 1
        schedule.update(improved)
        if (config.early_stop_patience is not None
                and stale_epochs >= config.early_stop_patience):
            break

    model.load_snapshot(best_snapshot)
    return model, history


def predict_labels(model: MlpModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Eval-mode argmax class per row, computed in chunks."""
    preds = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], chunk):
        probs = forward(model, x[start:start + chunk], Mode.EVAL)
        preds[start:start + chunk] = probs.argmax(axis=1)
    return preds


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    top5_accuracy: float
    n_traces: int
    per_class_correct: np.ndarray
    per_class_total: np.ndarray


def evaluate(model: MlpModel, x: np.ndarray, labels: np.ndarray,
             chunk: int = 512) -> EvalResult:
    """Top-1 / top-5 accuracy plus a per-class confusion summary."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("evaluation set is empty")
    correct = np.zeros(N_CLASSES, dtype=np.int64)
    total = np.zeros(N_CLASSES, dtype=np.int64)
    top5_hits = 0
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        yb = labels[start:start + chunk]
        probs = forward(model, xb, Mode.EVAL)
        pred = probs.argmax(axis=1)
        top5 = np.argpartition(-probs, 5, axis=1)[:, :5]
        top5_hits += int((top5 == yb[:, None]).any(axis=1).sum())
        np.add.at(total, yb, 1)
        np.add.at(correct, yb[pred == yb], 1)
    return EvalResult(
        accuracy=float(correct.sum() / labels.size),
        top5_accuracy=float(top5_hits / labels.size),
        n_traces=int(labels.size),
        per_class_correct=correct,
        per_class_total=total,
    )


def stratified_split(labels: np.ndarray, holdout_fraction: float,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Index split keeping the label distribution; returns (train, holdout)."""
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    train_idx: list[np.ndarray] = []
    hold_idx: list[np.ndarray] = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = max(1, int(round(idx.size * holdout_fraction))) if idx.size > 1 else 0
        hold_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train = np.sort(np.concatenate(train_idx))
    hold = np.sort(np.concatenate(hold_idx)) if hold_idx else np.array([], dtype=int)
    return train, hold
