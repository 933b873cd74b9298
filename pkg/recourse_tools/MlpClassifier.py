# recourse_tools/MlpClassifier.py
"""
Two-layer tanh network used as the differentiable classifier f.

f(x) = sigmoid(W2 . tanh(W1 x + b1) + b2)

Forward pass, input gradient of log f and the training loop are written
against numpy directly; the posterior calls them from every chain
concurrently, so instances are never mutated after training.
"""
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from packaging.version import Version, InvalidVersion

from recourse_tools.TabularData import TrainingStats
from recourse_tools.errors import WidthMismatch, SingleClassDataset, CorruptFile, SchemaMismatch, SchemaError

logger = logging.getLogger('MlpClassifier')

FILE_FORMAT = 'recourse-mlp'
FILE_VERSION = '1.0'
ACTIVATION = 'tanh'
HIDDEN_UNITS = 200

_P_MIN = np.finfo(float).tiny
_P_MAX = np.nextafter(1.0, 0.0)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    train_fraction: float = 0.8
    hidden_units: int = HIDDEN_UNITS

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise SchemaError(f"train_fraction {self.train_fraction} outside (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden_units < 1:
            raise SchemaError("epochs, batch_size and hidden_units must be positive")
        if self.learning_rate <= 0:
            raise SchemaError("learning_rate must be positive")


@dataclass(frozen=True)
class TrainResult:
    classifier: 'MlpClassifier'
    accuracy: float
    loss_history: tuple = field(default=())


class MlpClassifier:
    """Immutable weights plus forward / gradient evaluation."""

    def __init__(self, W1, b1, W2, b2, schema_hash='', stats=None, activation=ACTIVATION):
        W1 = np.array(W1, dtype=float, ndmin=2)
        b1 = np.array(b1, dtype=float).reshape(-1)
        W2 = np.array(W2, dtype=float).reshape(-1)
        b2 = float(b2)
        if W1.shape[0] != b1.shape[0] or W1.shape[0] != W2.shape[0]:
            raise ValueError(f"inconsistent layer shapes {W1.shape}, {b1.shape}, {W2.shape}")
        if not all(np.isfinite(a).all() for a in (W1, b1, W2)) or not np.isfinite(b2):
            raise ValueError("classifier weights must be finite")
        if activation != ACTIVATION:
            raise ValueError(f"unsupported activation '{activation}'")
        for a in (W1, b1, W2):
            a.setflags(write=False)
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2
        self.schema_hash = schema_hash
        self.stats = stats
        self.activation = activation

    @property
    def input_width(self):
        return self.W1.shape[1]

    @property
    def hidden_units(self):
        return self.W1.shape[0]

    def _check(self, X, batch):
        X = np.asarray(X, dtype=float)
        expected = 2 if batch else 1
        if X.ndim != expected or X.shape[-1] != self.input_width:
            raise WidthMismatch(f"classifier expects width {self.input_width}, got shape {X.shape}")
        return X

    # ------------------------------------------------------------------
    # Forward / backward
    # ------------------------------------------------------------------

    def logit_batch(self, X):
        X = self._check(X, batch=True)
        return np.tanh(X @ self.W1.T + self.b1) @ self.W2 + self.b2

    def predict_proba(self, x):
        x = self._check(x, batch=False)
        return float(self.predict_proba_batch(x[None, :])[0])

    def predict_proba_batch(self, X):
        return np.clip(_sigmoid(self.logit_batch(X)), _P_MIN, _P_MAX)

    def input_gradient(self, x):
        """d log f / d x at a single encoded vector."""
        x = self._check(x, batch=False)
        return self.log_proba_and_grad_batch(x[None, :])[1][0]

    def log_proba_and_grad_batch(self, X):
        """(log f(X), d log f / dX) for a batch of encoded rows."""
        X = self._check(X, batch=True)
        h = np.tanh(X @ self.W1.T + self.b1)
        z = h @ self.W2 + self.b2
        dz = _sigmoid(-z)  # d log sigmoid(z) / dz
        grad = (dz[:, None] * (1.0 - h * h) * self.W2) @ self.W1
        return _log_sigmoid(z), grad

    def with_output_scale(self, t):
        """Copy with W2 scaled by t."""
        return MlpClassifier(self.W1, self.b1, self.W2 * t, self.b2, self.schema_hash, self.stats)

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def save(self, path):
        payload = {
            'format': FILE_FORMAT,
            'version': FILE_VERSION,
            'schema_hash': self.schema_hash,
            'activation': self.activation,
            'input_width': self.input_width,
            'hidden_units': self.hidden_units,
            'stats': None if self.stats is None else self.stats.to_dict(),
            'W1': self.W1.tolist(),
            'b1': self.b1.tolist(),
            'W2': self.W2.tolist(),
            'b2': self.b2,
        }
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(payload, fh)
        logger.info(f"Classifier written to {path}")

    @classmethod
    def load(cls, path, schema=None):
        """Load a classifier file; with `schema`, refuse a file trained under another schema."""
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise CorruptFile(f"classifier file not found: {path}") from None
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise CorruptFile(f"{path}: not a classifier file ({e})") from None
        if not isinstance(payload, dict) or payload.get('format') != FILE_FORMAT:
            raise CorruptFile(f"{path}: not a classifier file")
        try:
            version = Version(str(payload.get('version')))
        except InvalidVersion:
            raise CorruptFile(f"{path}: unreadable format version") from None
        if version.major != Version(FILE_VERSION).major:
            raise CorruptFile(f"{path}: format version {version} is not supported")
        try:
            stats = None if payload['stats'] is None else TrainingStats.from_dict(payload['stats'])
            classifier = cls(payload['W1'], payload['b1'], payload['W2'], payload['b2'],
                             schema_hash=payload['schema_hash'], stats=stats,
                             activation=payload['activation'])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptFile(f"{path}: malformed weights ({e})") from None
        if classifier.input_width != payload.get('input_width'):
            raise CorruptFile(f"{path}: width field disagrees with weights")
        if schema is not None and schema.schema_hash() != classifier.schema_hash:
            raise SchemaMismatch(f"{path} was trained under a different schema")
        return classifier


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _mean_cross_entropy(W1, b1, W2, b2, X, y):
    z = np.tanh(X @ W1.T + b1) @ W2 + b2
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def train(dataset, config=None):
    """Fit the network by minibatch Adam on the dataset's training split.

    Returns a TrainResult with the classifier and held-out accuracy on the
    test split.
    """
    config = config or TrainConfig()
    X, y = dataset.train
    if len(X) == 0:
        raise SingleClassDataset("training split is empty")
    if len(np.unique(y)) < 2:
        raise SingleClassDataset("training split holds a single class")
    y = y.astype(float)

    rng = np.random.default_rng(config.seed)
    n, width = X.shape
    hidden = config.hidden_units
    lim1 = 1.0 / np.sqrt(width)
    lim2 = 1.0 / np.sqrt(hidden)
    params = [
        rng.uniform(-lim1, lim1, size=(hidden, width)),
        rng.uniform(-lim1, lim1, size=hidden),
        rng.uniform(-lim2, lim2, size=hidden),
        np.zeros(()),
    ]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    loss_history = [_mean_cross_entropy(*params, X, y)]

    start = time.time()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb, yb = X[idx], y[idx]
            W1, b1, W2, b2 = params
            h = np.tanh(xb @ W1.T + b1)
            z = h @ W2 + b2
            dz = (_sigmoid(z) - yb) / len(idx)
            dh = np.outer(dz, W2) * (1.0 - h * h)
            grads = [dh.T @ xb, dh.sum(axis=0), h.T @ dz, np.asarray(dz.sum())]

            step += 1
            for i, g in enumerate(grads):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                m_hat = m[i] / (1 - beta1 ** step)
                v_hat = v[i] / (1 - beta2 ** step)
                params[i] = params[i] - config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        loss_history.append(_mean_cross_entropy(*params, X, y))
        logger.debug(f"epoch {epoch + 1}/{config.epochs}: loss {loss_history[-1]:.5f}")

    classifier = MlpClassifier(params[0], params[1], params[2], float(params[3]),
                               schema_hash=dataset.schema.schema_hash(), stats=dataset.stats)
    X_test, y_test = dataset.test
    if len(X_test) == 0:
        logger.warning("Test split is empty; reporting training accuracy")
        X_test, y_test = dataset.train
    accuracy = float(np.mean((classifier.predict_proba_batch(X_test) > 0.5) == (y_test == 1)))
    logger.info(f"Trained {hidden}-unit classifier in {time.time() - start:.1f}s: "
                f"final loss {loss_history[-1]:.4f}, held-out accuracy {accuracy:.3f}")
    return TrainResult(classifier=classifier, accuracy=accuracy, loss_history=tuple(loss_history))
