"""Local training for the two client kinds and their one-shot uploads.

A classifier client uploads its whole parameter set; a generative client
uploads only its CVAE decoder plus the label histogram of its local data.
Neither upload type has room for raw samples or encoder weights.
"""

import enum
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import clone

from ._validation import ValidationError, check_pair
from .models import CVAEDecoder, MLPClassifier, load_checkpoint, save_checkpoint


class ClientKind(enum.Enum):
    CLASSIFIER = "classifier"
    GENERATIVE = "generative"


@dataclass(frozen=True)
class ClientConfig:
    client_id: int
    kind: ClientKind
    local_epochs: int
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValidationError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")


@dataclass(frozen=True)
class ClassifierUpdate:
    client_id: int
    params: tuple

    def __post_init__(self):
        frozen = []
        for p in self.params:
            a = np.array(p, dtype=np.float64)
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "params", tuple(frozen))

    @property
    def layer_dims(self):
        dims = [self.params[0].shape[0]]
        return dims + [self.params[i].shape[1] for i in range(0, len(self.params), 2)]

    def to_estimator(self):
        dims = self.layer_dims
        return MLPClassifier(hidden_layer_sizes=tuple(dims[1:-1])).set_weights(self.params)


@dataclass(frozen=True)
class GenerativeUpdate:
    client_id: int
    decoder: CVAEDecoder
    label_counts: np.ndarray


# Sub-stream tags for derive_rng; the experiment seed is the SeedSequence entropy.
STREAM_CLIENT = 0
STREAM_SAMPLING = 1
STREAM_FUSION = 2
STREAM_INIT = 3


def derive_rng(seed, *keys):
    """Independent generator for ``(seed, *keys)`` via ``SeedSequence.spawn_key``.

    Plain entropy lists are not used because ``[s, k]`` and ``[s, k, 0]``
    hash to the same state.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def client_rng(seed, client_id):
    """Training stream of one client; adding clients never perturbs another's."""
    return derive_rng(seed, STREAM_CLIENT, client_id)


def _local_data(X, y, n_classes):
    X, y = check_pair(X, y, n_classes)
    if X.shape[0] == 0:
        raise ValidationError("client has no local data")
    return X, y


def train_classifier_local(config, model, X, y, init_params=None):
    """Run ``config.local_epochs`` epochs of SGD-momentum on the local data.

    ``model`` supplies the architecture (and ``n_classes``); optimiser settings
    come from ``config``. Returns a :class:`ClassifierUpdate`.
    """
    if config.kind is not ClientKind.CLASSIFIER:
        raise ValidationError(f"client {config.client_id} is not a classifier client")
    X, y = _local_data(X, y, model.n_classes or int(np.max(y)) + 1)
    est = clone(model).set_params(
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        batch_size=config.batch_size,
        max_epochs=config.local_epochs,
        random_state=client_rng(config.seed, config.client_id),
    )
    est.fit(X, y, init_params=init_params)
    return ClassifierUpdate(config.client_id, tuple(est.get_weights()))


def train_cvae_local(config, model, X, y):
    """Train a CVAE with Adam and return its decoder plus the label histogram."""
    if config.kind is not ClientKind.GENERATIVE:
        raise ValidationError(f"client {config.client_id} is not a generative client")
    if model.n_classes is None:
        raise ValidationError("model.n_classes must be set for generative clients")
    X, y = _local_data(X, y, model.n_classes)
    est = clone(model).set_params(
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        max_epochs=config.local_epochs,
        random_state=client_rng(config.seed, config.client_id),
    )
    est.fit(X, y)
    counts = np.bincount(y, minlength=model.n_classes).astype(np.int64)
    return GenerativeUpdate(config.client_id, est.decoder_, counts)


# --------------------------------------------------------------------------
# Persistence


def save_update(update, directory):
    """Write an update as ``client_<id>.ckpt`` (+ ``client_<id>.labels.txt``)."""
    os.makedirs(directory, exist_ok=True)
    stem = os.path.join(directory, f"client_{update.client_id}")
    if isinstance(update, ClassifierUpdate):
        save_checkpoint(stem + ".ckpt", "mlp", update.layer_dims, update.params,
                        client_id=update.client_id)
    else:
        dec = update.decoder
        save_checkpoint(stem + ".ckpt", "cvae-decoder", dec.layer_dims, dec.weights,
                        client_id=update.client_id, latent_dim=dec.latent_dim,
                        n_classes=dec.n_classes)
        with open(stem + ".labels.txt", "w") as fh:
            fh.write(" ".join(str(int(c)) for c in update.label_counts) + "\n")
    return stem + ".ckpt"


def load_update(path):
    kind, dims, arrays, meta = load_checkpoint(path)
    client_id = int(meta["client_id"])
    if kind == "mlp":
        return ClassifierUpdate(client_id, tuple(arrays))
    decoder = CVAEDecoder(arrays, int(meta["latent_dim"]), int(meta["n_classes"]))
    with open(path[: -len(".ckpt")] + ".labels.txt") as fh:
        counts = np.array([int(t) for t in fh.read().split()], dtype=np.int64)
    return GenerativeUpdate(client_id, decoder, counts)

