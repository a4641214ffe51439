"""Local model families: an MLP classifier and a label-conditioned VAE.

Both follow the scikit-learn estimator protocol (``get_params``/``set_params``,
``fit``, trailing-underscore fitted attributes) so they drop into pipelines,
``clone`` and model-selection utilities.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import (
    DimensionError,
    FormatError,
    ValidationError,
    as_float_array,
    check_labels,
    check_pair,
    check_unit_interval,
)


def one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def init_dense_stack(layer_dims, rng):
    """Glorot-uniform weights, zero biases, for a chain of dense layers."""
    params = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        params.append(nn.Parameter(nn.glorot_uniform(fan_in, fan_out, rng)))
        params.append(nn.Parameter(np.zeros(fan_out)))
    return params


def _iter_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# --------------------------------------------------------------------------
# MLP classifier


def mlp_forward(params, X):
    """Logits of a ReLU MLP given as ``[W1, b1, W2, b2, ...]``."""
    caches = []
    h = X
    n_layers = len(params) // 2
    for i in range(n_layers):
        act = "identity" if i == n_layers - 1 else "relu"
        h, cache = nn.dense_forward(h, params[2 * i], params[2 * i + 1], act)
        caches.append(cache)
    return h, caches


def mlp_backward(params, caches, grad_logits):
    g = grad_logits
    for i in reversed(range(len(caches))):
        g = nn.dense_backward(caches[i], g, params[2 * i], params[2 * i + 1])
    return g


def layer_dims_of(params):
    dims = [params[0].shape[0]]
    dims += [params[i].shape[1] for i in range(0, len(params), 2)]
    return dims


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """Feed-forward ReLU classifier trained with mini-batch SGD + momentum.

    The training loss is the batch-*summed* cross-entropy, so ``learning_rate``
    is a per-sample step size.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the hidden layers.
    n_classes : int or None
        Number of output logits. ``None`` infers ``max(y) + 1`` at fit time;
        set it explicitly when a client's local data may miss classes.
    learning_rate, momentum : float
        SGD step size and heavy-ball coefficient.
    batch_size : int
    max_epochs : int
        Number of passes over the training data.
    random_state : int, numpy Generator or None
        Drives weight initialisation and batch shuffling.
    """

    def __init__(
        self,
        hidden_layer_sizes=(128, 64),
        n_classes=None,
        learning_rate=1e-3,
        momentum=0.9,
        batch_size=64,
        max_epochs=50,
        random_state=None,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.random_state = random_state

    def _resolve_n_classes(self, y):
        if self.n_classes is not None:
            return int(self.n_classes)
        return int(np.max(y)) + 1

    def initialize(self, n_features, n_classes, rng):
        dims = [n_features, *self.hidden_layer_sizes, n_classes]
        self.params_ = init_dense_stack(dims, rng)
        self.n_features_in_ = n_features
        self.classes_ = np.arange(n_classes)
        return self

    def set_weights(self, arrays):
        """Install parameter values (``[W1, b1, ...]``) without training."""
        self.params_ = [nn.Parameter(a) for a in arrays]
        dims = layer_dims_of(self.params_)
        expected = len(self.hidden_layer_sizes) + 2
        if len(dims) != expected or tuple(dims[1:-1]) != tuple(self.hidden_layer_sizes):
            raise DimensionError(
                f"weights describe layers {dims}, estimator expects hidden "
                f"{tuple(self.hidden_layer_sizes)}"
            )
        self.n_features_in_ = dims[0]
        self.classes_ = np.arange(dims[-1])
        return self

    def get_weights(self):
        check_is_fitted(self, "params_")
        return [p.value.copy() for p in self.params_]

    @property
    def layer_dims_(self):
        check_is_fitted(self, "params_")
        return layer_dims_of(self.params_)

    def fit(self, X, y, init_params=None):
        """Train for ``max_epochs`` epochs.

        ``init_params`` (list of arrays) replaces the random initialisation,
        e.g. when every client starts from a server-broadcast model.
        """
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValidationError("max_epochs must be >= 0 and batch_size >= 1")
        y_arr = np.asarray(y)
        n_classes = self._resolve_n_classes(y_arr) if y_arr.size else self.n_classes
        X, y = check_pair(X, y, n_classes)
        if X.shape[0] == 0:
            raise ValidationError("cannot fit on an empty dataset")
        rng = np.random.default_rng(self.random_state)
        if init_params is None:
            self.initialize(X.shape[1], n_classes, rng)
        else:
            self.set_weights(init_params)
            if self.n_features_in_ != X.shape[1] or len(self.classes_) != n_classes:
                raise DimensionError("init_params do not match the data shape")

        opt = nn.SGDMomentum(self.params_, self.learning_rate, self.momentum)
        self.loss_curve_ = []
        for _ in range(self.max_epochs):
            total = 0.0
            for idx in _iter_batches(X.shape[0], self.batch_size, rng):
                opt.zero_grad()
                loss = self._accumulate(X[idx], y[idx], "sum")
                opt.step()
                total += loss
            self.loss_curve_.append(total / X.shape[0])
        return self

    def _accumulate(self, X, y, reduction):
        logits, caches = mlp_forward(self.params_, X)
        loss, grad = nn.cross_entropy(logits, y, reduction=reduction)
        mlp_backward(self.params_, caches, grad)
        return loss

    def loss_gradient(self, X, y, reduction="sum"):
        """Cross-entropy on ``(X, y)`` and the gradient of every parameter.

        Gradients are zeroed first, then left populated in ``params_[i].grad``.
        """
        check_is_fitted(self, "params_")
        X, y = check_pair(X, y, len(self.classes_))
        self._check_features(X)
        nn.zero_grads(self.params_)
        loss = self._accumulate(X, y, reduction)
        return loss, [p.grad.copy() for p in self.params_]

    def _check_features(self, X):
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(
                f"X has {X.shape[1]} features, model expects {self.n_features_in_}"
            )

    def decision_function(self, X):
        """Raw logits, shape ``(n_samples, n_classes)``."""
        check_is_fitted(self, "params_")
        X = as_float_array(X, ndim=2, name="X")
        self._check_features(X)
        return mlp_forward(self.params_, X)[0]

    def predict_proba(self, X):
        return nn.softmax(self.decision_function(X))

    def predict(self, X):
        # np.argmax returns the first maximum: ties go to the lowest class.
        return np.argmax(self.decision_function(X), axis=1)


# --------------------------------------------------------------------------
# Conditional VAE


def reparameterize(mu, logvar, eps):
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if not (mu.shape == logvar.shape == eps.shape):
        raise DimensionError(
            f"mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape} must match"
        )
    return mu + np.exp(0.5 * logvar) * eps


def gaussian_kl(mu, logvar):
    """Row-wise KL(N(mu, exp(logvar)) || N(0, I))."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=-1)


class CVAEDecoder:
    """The generative half of a CVAE: ``[z, one_hot(c)] -> hidden -> sigmoid pixels``.

    This is all a resource-constrained client ships to the server.
    """

    def __init__(self, weights, latent_dim, n_classes):
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.latent_dim = int(latent_dim)
        self.n_classes = int(n_classes)
        if len(self.weights) != 4:
            raise DimensionError("decoder expects [W_hidden, b_hidden, W_out, b_out]")
        if self.weights[0].shape[0] != self.latent_dim + self.n_classes:
            raise DimensionError(
                f"decoder input width {self.weights[0].shape[0]} != "
                f"latent_dim + n_classes = {self.latent_dim + self.n_classes}"
            )

    @property
    def layer_dims(self):
        return [self.weights[0].shape[0], self.weights[0].shape[1], self.weights[2].shape[1]]

    @property
    def n_features(self):
        return self.weights[2].shape[1]

    def decode(self, z, labels):
        z = as_float_array(z, name="z")
        single = z.ndim == 1
        z = np.atleast_2d(z)
        labels = check_labels(np.atleast_1d(labels), self.n_classes)
        if z.shape != (len(labels), self.latent_dim):
            raise DimensionError(f"z shape {z.shape} does not match {len(labels)} labels")
        h = nn.relu(np.hstack([z, one_hot(labels, self.n_classes)]) @ self.weights[0] + self.weights[1])
        out = nn.sigmoid(h @ self.weights[2] + self.weights[3])
        return out[0] if single else out

    def sample(self, labels, rng):
        """Decode one standard-normal latent draw per label."""
        labels = check_labels(np.atleast_1d(labels), self.n_classes)
        z = rng.standard_normal((len(labels), self.latent_dim))
        return self.decode(z, labels)


def decoder_sample(decoder, label, rng):
    """Draw a single sample of class ``label`` from ``decoder``."""
    return decoder.sample([label], rng)[0]


class ConditionalVAE(BaseEstimator):
    """Label-conditioned VAE with one hidden layer on each side, trained with Adam.

    The per-batch loss is the mean over samples of the Bernoulli
    reconstruction cross-entropy (summed over pixels) plus the closed-form
    Gaussian KL to the standard-normal prior. Inputs must lie in [0, 1].

    Parameters
    ----------
    latent_dim : int
    hidden_size : int
    n_classes : int or None
        ``None`` infers ``max(y) + 1`` at fit time.
    learning_rate : float
        Adam step size.
    batch_size, max_epochs : int
    random_state : int, numpy Generator or None
        Drives initialisation, shuffling and the reparameterisation noise.
    """

    def __init__(
        self,
        latent_dim=8,
        hidden_size=64,
        n_classes=None,
        learning_rate=1e-2,
        batch_size=64,
        max_epochs=30,
        random_state=None,
    ):
        self.latent_dim = latent_dim
        self.hidden_size = hidden_size
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.random_state = random_state

    # layout of params_: encoder hidden (W, b), mu head (W, b), logvar head (W, b),
    # decoder hidden (W, b), decoder output (W, b)
    def initialize(self, n_features, n_classes, rng):
        c, d, h, dz = n_classes, n_features, self.hidden_size, self.latent_dim
        params = init_dense_stack([d + c, h], rng)
        params += init_dense_stack([h, dz], rng)
        params += init_dense_stack([h, dz], rng)
        params += init_dense_stack([dz + c, h, d], rng)
        self.params_ = params
        self.n_features_in_ = n_features
        self.n_classes_ = n_classes
        return self

    @property
    def encoder_params_(self):
        return self.params_[:6]

    @property
    def decoder_params_(self):
        return self.params_[6:]

    @property
    def decoder_(self):
        check_is_fitted(self, "params_")
        return CVAEDecoder(
            [p.value for p in self.decoder_params_], self.latent_dim, self.n_classes_
        )

    def _labels(self, y):
        return check_labels(np.atleast_1d(y), self.n_classes_)

    def encode(self, X, y):
        """Posterior mean and log-variance for each ``(x, c)`` row."""
        check_is_fitted(self, "params_")
        X = np.atleast_2d(as_float_array(X, name="X"))
        y = self._labels(y)
        if X.shape != (len(y), self.n_features_in_):
            raise DimensionError(f"X shape {X.shape} does not match labels / features")
        return self._encode(X, y)[:2]

    def _encode(self, X, y):
        p = self.params_
        xc = np.hstack([X, one_hot(y, self.n_classes_)])
        h, c_h = nn.dense_forward(xc, p[0], p[1], "relu")
        mu, c_mu = nn.dense_forward(h, p[2], p[3])
        logvar, c_lv = nn.dense_forward(h, p[4], p[5])
        return mu, logvar, (c_h, c_mu, c_lv)

    def decode(self, z, y):
        check_is_fitted(self, "params_")
        return self.decoder_.decode(z, y)

    def loss_gradient(self, X, y, eps, accumulate=False):
        """Batch loss for fixed noise ``eps`` and the gradient of every parameter.

        Returns ``(loss, recon, kl, grads)`` where ``recon`` and ``kl`` are the
        batch means of the two terms. Unless ``accumulate`` is set the
        gradients are zeroed first.
        """
        check_is_fitted(self, "params_")
        X, y = check_pair(X, y, self.n_classes_)
        check_unit_interval(X)
        eps = as_float_array(eps, ndim=2, name="eps")
        if eps.shape != (X.shape[0], self.latent_dim):
            raise DimensionError(f"eps shape {eps.shape} != ({X.shape[0]}, {self.latent_dim})")
        if not accumulate:
            nn.zero_grads(self.params_)
        p = self.params_
        b = X.shape[0]
        onehot = one_hot(y, self.n_classes_)

        mu, logvar, (c_h, c_mu, c_lv) = self._encode(X, y)
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
        h2, c_h2 = nn.dense_forward(np.hstack([z, onehot]), p[6], p[7], "relu")
        logits, c_out = nn.dense_forward(h2, p[8], p[9])

        # Bernoulli cross-entropy from logits: softplus(a) - x * a.
        recon_rows = np.sum(np.logaddexp(0.0, logits) - X * logits, axis=1)
        kl_rows = gaussian_kl(mu, logvar)
        recon = float(np.sum(recon_rows) / b)
        kl = float(np.sum(kl_rows) / b)

        g_logits = (nn.sigmoid(logits) - X) / b
        g_h2 = nn.dense_backward(c_out, g_logits, p[8], p[9])
        g_zc = nn.dense_backward(c_h2, g_h2, p[6], p[7])
        g_z = g_zc[:, : self.latent_dim]
        g_mu = g_z + mu / b
        g_logvar = g_z * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / b
        g_h = nn.dense_backward(c_mu, g_mu, p[2], p[3])
        g_h += nn.dense_backward(c_lv, g_logvar, p[4], p[5])
        nn.dense_backward(c_h, g_h, p[0], p[1])
        return recon + kl, recon, kl, [q.grad.copy() for q in p]

    def fit(self, X, y):
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValidationError("max_epochs must be >= 0 and batch_size >= 1")
        y_arr = np.asarray(y)
        n_classes = int(self.n_classes) if self.n_classes is not None else int(np.max(y_arr)) + 1
        X, y = check_pair(X, y, n_classes)
        check_unit_interval(X)
        if X.shape[0] == 0:
            raise ValidationError("cannot fit on an empty dataset")
        rng = np.random.default_rng(self.random_state)
        self.initialize(X.shape[1], n_classes, rng)
        opt = nn.Adam(self.params_, lr=self.learning_rate)
        self.loss_curve_ = []
        for _ in range(self.max_epochs):
            total = 0.0
            for idx in _iter_batches(X.shape[0], self.batch_size, rng):
                eps = rng.standard_normal((len(idx), self.latent_dim))
                loss = self.loss_gradient(X[idx], y[idx], eps)[0]
                opt.step()
                total += loss * len(idx)
            self.loss_curve_.append(total / X.shape[0])
        return self

    def sample(self, labels, random_state=None):
        return self.decoder_.sample(labels, np.random.default_rng(random_state))


# --------------------------------------------------------------------------
# Checkpoints: one text header line, then little-endian float64 payload.

CHECKPOINT_MAGIC = "fedmho-checkpoint"


def save_checkpoint(path, kind, layer_dims, arrays, **meta):
    """Write dense-chain parameters ``[W1, b1, W2, b2, ...]`` to ``path``."""
    dims = [int(d) for d in layer_dims]
    expected = [(a, b) for a, b in zip(dims[:-1], dims[1:])]
    shapes = [tuple(np.shape(a)) for a in arrays]
    want = [s for fan in expected for s in (fan, (fan[1],))]
    if shapes != want:
        raise DimensionError(f"array shapes {shapes} do not match layer dims {dims}")
    fields = [CHECKPOINT_MAGIC, f"kind={kind}", "dims=" + ",".join(map(str, dims))]
    fields += [f"{k}={v}" for k, v in sorted(meta.items())]
    payload = np.concatenate([np.ravel(a) for a in arrays]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write((" ".join(fields) + "\n").encode("ascii"))
        fh.write(payload.tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(kind, dims, arrays, meta)``."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        body = fh.read()
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: missing '{CHECKPOINT_MAGIC}' header")
    fields = dict(item.split("=", 1) for item in header[1:])
    try:
        kind = fields.pop("kind")
        dims = [int(d) for d in fields.pop("dims").split(",")]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header field {exc}") from None
    flat = np.frombuffer(body, dtype="<f8")
    n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if flat.size != n or len(body) != 8 * n:
        raise FormatError(f"{path}: payload holds {len(body)} bytes, expected {8 * n}")
    arrays, off = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        arrays.append(flat[off:off + a * b].reshape(a, b).astype(np.float64))
        off += a * b
        arrays.append(flat[off:off + b].astype(np.float64))
        off += b
    return kind, dims, arrays, fields
